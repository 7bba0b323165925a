"""Control problem definitions, assumption checks and builtin benchmarks.

Coefficient functions broadcast over leading axes.  With ``x`` of shape
``(..., n)``, ``y`` of shape ``(..., n)`` (usually just ``(n,)``) and ``u`` of
shape ``(..., k)`` they return

* ``drift``         -> ``(..., n)``
* ``diffusion``     -> ``(..., n, d)``
* ``running_cost``  -> ``(...)``
* ``terminal_cost`` -> ``(...)``
* ``singular_gain(t)`` -> ``(n, m)``, ``singular_cost(t)`` -> ``(m,)``

Partial derivatives follow the same batch convention with trailing axes
``b_x, b_y: (..., n, n)``, ``sigma_x, sigma_y: (..., n, d, n)`` and
``f_x, f_y, h_x, h_y: (..., n)``.  The last axis is always the
differentiation direction.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from .errors import ConfigError, IllPosedProblemError

DERIVATIVE_NAMES = ("b_x", "b_y", "sigma_x", "sigma_y", "f_x", "f_y", "h_x", "h_y")
FD_REL_STEP = 1e-6


@dataclass(frozen=True)
class ProblemSpec:
    """Mean-field control problem with strict, singular and relaxed controls."""

    name: str
    state_dim: int
    noise_dim: int
    control_dim: int
    singular_dim: int
    horizon: float
    x0: np.ndarray
    drift: Callable
    diffusion: Callable
    singular_gain: Callable
    running_cost: Callable
    terminal_cost: Callable
    singular_cost: Callable
    control_set: np.ndarray
    derivatives: Mapping[str, Callable] = field(default_factory=dict)
    params: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        for attr in ("state_dim", "noise_dim", "control_dim", "singular_dim"):
            if int(getattr(self, attr)) < 1:
                raise ValueError(f"{attr} must be a positive integer")
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")
        x0 = np.asarray(self.x0, dtype=float).reshape(-1)
        if x0.shape != (self.state_dim,):
            raise ValueError(f"x0 must have length {self.state_dim}")
        cs = np.asarray(self.control_set, dtype=float)
        if cs.ndim == 1:
            cs = cs[:, None]
        if cs.ndim != 2 or cs.shape[0] == 0 or cs.shape[1] != self.control_dim:
            raise ValueError("control_set must be a nonempty (A, k) array")
        if not np.all(np.isfinite(cs)):
            raise ValueError("control_set points must be finite")
        unknown = set(self.derivatives) - set(DERIVATIVE_NAMES)
        if unknown:
            raise ValueError(f"unknown derivative names: {sorted(unknown)}")
        x0.setflags(write=False)
        cs.setflags(write=False)
        object.__setattr__(self, "x0", x0)
        object.__setattr__(self, "control_set", cs)
        object.__setattr__(self, "derivatives", dict(self.derivatives))
        object.__setattr__(self, "params", dict(self.params))

    # -- coefficient evaluation -------------------------------------------------

    def b(self, t, x, y, u):
        return np.asarray(self.drift(t, x, y, u), dtype=float)

    def sigma(self, t, x, y):
        return np.asarray(self.diffusion(t, x, y), dtype=float)

    def f(self, t, x, y, u):
        return np.asarray(self.running_cost(t, x, y, u), dtype=float)

    def h(self, x, y):
        return np.asarray(self.terminal_cost(x, y), dtype=float)

    def G(self, t):
        return np.asarray(self.singular_gain(t), dtype=float).reshape(self.state_dim, self.singular_dim)

    def phi(self, t):
        return np.asarray(self.singular_cost(t), dtype=float).reshape(self.singular_dim)

    # -- partial derivatives ----------------------------------------------------

    def partial(self, name: str, *args, force_fd: bool = False) -> np.ndarray:
        """Evaluate a partial derivative, analytic when supplied else central FD.

        ``args`` are the arguments of the underlying coefficient: ``(t, x, y, u)``
        for b and f, ``(t, x, y)`` for sigma and ``(x, y)`` for h.
        """
        if name not in DERIVATIVE_NAMES:
            raise KeyError(name)
        fn = None if force_fd else self.derivatives.get(name)
        base, wrt = name.split("_")
        trailing = {"b": 2, "sigma": 3, "f": 1, "h": 1}[base]
        batch = _batch_shape(base, args)
        if fn is not None:
            out = np.asarray(fn(*args), dtype=float)
            return np.broadcast_to(out, batch + out.shape[out.ndim - trailing:])
        return _central_difference(self._coef(base), args, _wrt_index(base, wrt), batch, trailing - 1)

    def _coef(self, base: str) -> Callable:
        return {"b": self.b, "sigma": self.sigma, "f": self.f, "h": self.h}[base]

    def with_params(self, **overrides) -> "ProblemSpec":
        """Rebuild a builtin with overridden parameters."""
        builder = BUILTINS.get(self.name)
        if builder is None:
            raise ConfigError(f"spec {self.name!r} is not a builtin and cannot be rebuilt")
        merged = dict(self.params)
        merged.update(overrides)
        return builder(**merged)

    def fingerprint(self) -> str:
        """Stable hash of the spec's identity (name, params, dimensions)."""
        payload = {
            "name": self.name,
            "params": {k: float(v) for k, v in sorted(self.params.items())},
            "dims": [self.state_dim, self.noise_dim, self.control_dim, self.singular_dim],
            "horizon": float(self.horizon),
            "x0": self.x0.tolist(),
            "control_set": self.control_set.tolist(),
        }
        blob = json.dumps(payload, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _wrt_index(base: str, wrt: str) -> int:
    offset = 0 if base == "h" else 1
    return offset + (0 if wrt == "x" else 1)


def _batch_shape(base: str, args) -> tuple:
    if base == "h":
        shapes = [np.shape(args[0])[:-1], np.shape(args[1])[:-1]]
    elif base == "sigma":
        shapes = [np.shape(args[1])[:-1], np.shape(args[2])[:-1]]
    else:
        shapes = [np.shape(a)[:-1] for a in args[1:4]]
    return tuple(np.broadcast_shapes(*shapes))


def _central_difference(fn: Callable, args, idx: int, batch: tuple, trailing: int) -> np.ndarray:
    z = np.asarray(args[idx], dtype=float)
    n = z.shape[-1]
    cols = []
    for l in range(n):
        step = FD_REL_STEP * (1.0 + np.abs(z[..., l]))
        dz = np.zeros(z.shape)
        dz[..., l] = step
        plus, minus = list(args), list(args)
        plus[idx] = z + dz
        minus[idx] = z - dz
        diff = np.asarray(fn(*plus), dtype=float) - np.asarray(fn(*minus), dtype=float)
        cols.append(diff / (2.0 * step.reshape(step.shape + (1,) * trailing)))
    return _fit_batch(np.stack(cols, axis=-1), batch)


def _fit_batch(out: np.ndarray, batch: tuple) -> np.ndarray:
    trailing = out.ndim - len(batch)
    if trailing < 0:
        raise ValueError("derivative output has fewer axes than the batch")
    return np.broadcast_to(out, batch + out.shape[out.ndim - trailing:])


# -- assumption report ----------------------------------------------------------


@dataclass(frozen=True)
class AssumptionCheck:
    assumption: str
    probe: str
    passed: bool
    worst_residual: float


@dataclass(frozen=True)
class AssumptionReport:
    checks: tuple
    seed: int

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def failures(self) -> list:
        return [c for c in self.checks if not c.passed]


def _probe_points(spec: ProblemSpec, probes: int, radius: float, rng: np.random.Generator):
    n = spec.state_dim

    def ball(count):
        v = rng.standard_normal((count, n))
        v /= np.linalg.norm(v, axis=1, keepdims=True) + 1e-300
        return v * rng.uniform(0.0, 1.0, (count, 1)) ** (1.0 / n)

    t = rng.uniform(0.0, spec.horizon, probes)
    xs = ball(probes) * radius
    ys = ball(probes) * radius
    ui = rng.integers(0, spec.control_set.shape[0], probes)
    return t, xs, ys, spec.control_set[ui]


def _require_finite(label: str, value) -> None:
    if not np.all(np.isfinite(value)):
        raise IllPosedProblemError(f"{label} returned a non-finite value at a probe point")


def validate_spec(spec: ProblemSpec, probes: int = 100, box_radius: float = 5.0, seed: int = 0,
                  growth_ratio_limit: float = 1.5, fd_rel_tol: float = 1e-4) -> AssumptionReport:
    """Probe the standing assumptions on random points of the probe box.

    H1 compares derivatives at each probe with derivatives at a nearby point
    (continuity) and, for analytic partials, with central differences.  H2 fits
    the smallest linear-growth constant on dyadic sub-balls and flags
    super-linear blowup when the constant keeps growing between the two outer
    radii.  H3 bounds the singular gain on [0, T]; H4 bounds b and h on the box.
    """
    if probes < 1:
        raise ValueError("probes must be >= 1")
    if not box_radius > 0:
        raise ValueError("box_radius must be positive")
    rng = np.random.default_rng(seed)
    t, xs, ys, us = _probe_points(spec, probes, box_radius, rng)
    checks = []

    # outputs must be finite everywhere we look; otherwise the problem is ill posed
    bv = np.stack([spec.b(t[i], xs[i], ys[i], us[i]) for i in range(probes)])
    sv = np.stack([spec.sigma(t[i], xs[i], ys[i]) for i in range(probes)])
    fv = np.array([spec.f(t[i], xs[i], ys[i], us[i]) for i in range(probes)])
    hv = np.array([spec.h(xs[i], ys[i]) for i in range(probes)])
    gv = np.stack([spec.G(ti) for ti in t])
    pv = np.stack([spec.phi(ti) for ti in t])
    for label, arr in (("drift", bv), ("diffusion", sv), ("running_cost", fv),
                       ("terminal_cost", hv), ("singular_gain", gv), ("singular_cost", pv)):
        _require_finite(label, arr)

    # H1: continuity of partials and agreement of analytic partials with FD
    delta = 1e-3
    worst_cont, worst_fd = 0.0, 0.0
    for name in DERIVATIVE_NAMES:
        base = name.split("_")[0]
        for i in range(probes):
            args = _args_for(base, t[i], xs[i], ys[i], us[i])
            near = _args_for(base, t[i], xs[i] + delta * (1 + np.abs(xs[i])),
                             ys[i] + delta * (1 + np.abs(ys[i])), us[i])
            d0 = spec.partial(name, *args)
            d1 = spec.partial(name, *near)
            _require_finite(name, d0)
            _require_finite(name, d1)
            scale = 1.0 + np.max(np.abs(d0))
            worst_cont = max(worst_cont, float(np.max(np.abs(d1 - d0)) / scale))
            if name in spec.derivatives:
                fd = spec.partial(name, *args, force_fd=True)
                worst_fd = max(worst_fd, float(np.max(np.abs(fd - d0)) / max(1.0, np.max(np.abs(d0)))))
    checks.append(AssumptionCheck("H1", f"partials continuous under {delta:g}-relative shifts",
                                  worst_cont < 0.1, worst_cont))
    checks.append(AssumptionCheck("H1", "analytic partials match central differences",
                                  worst_fd <= fd_rel_tol, worst_fd))

    # H2: linear growth; ratio of fitted constants on radii R and R/2
    def growth_constant(r):
        scale = r / box_radius
        xr, yr = xs * scale, ys * scale
        cb = cs = 0.0
        for i in range(probes):
            nx, ny, nu = (np.linalg.norm(xr[i]), np.linalg.norm(yr[i]), np.linalg.norm(us[i]))
            cb = max(cb, np.linalg.norm(spec.b(t[i], xr[i], yr[i], us[i])) / (1 + nx + ny + nu))
            cs = max(cs, np.linalg.norm(spec.sigma(t[i], xr[i], yr[i])) / (1 + nx + ny))
        return cb, cs

    cb_r, cs_r = growth_constant(box_radius)
    cb_h, cs_h = growth_constant(box_radius / 2)
    ratios = [c_r / c_h if c_h > 0 else (np.inf if c_r > 0 else 1.0)
              for c_r, c_h in ((cb_r, cb_h), (cs_r, cs_h))]
    worst_ratio = float(max(ratios))
    checks.append(AssumptionCheck("H2", "growth constant ratio C(R)/C(R/2) for b and sigma",
                                  worst_ratio <= growth_ratio_limit, worst_ratio))

    # H3: bounded singular gain over [0, T]
    tg = np.linspace(0.0, spec.horizon, 257)
    gmax = max(float(np.max(np.abs(gv))), max(float(np.max(np.abs(spec.G(s)))) for s in tg))
    checks.append(AssumptionCheck("H3", "sup |G(t)| over [0, T]", bool(np.isfinite(gmax)), gmax))

    # H4: boundedness of b and h over the probe box
    bh = float(max(np.max(np.abs(bv)), np.max(np.abs(hv))))
    checks.append(AssumptionCheck("H4", f"sup |b|, |h| on the radius-{box_radius:g} box",
                                  bool(np.isfinite(bh)), bh))
    return AssumptionReport(tuple(checks), seed)


def _args_for(base, t, x, y, u):
    if base == "h":
        return (x, y)
    if base == "sigma":
        return (t, x, y)
    return (t, x, y, u)


# -- builtins -------------------------------------------------------------------


def _scalar_const(value: float, shape=(1, 1)):
    arr = np.full(shape, float(value))

    def fn(t):
        return arr.copy()

    return fn


def _const_diffusion(sigma: float):
    def diffusion(t, x, y):
        batch = np.broadcast_shapes(np.shape(x)[:-1], np.shape(y)[:-1])
        return np.full(batch + (1, 1), float(sigma))

    return diffusion


def _zero_sigma_partial(t, x, y):
    batch = np.broadcast_shapes(np.shape(x)[:-1], np.shape(y)[:-1])
    return np.zeros(batch + (1, 1, 1))


def builtin_lq(a: float = -0.5, abar: float = 0.3, c: float = 1.0, sigma: float = 0.2,
               r: float = 1.0, terminal_weight: float = 1.0, phi: float = 10.0,
               cubic: float = 0.0, u_max: float = 2.0, n_controls: int = 41,
               horizon: float = 1.0, x0: float = 1.0) -> ProblemSpec:
    """Scalar linear-quadratic mean-field benchmark.

    ``b = a x + abar E[X] + c u + cubic x^3``, constant diffusion, unit singular
    gain, ``f = (x^2 + r u^2) / 2`` and ``h = terminal_weight x^2 / 2``.  The
    large singular cost ``phi`` makes ``eta = 0`` optimal.  A nonzero ``cubic``
    breaks linearity on purpose for variational tests.
    """
    a, abar, c, r, w, cubic = map(float, (a, abar, c, r, terminal_weight, cubic))

    def drift(t, x, y, u):
        return a * x + abar * y + c * u + cubic * x ** 3

    def running_cost(t, x, y, u):
        return 0.5 * (x[..., 0] ** 2 + r * u[..., 0] ** 2)

    def terminal_cost(x, y):
        return 0.5 * w * x[..., 0] ** 2 + 0.0 * y[..., 0]

    derivatives = {
        "b_x": lambda t, x, y, u: (a + 3.0 * cubic * x ** 2)[..., None],
        "b_y": lambda t, x, y, u: np.full(np.shape(y)[:-1] + (1, 1), abar),
        "sigma_x": _zero_sigma_partial,
        "sigma_y": _zero_sigma_partial,
        "f_x": lambda t, x, y, u: x + 0.0 * u[..., :1],
        "f_y": lambda t, x, y, u: np.zeros(np.shape(y)[:-1] + (1,)),
        "h_x": lambda x, y: w * x,
        "h_y": lambda x, y: np.zeros(np.shape(y)[:-1] + (1,)),
    }
    params = dict(a=a, abar=abar, c=c, sigma=float(sigma), r=r, terminal_weight=w,
                  phi=float(phi), cubic=cubic, u_max=float(u_max), n_controls=int(n_controls),
                  horizon=float(horizon), x0=float(x0))
    return ProblemSpec(
        name="lq", state_dim=1, noise_dim=1, control_dim=1, singular_dim=1,
        horizon=float(horizon), x0=np.array([x0], dtype=float),
        drift=drift, diffusion=_const_diffusion(sigma),
        singular_gain=_scalar_const(1.0), running_cost=running_cost,
        terminal_cost=terminal_cost, singular_cost=_scalar_const(phi, (1,)),
        control_set=np.linspace(-u_max, u_max, int(n_controls))[:, None],
        derivatives=derivatives, params=params,
    )


def builtin_oscillating(horizon: float = 1.0, x0: float = 0.0) -> ProblemSpec:
    """Drift ``u`` with controls in {-1, 1}, no noise, cost the integral of x^2.

    Strict controls cannot reach the infimum 0; the relaxed half-half mixture
    does.
    """

    def drift(t, x, y, u):
        return u + 0.0 * x + 0.0 * y

    def running_cost(t, x, y, u):
        return x[..., 0] ** 2 + 0.0 * u[..., 0]

    def terminal_cost(x, y):
        return 0.0 * x[..., 0] + 0.0 * y[..., 0]

    def zero_matrix(t, x, y, u):
        batch = np.broadcast_shapes(np.shape(x)[:-1], np.shape(y)[:-1], np.shape(u)[:-1])
        return np.zeros(batch + (1, 1))

    derivatives = {
        "b_x": zero_matrix,
        "b_y": zero_matrix,
        "sigma_x": _zero_sigma_partial,
        "sigma_y": _zero_sigma_partial,
        "f_x": lambda t, x, y, u: 2.0 * x,
        "f_y": lambda t, x, y, u: np.zeros(np.shape(y)[:-1] + (1,)),
        "h_x": lambda x, y: np.zeros(np.shape(x)[:-1] + (1,)),
        "h_y": lambda x, y: np.zeros(np.shape(y)[:-1] + (1,)),
    }
    return ProblemSpec(
        name="oscillating", state_dim=1, noise_dim=1, control_dim=1, singular_dim=1,
        horizon=float(horizon), x0=np.array([x0], dtype=float),
        drift=drift, diffusion=_const_diffusion(0.0),
        singular_gain=_scalar_const(0.0), running_cost=running_cost,
        terminal_cost=terminal_cost, singular_cost=_scalar_const(0.0, (1,)),
        control_set=np.array([[-1.0], [1.0]]),
        derivatives=derivatives, params=dict(horizon=float(horizon), x0=float(x0)),
    )


def builtin_singular(sigma: float = 0.1, gain: float = -1.0, phi: float = 0.5,
                     horizon: float = 1.0, x0: float = 2.0) -> ProblemSpec:
    """Driftless state with running cost x^2 that a singular push can lower."""

    def drift(t, x, y, u):
        batch = np.broadcast_shapes(np.shape(x)[:-1], np.shape(y)[:-1], np.shape(u)[:-1])
        return np.zeros(batch + (1,))

    def running_cost(t, x, y, u):
        return x[..., 0] ** 2 + 0.0 * u[..., 0]

    def terminal_cost(x, y):
        return 0.0 * x[..., 0] + 0.0 * y[..., 0]

    def zero_matrix(t, x, y, u):
        batch = np.broadcast_shapes(np.shape(x)[:-1], np.shape(y)[:-1], np.shape(u)[:-1])
        return np.zeros(batch + (1, 1))

    derivatives = {
        "b_x": zero_matrix,
        "b_y": zero_matrix,
        "sigma_x": _zero_sigma_partial,
        "sigma_y": _zero_sigma_partial,
        "f_x": lambda t, x, y, u: 2.0 * x,
        "f_y": lambda t, x, y, u: np.zeros(np.shape(y)[:-1] + (1,)),
        "h_x": lambda x, y: np.zeros(np.shape(x)[:-1] + (1,)),
        "h_y": lambda x, y: np.zeros(np.shape(y)[:-1] + (1,)),
    }
    return ProblemSpec(
        name="singular", state_dim=1, noise_dim=1, control_dim=1, singular_dim=1,
        horizon=float(horizon), x0=np.array([x0], dtype=float),
        drift=drift, diffusion=_const_diffusion(sigma),
        singular_gain=_scalar_const(gain), running_cost=running_cost,
        terminal_cost=terminal_cost, singular_cost=_scalar_const(phi, (1,)),
        control_set=np.array([[0.0]]),
        derivatives=derivatives,
        params=dict(sigma=float(sigma), gain=float(gain), phi=float(phi),
                    horizon=float(horizon), x0=float(x0)),
    )


BUILTINS: dict[str, Callable[..., ProblemSpec]] = {
    "lq": builtin_lq,
    "oscillating": builtin_oscillating,
    "singular": builtin_singular,
}


def get_builtin(name: str, **overrides) -> ProblemSpec:
    try:
        builder = BUILTINS[name]
    except KeyError:
        raise ConfigError(f"unknown builtin problem {name!r}; choose from {sorted(BUILTINS)}") from None
    try:
        return builder(**overrides)
    except TypeError as exc:
        raise ConfigError(f"bad override for builtin {name!r}: {exc}") from None


def problem_from_dict(doc: Mapping) -> ProblemSpec:
    """Build a spec from ``{"builtin": name, "overrides": {...}}``."""
    if not isinstance(doc, Mapping) or "builtin" not in doc:
        raise ConfigError("problem document needs a 'builtin' key")
    overrides = doc.get("overrides", {}) or {}
    if not isinstance(overrides, Mapping):
        raise ConfigError("'overrides' must be an object")
    for key, val in overrides.items():
        if isinstance(val, bool) or not isinstance(val, (int, float)):
            raise ConfigError(f"override {key!r} must be numeric")
    return get_builtin(str(doc["builtin"]), **overrides)


def load_problem(path: str | Path) -> ProblemSpec:
    """Load a problem JSON document from disk."""
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    return problem_from_dict(doc)


def scale_costs(spec: ProblemSpec, factor: float) -> ProblemSpec:
    """Multiply f, h and phi (and their partials) by a positive constant."""
    if not factor > 0:
        raise ValueError("factor must be positive")
    k = float(factor)
    f, h, phi = spec.running_cost, spec.terminal_cost, spec.singular_cost
    derivs = dict(spec.derivatives)
    for name in ("f_x", "f_y", "h_x", "h_y"):
        if name in derivs:
            derivs[name] = (lambda g: (lambda *a: k * np.asarray(g(*a), dtype=float)))(derivs[name])
    params = dict(spec.params)
    params["cost_scale"] = params.get("cost_scale", 1.0) * k
    return replace(
        spec,
        name=f"{spec.name}~scaled",
        running_cost=lambda t, x, y, u: k * np.asarray(f(t, x, y, u), dtype=float),
        terminal_cost=lambda x, y: k * np.asarray(h(x, y), dtype=float),
        singular_cost=lambda t: k * np.asarray(phi(t), dtype=float),
        derivatives=derivs,
        params=params,
    )
