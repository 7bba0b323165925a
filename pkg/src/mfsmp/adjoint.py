"""Backward solver for the linear mean-field adjoint equation, plus an LQ oracle.

Conditional expectations are least-squares projections on polynomials of the
standardized state at each knot.  The mean-field terms are plain particle
averages, which is exact here because the driver is linear in (P, Z).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations_with_replacement

import numpy as np

from .errors import GridMismatchError, NotLQError, RegressionError
from .forward import EnsemblePath, SimConfig, simulate, simulate_relaxed
from .paths import RelaxedControlPath, SingularControlPath, StrictControlPath, TimeGrid, chattering
from .problem import ProblemSpec
from .tables import Table

COST_SIGNS = {"standard": 1.0, "flipped": -1.0}


@dataclass(frozen=True)
class AdjointPath:
    """Adjoint state ``P`` (N, L+1, n) and martingale integrand ``Z`` (N, L, n, d)."""

    grid: TimeGrid
    P: np.ndarray = field(repr=False)
    Z: np.ndarray = field(repr=False)
    noise_seed: int
    cost_sign: str = "standard"

    @property
    def sup_sq_P(self) -> float:
        return float(np.mean(np.max(np.sum(self.P ** 2, axis=2), axis=1)))

    @property
    def int_sq_Z(self) -> float:
        return float(np.mean(np.sum(self.Z ** 2, axis=(2, 3)).sum(axis=1) * self.grid.dt))

    def summary_table(self) -> Table:
        n = self.P.shape[2]
        tab = Table(["t"] + [f"mean_P{i}" for i in range(n)] + ["mean_sq_Z"])
        zsq = np.concatenate([np.mean(np.sum(self.Z ** 2, axis=(2, 3)), axis=0), [np.nan]])
        for j, t in enumerate(self.grid.knots):
            tab.add(float(t), *self.P[:, j, :].mean(axis=0).tolist(), float(zsq[j]))
        return tab


# -- regression -----------------------------------------------------------------


def _monomial_exponents(n: int, degree: int) -> list:
    exps = []
    for deg in range(1, degree + 1):
        for combo in combinations_with_replacement(range(n), deg):
            e = np.zeros(n, dtype=int)
            for c in combo:
                e[c] += 1
            exps.append(e)
    return exps


class _Projector:
    """Least-squares projection onto polynomials in the standardized state.

    Dimensions with (numerically) zero spread are dropped; if all are dropped
    the projection reduces to the particle mean.
    """

    def __init__(self, x: np.ndarray, degree: int):
        N = x.shape[0]
        mu = x.mean(axis=0)
        sd = x.std(axis=0)
        live = sd > 1e-12 * (1.0 + np.abs(mu))
        cols = [np.ones(N)]
        if np.any(live):
            z = (x[:, live] - mu[live]) / sd[live]
            for e in _monomial_exponents(int(live.sum()), degree):
                cols.append(np.prod(z ** e, axis=1))
        basis = np.stack(cols, axis=1)
        if basis.shape[1] > N:
            raise RegressionError(
                f"regression needs {basis.shape[1]} basis functions but only {N} particles; "
                "lower basis_degree or add particles")
        q, r = np.linalg.qr(basis)
        diag = np.abs(np.diag(r))
        if np.any(diag <= 1e-10 * max(diag.max(), 1.0) * np.sqrt(N)):
            raise RegressionError("regression basis is rank deficient; lower basis_degree or add particles")
        self.q = q

    def __call__(self, target: np.ndarray) -> np.ndarray:
        flat = target.reshape(target.shape[0], -1)
        fitted = self.q @ (self.q.T @ flat)
        return fitted.reshape(target.shape)


# -- coefficient evaluation along an ensemble ------------------------------------


def _control_terms(control):
    """Per-step list of (weight, control point) pairs over the support."""
    if isinstance(control, RelaxedControlPath):
        out = []
        for w in control.weights:
            out.append([(float(w[a]), control.control_set[a]) for a in np.flatnonzero(w)])
        return out
    return [[(1.0, v)] for v in control.values]


def _averaged(spec, name, t, x, ybar, terms):
    acc = None
    for w, a in terms:
        val = spec.partial(name, t, x, ybar, a)
        val = val if w == 1.0 else w * val
        acc = val if acc is None else acc + val
    return acc


def solve_adjoint(spec: ProblemSpec, ens: EnsemblePath, control, basis_degree: int = 2,
                  cost_sign: str = "standard") -> AdjointPath:
    """Backward least-squares Monte-Carlo solution along a frozen ensemble.

    ``cost_sign="standard"`` puts ``+ (f_x + E[f_y])`` in the driver, the sign
    under which the duality identity with the second variation holds;
    ``"flipped"`` flips it.
    """
    if basis_degree < 1:
        raise ValueError("basis_degree must be >= 1")
    if cost_sign not in COST_SIGNS:
        raise ValueError(f"cost_sign must be one of {sorted(COST_SIGNS)}")
    if control.grid != ens.grid:
        raise GridMismatchError("control and ensemble grids differ")
    sgn = COST_SIGNS[cost_sign]
    g = ens.grid
    N, L, n, d = ens.particles, g.steps, spec.state_dim, spec.noise_dim
    dt = g.dt
    terms = _control_terms(control)
    X, Xbar, dW = ens.states, ens.empirical_mean, ens.increments

    P = np.empty((N, L + 1, n))
    Z = np.empty((N, L, n, d))
    xT, yT = X[:, L, :], Xbar[L]
    P[:, L, :] = spec.partial("h_x", xT, yT) + spec.partial("h_y", xT, yT).mean(axis=0)

    for j in range(L - 1, -1, -1):
        t = float(g.knots[j])
        x, ybar = X[:, j, :], Xbar[j]
        proj = _Projector(x, basis_degree)
        p_next = P[:, j + 1, :]
        # subtracting the fitted mean is a zero-mean control variate: Z is exactly 0 for deterministic P
        z = proj((p_next - proj(p_next))[:, :, None] * dW[:, j, None, :] / dt)
        Z[:, j] = z

        bx = _averaged(spec, "b_x", t, x, ybar, terms[j])
        by = _averaged(spec, "b_y", t, x, ybar, terms[j])
        fx = _averaged(spec, "f_x", t, x, ybar, terms[j])
        fy = _averaged(spec, "f_y", t, x, ybar, terms[j])
        sx = spec.partial("sigma_x", t, x, ybar)
        sy = spec.partial("sigma_y", t, x, ybar)
        drive = (np.einsum("ikl,ik->il", bx, p_next)
                 + np.einsum("ikl,ik->il", by, p_next).mean(axis=0)
                 + np.einsum("ikrl,ikr->il", sx, z)
                 + np.einsum("ikrl,ikr->il", sy, z).mean(axis=0)
                 + sgn * (fx + fy.mean(axis=0)))
        P[:, j] = proj(p_next + dt * drive)
    return AdjointPath(g, P, Z, ens.noise_seed, cost_sign)


# -- LQ oracle ------------------------------------------------------------------


@dataclass(frozen=True)
class LQOracle:
    """Deterministic solution of the scalar LQ mean-field problem.

    With open-loop (deterministic) controls the optimal control is
    ``u*(t) = -(c/r) Pi(t) m(t)`` where ``Pi = K + kbar`` solves the Riccati
    equation of the mean and ``K`` solves the fluctuation (Lyapunov) equation.
    The adjoint along the optimum is ``P = K X + kbar E[X]``.
    """

    t: np.ndarray
    K_values: np.ndarray
    kbar_values: np.ndarray
    mean_values: np.ndarray
    var_values: np.ndarray
    params: dict
    cost: float

    @property
    def Pi_values(self) -> np.ndarray:
        return self.K_values + self.kbar_values

    @property
    def control_values(self) -> np.ndarray:
        p = self.params
        return -(p["c"] / p["r"]) * self.Pi_values * self.mean_values

    def K(self, t):
        return np.interp(t, self.t, self.K_values)

    def kbar(self, t):
        return np.interp(t, self.t, self.kbar_values)

    def Pi(self, t):
        return np.interp(t, self.t, self.Pi_values)

    def mean(self, t):
        return np.interp(t, self.t, self.mean_values)

    def feedback_gain(self, t):
        """Gain on the mean: ``u*(t) = feedback_gain(t) * E[X(t)]``."""
        p = self.params
        return -(p["c"] / p["r"]) * self.Pi(t)

    def ubar(self, t):
        return np.interp(t, self.t, self.control_values)

    def control_path(self, grid: TimeGrid, control_set) -> StrictControlPath:
        """Optimal control at each left knot, projected to the nearest control point."""
        cs = np.asarray(control_set, dtype=float).reshape(-1, 1)
        target = self.ubar(grid.left)
        idx = np.argmin(np.abs(target[:, None] - cs[None, :, 0]), axis=1)
        return StrictControlPath.from_indices(grid, cs, idx)


def _rk4(fun, y0: float, t: np.ndarray) -> np.ndarray:
    out = np.empty_like(t)
    out[0] = y = y0
    for i in range(len(t) - 1):
        h = t[i + 1] - t[i]
        k1 = fun(t[i], y)
        k2 = fun(t[i] + h / 2, y + h * k1 / 2)
        k3 = fun(t[i] + h / 2, y + h * k2 / 2)
        k4 = fun(t[i + 1], y + h * k3)
        y = y + h * (k1 + 2 * k2 + 2 * k3 + k4) / 6
        out[i + 1] = y
    return out


def lq_params(spec: ProblemSpec) -> dict:
    if spec.name != "lq":
        raise NotLQError(f"spec {spec.name!r} is not the scalar LQ benchmark")
    p = spec.params
    if p.get("cubic", 0.0) != 0.0:
        raise NotLQError("cubic drift term present; the problem is not linear-quadratic")
    return dict(p)


def lq_oracle(spec: ProblemSpec, steps: int = 4096) -> LQOracle:
    """Integrate the Riccati, Lyapunov, mean and variance ODEs with RK4."""
    p = lq_params(spec)
    a, abar, c, r, w, sig = p["a"], p["abar"], p["c"], p["r"], p["terminal_weight"], p["sigma"]
    T, x0 = p["horizon"], p["x0"]
    s = c * c / r
    t = np.linspace(0.0, T, steps + 1)
    back = t[::-1]
    K = _rk4(lambda _, k: -2.0 * a * k - 1.0, w, back)[::-1]
    Pi = _rk4(lambda _, q: -2.0 * (a + abar) * q + s * q * q - 1.0, w, back)[::-1]

    dPi = -2.0 * (a + abar) * Pi + s * Pi ** 2 - 1.0
    h = t[1] - t[0]
    # cubic Hermite midpoint of Pi keeps the forward sweep fourth order
    Pi_mid = 0.5 * (Pi[:-1] + Pi[1:]) + h / 8.0 * (dPi[:-1] - dPi[1:])

    m = np.empty_like(t)
    m[0] = x0
    for i in range(steps):
        coef0 = a + abar - s * Pi[i]
        coefm = a + abar - s * Pi_mid[i]
        coef1 = a + abar - s * Pi[i + 1]
        y = m[i]
        k1 = coef0 * y
        k2 = coefm * (y + h * k1 / 2)
        k3 = coefm * (y + h * k2 / 2)
        k4 = coef1 * (y + h * k3)
        m[i + 1] = y + h * (k1 + 2 * k2 + 2 * k3 + k4) / 6
    V = _rk4(lambda _, v: 2.0 * a * v + sig * sig, 0.0, t)

    u = -(c / r) * Pi * m
    integrand = 0.5 * (m ** 2 + V + r * u ** 2)
    running = h / 3.0 * (integrand[0] + integrand[-1] + 4 * integrand[1:-1:2].sum() + 2 * integrand[2:-1:2].sum())
    total = running + 0.5 * w * (m[-1] ** 2 + V[-1])
    return LQOracle(t, K, Pi - K, m, V, p, float(total))


# -- stability study ------------------------------------------------------------


def adjoint_stability(spec: ProblemSpec, q: RelaxedControlPath, eta: SingularControlPath,
                      cfg: SimConfig, ns, grid: TimeGrid | None = None, basis_degree: int = 2,
                      seed: int = 0) -> Table:
    """Adjoint gaps between chattered strict and relaxed controls, common noise."""
    grid = grid or eta.grid
    eta_g = eta.resample(grid)
    qg = q.resample(grid)
    rel_ens = simulate_relaxed(spec, qg, eta_g, cfg)
    rel = solve_adjoint(spec, rel_ens, qg, basis_degree)
    tab = Table(["n", "sup_sq_P_gap", "int_sq_Z_gap"])
    for n in ns:
        un = chattering(q, n, seed).resample(grid)
        ens = simulate(spec, un, eta_g, cfg)
        adj = solve_adjoint(spec, ens, un, basis_degree)
        dp = np.max(np.sum((adj.P - rel.P) ** 2, axis=2), axis=1).mean()
        dz = (np.sum((adj.Z - rel.Z) ** 2, axis=(2, 3)).sum(axis=1) * grid.dt).mean()
        tab.add(int(n), float(dp), float(dz))
    return tab
