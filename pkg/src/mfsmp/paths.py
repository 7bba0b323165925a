"""Time grids, control paths, perturbations and path metrics.

All paths are piecewise constant on a :class:`TimeGrid` with the left-point
convention: ``values[j]`` acts on ``[t_j, t_{j+1})``.  Singular paths carry
one nonnegative increment per interval plus a separate jump at ``0+``; the
increment of interval ``j`` is applied at ``t_j``.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ControlSetError, GridMismatchError, SpikeUnresolvableError

WEIGHT_SUM_TOL = 1e-12
_MEMBER_TOL = 1e-9


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``0 = t_0 < ... < t_L = T``."""

    horizon: float
    steps: int
    knots: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")
        if int(self.steps) != self.steps or self.steps < 1:
            raise ValueError("steps must be a positive integer")
        object.__setattr__(self, "horizon", float(self.horizon))
        object.__setattr__(self, "steps", int(self.steps))
        knots = np.linspace(0.0, self.horizon, self.steps + 1)
        knots.setflags(write=False)
        object.__setattr__(self, "knots", knots)

    @property
    def dt(self) -> float:
        return self.horizon / self.steps

    @property
    def left(self) -> np.ndarray:
        return self.knots[:-1]

    def refine(self, factor: int) -> "TimeGrid":
        return TimeGrid(self.horizon, self.steps * int(factor))


def _check_grid(a: TimeGrid, b: TimeGrid) -> None:
    if a != b:
        raise GridMismatchError(f"grids differ: {a} vs {b}")


def _as_points(control_set) -> np.ndarray:
    cs = np.asarray(control_set, dtype=float)
    return cs[:, None] if cs.ndim == 1 else cs


def control_indices(values: np.ndarray, control_set: np.ndarray) -> np.ndarray:
    """Index of each row of ``values`` in ``control_set`` (exact up to 1e-9)."""
    dist = np.max(np.abs(values[:, None, :] - control_set[None, :, :]), axis=2)
    idx = np.argmin(dist, axis=1)
    bad = dist[np.arange(len(values)), idx] > _MEMBER_TOL
    if np.any(bad):
        j = int(np.flatnonzero(bad)[0])
        raise ControlSetError(f"control value {values[j].tolist()} on interval {j} is not in the control set")
    return idx


def _interval_overlap(grid: TimeGrid, a: float, b: float) -> np.ndarray:
    lo = np.maximum(grid.left, a)
    hi = np.minimum(grid.knots[1:], b)
    return np.clip(hi - lo, 0.0, None)


def _resample_matrix(src: TimeGrid, dst: TimeGrid) -> np.ndarray:
    """Rows: dst intervals, cols: src intervals, entries: overlap fraction of dst."""
    if abs(src.horizon - dst.horizon) > 1e-12 * src.horizon:
        raise GridMismatchError("cannot resample between different horizons")
    out = np.zeros((dst.steps, src.steps))
    for j in range(dst.steps):
        out[j] = _interval_overlap(src, dst.knots[j], dst.knots[j + 1]) / dst.dt
    return out


# -- strict ---------------------------------------------------------------------


@dataclass(frozen=True)
class StrictControlPath:
    """Piecewise-constant strict control taking values in a finite control set."""

    grid: TimeGrid
    values: np.ndarray
    control_set: np.ndarray

    def __post_init__(self):
        cs = _as_points(self.control_set)
        vals = np.asarray(self.values, dtype=float)
        if vals.ndim == 1:
            vals = vals[:, None]
        if vals.shape != (self.grid.steps, cs.shape[1]):
            raise ValueError(f"values must have shape ({self.grid.steps}, {cs.shape[1]}), got {vals.shape}")
        idx = control_indices(vals, cs)
        # snap to the exact control points so downstream evaluation is bitwise stable
        vals = cs[idx].copy()
        for arr in (vals, idx):
            arr.setflags(write=False)
        cs = cs.copy()
        cs.setflags(write=False)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "control_set", cs)
        object.__setattr__(self, "_indices", idx)

    @property
    def indices(self) -> np.ndarray:
        return self._indices

    @classmethod
    def constant(cls, grid: TimeGrid, control_set, value) -> "StrictControlPath":
        cs = _as_points(control_set)
        val = np.broadcast_to(np.asarray(value, dtype=float).reshape(1, -1), (grid.steps, cs.shape[1]))
        return cls(grid, val, cs)

    @classmethod
    def from_indices(cls, grid: TimeGrid, control_set, indices) -> "StrictControlPath":
        cs = _as_points(control_set)
        return cls(grid, cs[np.asarray(indices, dtype=int)], cs)

    def resample(self, grid: TimeGrid) -> "StrictControlPath":
        """Value at each new interval's left endpoint (exact for refinements)."""
        if grid == self.grid:
            return self
        # small inward shift guards against round-off at shared knots
        pos = np.searchsorted(self.grid.knots, grid.left + 1e-9 * grid.dt, side="right") - 1
        pos = np.clip(pos, 0, self.grid.steps - 1)
        return StrictControlPath(grid, self.values[pos], self.control_set)

    def __eq__(self, other):
        return (isinstance(other, StrictControlPath) and self.grid == other.grid
                and np.array_equal(self.values, other.values)
                and np.array_equal(self.control_set, other.control_set))

    __hash__ = None


# -- singular -------------------------------------------------------------------


@dataclass(frozen=True)
class SingularControlPath:
    """Nondecreasing singular control: jump at 0+ plus per-interval increments."""

    grid: TimeGrid
    increments: np.ndarray
    jump0: np.ndarray

    def __post_init__(self):
        inc = np.array(self.increments, dtype=float)
        if inc.ndim == 1:
            inc = inc[:, None]
        jump = np.array(self.jump0, dtype=float).reshape(-1)
        if inc.shape[0] != self.grid.steps or inc.shape[1] != jump.shape[0]:
            raise ValueError(f"increments must have shape ({self.grid.steps}, m) matching jump0 of length m")
        if not (np.all(np.isfinite(inc)) and np.all(np.isfinite(jump))):
            raise ValueError("singular control increments must be finite")
        if np.any(inc < 0) or np.any(jump < 0):
            raise ValueError("singular control must be nondecreasing (negative increment found)")
        inc.setflags(write=False)
        jump.setflags(write=False)
        object.__setattr__(self, "increments", inc)
        object.__setattr__(self, "jump0", jump)

    @property
    def dim(self) -> int:
        return self.jump0.shape[0]

    @classmethod
    def zero(cls, grid: TimeGrid, m: int = 1) -> "SingularControlPath":
        return cls(grid, np.zeros((grid.steps, m)), np.zeros(m))

    @classmethod
    def jump_at_zero(cls, grid: TimeGrid, size) -> "SingularControlPath":
        size = np.atleast_1d(np.asarray(size, dtype=float))
        return cls(grid, np.zeros((grid.steps, size.shape[0])), size)

    def knot_values(self) -> np.ndarray:
        """``eta`` just after 0 and after each interval's increment, shape (L+2, m).

        Row 0 is ``eta(0) = 0``, row 1 is ``eta(0+)``, row ``j+2`` is the value
        once the increment of interval ``j`` has been applied.
        """
        steps = np.vstack([np.zeros((1, self.dim)), self.jump0[None, :], self.increments])
        return np.cumsum(steps, axis=0)

    @property
    def total(self) -> np.ndarray:
        return self.jump0 + self.increments.sum(axis=0)

    def resample(self, grid: TimeGrid) -> "SingularControlPath":
        """Move each increment to the new interval containing its application time."""
        if grid == self.grid:
            return self
        pos = np.searchsorted(grid.knots, self.grid.left + 1e-9 * self.grid.dt, side="right") - 1
        pos = np.clip(pos, 0, grid.steps - 1)
        inc = np.zeros((grid.steps, self.dim))
        np.add.at(inc, pos, self.increments)
        return SingularControlPath(grid, inc, self.jump0)

    def __eq__(self, other):
        return (isinstance(other, SingularControlPath) and self.grid == other.grid
                and np.array_equal(self.increments, other.increments)
                and np.array_equal(self.jump0, other.jump0))

    __hash__ = None


# -- relaxed --------------------------------------------------------------------


@dataclass(frozen=True)
class RelaxedControlPath:
    """Per-interval probability weights over a finite control set."""

    grid: TimeGrid
    weights: np.ndarray
    control_set: np.ndarray

    def __post_init__(self):
        cs = _as_points(self.control_set).copy()
        w = np.array(self.weights, dtype=float)
        if w.shape != (self.grid.steps, cs.shape[0]):
            raise ValueError(f"weights must have shape ({self.grid.steps}, {cs.shape[0]}), got {w.shape}")
        if not np.all(np.isfinite(w)) or np.any(w < 0):
            raise ValueError("weights must be finite and nonnegative")
        dev = np.abs(w.sum(axis=1) - 1.0)
        if np.any(dev > WEIGHT_SUM_TOL):
            raise ValueError(f"weight rows must sum to 1 (worst deviation {dev.max():.3e})")
        w.setflags(write=False)
        cs.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "control_set", cs)

    @classmethod
    def uniform_over(cls, grid: TimeGrid, control_set, points) -> "RelaxedControlPath":
        """Equal weight on the listed points of the control set, every interval."""
        cs = _as_points(control_set)
        idx = control_indices(_as_points(points), cs)
        w = np.zeros((grid.steps, cs.shape[0]))
        w[:, idx] = 1.0 / len(idx)
        return cls(grid, w, cs)

    def is_one_hot(self) -> bool:
        return bool(np.all((self.weights == 0.0) | (self.weights == 1.0)))

    def to_strict(self) -> StrictControlPath:
        """One-hot extraction; fails if any interval mixes several points."""
        if not self.is_one_hot():
            raise ValueError("relaxed path is not one-hot")
        return StrictControlPath.from_indices(self.grid, self.control_set, np.argmax(self.weights, axis=1))

    def resample(self, grid: TimeGrid) -> "RelaxedControlPath":
        """Time-average weights over each new interval."""
        if grid == self.grid:
            return self
        w = _resample_matrix(self.grid, grid) @ self.weights
        w /= w.sum(axis=1, keepdims=True)
        return RelaxedControlPath(grid, w, self.control_set)

    def __eq__(self, other):
        return (isinstance(other, RelaxedControlPath) and self.grid == other.grid
                and np.array_equal(self.weights, other.weights)
                and np.array_equal(self.control_set, other.control_set))

    __hash__ = None


# -- perturbations --------------------------------------------------------------


@dataclass(frozen=True)
class PerturbationParams:
    tau: float
    epsilon: float
    v: np.ndarray | float | None = None
    alpha: float = 0.0

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.tau < 0:
            raise ValueError("tau must be nonnegative")


def spike_variation(u: StrictControlPath, p: PerturbationParams) -> StrictControlPath:
    """Replace ``u`` by ``p.v`` on intervals whose left endpoint lies in [tau, tau+eps)."""
    grid = u.grid
    T = grid.horizon
    slack = 1e-9 * T
    if p.tau + p.epsilon > T + slack:
        raise ValueError(f"spike window [{p.tau}, {p.tau + p.epsilon}] exceeds the horizon {T}")
    if p.epsilon < grid.dt - slack:
        raise SpikeUnresolvableError(
            f"spike unresolvable on grid: epsilon={p.epsilon} is below the step {grid.dt}")
    v = np.asarray(p.v, dtype=float).reshape(1, -1)
    control_indices(v, u.control_set)
    left = grid.left
    mask = (left >= p.tau - slack) & (left < p.tau + p.epsilon - slack)
    vals = np.array(u.values)
    vals[mask] = v
    return StrictControlPath(grid, vals, u.control_set)


def convex_perturbation(eta: SingularControlPath, xi: SingularControlPath, alpha: float) -> SingularControlPath:
    """``eta + alpha (xi - eta)``, increment by increment."""
    _check_grid(eta.grid, xi.grid)
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    if eta.dim != xi.dim:
        raise GridMismatchError("singular dimensions differ")
    if alpha == 0.0:
        return eta
    if alpha == 1.0:
        return xi
    inc = (1.0 - alpha) * eta.increments + alpha * xi.increments
    jump = (1.0 - alpha) * eta.jump0 + alpha * xi.jump0
    return SingularControlPath(eta.grid, inc, jump)


def embed_strict(u: StrictControlPath) -> RelaxedControlPath:
    """Dirac weights at the strict control's value on each interval."""
    w = np.zeros((u.grid.steps, u.control_set.shape[0]))
    w[np.arange(u.grid.steps), u.indices] = 1.0
    return RelaxedControlPath(u.grid, w, u.control_set)


def apportion(weights: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """Largest-remainder integer counts summing to ``n``; ties broken by ``rng``."""
    quota = weights * n
    counts = np.floor(quota + 1e-12).astype(int)
    short = n - counts.sum()
    if short > 0:
        rem = quota - counts
        jitter = rng.random(len(weights))
        order = np.lexsort((jitter, -rem))
        counts[order[:short]] += 1
    return counts


def _round_robin(counts: np.ndarray, weights: np.ndarray, jitter: np.ndarray) -> list:
    """Interleave control indices, heavier weights first within each round."""
    rank = np.lexsort((jitter, -weights))
    left = counts.copy()
    seq = []
    while left.sum() > 0:
        for a in rank:
            if left[a] > 0:
                seq.append(int(a))
                left[a] -= 1
    return seq


def chattering(q: RelaxedControlPath, n: int, seed: int = 0) -> StrictControlPath:
    """Strict path on ``n`` micro-intervals per interval matching the occupation weights."""
    if int(n) != n or n < 1:
        raise ValueError("n must be a positive integer")
    n = int(n)
    rng = np.random.default_rng(seed)
    fine = q.grid.refine(n)
    idx = np.empty(fine.steps, dtype=int)
    for j, w in enumerate(q.weights):
        counts = apportion(w, n, rng)
        jitter = rng.random(len(w))
        idx[j * n:(j + 1) * n] = _round_robin(counts, w, jitter)
    return StrictControlPath.from_indices(fine, q.control_set, idx)


def weak_distance(q1: RelaxedControlPath, q2: RelaxedControlPath, grid_coarsening: int = 1) -> float:
    """Max over time windows of the TV distance between window-averaged weights.

    Windows are blocks of ``grid_coarsening`` intervals of the coarser of the
    two grids.  Averages are exact overlap integrals, so paths on different
    grids can be compared.
    """
    if q1.control_set.shape != q2.control_set.shape or not np.allclose(q1.control_set, q2.control_set):
        raise ValueError("relaxed paths use different control sets")
    if abs(q1.grid.horizon - q2.grid.horizon) > 1e-12 * q1.grid.horizon:
        raise GridMismatchError("horizons differ")
    coarse = q1.grid if q1.grid.steps <= q2.grid.steps else q2.grid
    k = max(1, int(grid_coarsening))
    edges = list(coarse.knots[::k])
    if edges[-1] < coarse.horizon:
        edges.append(coarse.horizon)
    worst = 0.0
    for a, b in zip(edges[:-1], edges[1:]):
        m1 = _interval_overlap(q1.grid, a, b) @ q1.weights / (b - a)
        m2 = _interval_overlap(q2.grid, a, b) @ q2.weights / (b - a)
        worst = max(worst, 0.5 * float(np.abs(m1 - m2).sum()))
    return worst


def metric_d1(u: StrictControlPath, v: StrictControlPath) -> float:
    """Fraction of [0, T] on which the two controls differ."""
    _check_grid(u.grid, v.grid)
    differ = np.any(u.values != v.values, axis=1)
    return float(differ.sum() * u.grid.dt / u.grid.horizon)


def metric_d2(eta: SingularControlPath, xi: SingularControlPath) -> float:
    """Sup over knots of the Euclidean distance between the two cumulative paths."""
    _check_grid(eta.grid, xi.grid)
    diff = eta.knot_values() - xi.knot_values()
    return float(np.max(np.linalg.norm(diff, axis=1)))


def metric_d(u: StrictControlPath, eta: SingularControlPath,
             v: StrictControlPath, xi: SingularControlPath) -> float:
    return metric_d1(u, v) + metric_d2(eta, xi)


# -- serialization --------------------------------------------------------------


def _csv_text(rows) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


def _num(x: float) -> str:
    return repr(float(x))


def path_to_csv(path) -> str:
    """CSV with one row per interval: ``t_left, t_right, components...``.

    Singular paths add a leading ``0,0,jump...`` row for the jump at 0+;
    relaxed paths start with a header row listing the control points.
    """
    g = path.grid
    rows = []
    if isinstance(path, StrictControlPath):
        rows.append(["t_left", "t_right"] + [f"u{i}" for i in range(path.values.shape[1])])
        body = path.values
    elif isinstance(path, SingularControlPath):
        rows.append(["t_left", "t_right"] + [f"d_eta{i}" for i in range(path.dim)])
        rows.append(["0.0", "0.0"] + [_num(v) for v in path.jump0])
        body = path.increments
    elif isinstance(path, RelaxedControlPath):
        rows.append(["t_left", "t_right"] + [";".join(_num(c) for c in pt) for pt in path.control_set])
        body = path.weights
    else:
        raise TypeError(f"cannot serialize {type(path).__name__}")
    for j in range(g.steps):
        rows.append([_num(g.knots[j]), _num(g.knots[j + 1])] + [_num(v) for v in body[j]])
    return _csv_text(rows)


def _parse_csv(text: str):
    rows = [r for r in csv.reader(io.StringIO(text)) if r]
    return rows[0], rows[1:]


def _grid_from_rows(body) -> TimeGrid:
    t_right = float(body[-1][1])
    return TimeGrid(t_right, len(body))


def strict_from_csv(text: str, control_set) -> StrictControlPath:
    _, body = _parse_csv(text)
    grid = _grid_from_rows(body)
    return StrictControlPath(grid, np.array([[float(v) for v in r[2:]] for r in body]), control_set)


def singular_from_csv(text: str) -> SingularControlPath:
    _, body = _parse_csv(text)
    jump = [float(v) for v in body[0][2:]]
    body = body[1:]
    grid = _grid_from_rows(body)
    return SingularControlPath(grid, np.array([[float(v) for v in r[2:]] for r in body]), jump)


def relaxed_from_csv(text: str) -> RelaxedControlPath:
    header, body = _parse_csv(text)
    cs = np.array([[float(c) for c in h.split(";")] for h in header[2:]])
    grid = _grid_from_rows(body)
    return RelaxedControlPath(grid, np.array([[float(v) for v in r[2:]] for r in body]), cs)


def path_to_json(path) -> str:
    g = {"horizon": path.grid.horizon, "steps": path.grid.steps}
    if isinstance(path, StrictControlPath):
        doc = {"kind": "strict", "grid": g, "control_set": path.control_set.tolist(),
               "values": path.values.tolist()}
    elif isinstance(path, SingularControlPath):
        doc = {"kind": "singular", "grid": g, "jump0": path.jump0.tolist(),
               "increments": path.increments.tolist()}
    elif isinstance(path, RelaxedControlPath):
        doc = {"kind": "relaxed", "grid": g, "control_set": path.control_set.tolist(),
               "weights": path.weights.tolist()}
    else:
        raise TypeError(f"cannot serialize {type(path).__name__}")
    return json.dumps(doc)


def path_from_json(text: str):
    doc = json.loads(text)
    grid = TimeGrid(doc["grid"]["horizon"], doc["grid"]["steps"])
    kind = doc["kind"]
    if kind == "strict":
        return StrictControlPath(grid, np.array(doc["values"]), np.array(doc["control_set"]))
    if kind == "singular":
        return SingularControlPath(grid, np.array(doc["increments"]), np.array(doc["jump0"]))
    if kind == "relaxed":
        return RelaxedControlPath(grid, np.array(doc["weights"]), np.array(doc["control_set"]))
    raise ValueError(f"unknown path kind {kind!r}")


def write_path(path, target: str | Path) -> None:
    target = Path(target)
    text = path_to_json(path) if target.suffix == ".json" else path_to_csv(path)
    target.write_text(text, encoding="utf-8", newline="\n")
