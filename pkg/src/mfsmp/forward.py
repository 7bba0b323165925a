"""Interacting-particle Euler scheme for the controlled mean-field SDE."""

from __future__ import annotations

import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import GridMismatchError, SimulationError
from .noise import derive_seed, step_normals
from .paths import (RelaxedControlPath, SingularControlPath, StrictControlPath, TimeGrid,
                    chattering, convex_perturbation)
from .problem import ProblemSpec
from .tables import Table


def default_workers() -> int:
    raw = os.environ.get("MFSMP_THREADS", "")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


@dataclass(frozen=True)
class SimConfig:
    """Ensemble size, noise seed and parallelism for one simulation."""

    particles: int
    seed: int = 0
    antithetic: bool = False
    workers: int | None = None

    def __post_init__(self):
        if int(self.particles) != self.particles or self.particles < 2:
            raise ValueError("particles must be an integer >= 2")
        if self.workers is not None and self.workers < 1:
            raise ValueError("workers must be >= 1")

    @property
    def n_workers(self) -> int:
        return self.workers if self.workers is not None else default_workers()

    def with_seed(self, seed: int) -> "SimConfig":
        return SimConfig(self.particles, seed, self.antithetic, self.workers)

    def with_particles(self, n: int) -> "SimConfig":
        return SimConfig(n, self.seed, self.antithetic, self.workers)


@dataclass(frozen=True)
class EnsemblePath:
    """Particle trajectories and their empirical mean.

    ``increments[i, j]`` is the Brownian increment particle ``i`` used on
    interval ``j``; variational and adjoint solvers reuse it.
    """

    grid: TimeGrid
    states: np.ndarray
    empirical_mean: np.ndarray
    noise_seed: int
    config: SimConfig
    increments: np.ndarray = field(repr=False)
    control: object = field(default=None, repr=False, compare=False)
    eta: SingularControlPath | None = field(default=None, repr=False, compare=False)

    @property
    def particles(self) -> int:
        return self.states.shape[0]

    def summary_table(self) -> Table:
        std = self.states.std(axis=0, ddof=1)
        cols = ["t"] + [f"mean{i}" for i in range(self.states.shape[2])] + \
               [f"std{i}" for i in range(self.states.shape[2])]
        tab = Table(cols)
        for j, t in enumerate(self.grid.knots):
            tab.add(float(t), *self.empirical_mean[j].tolist(), *std[j].tolist())
        return tab

    def write_binary(self, path: str | Path) -> None:
        """Full trajectories: int64 header (N, L, n) then row-major '<f8' data."""
        N, L1, n = self.states.shape
        with open(path, "wb") as fh:
            fh.write(struct.pack("<qqq", N, L1 - 1, n))
            fh.write(np.ascontiguousarray(self.states, dtype="<f8").tobytes())


def read_binary(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        N, L, n = struct.unpack("<qqq", fh.read(24))
        data = np.frombuffer(fh.read(), dtype="<f8")
    return data.reshape(N, L + 1, n)


@dataclass(frozen=True)
class CostReport:
    total: float
    running: float
    terminal: float
    singular: float
    std_error: float
    per_particle: np.ndarray = field(repr=False, default=None)


def _chunks(n: int, workers: int) -> list:
    edges = np.linspace(0, n, min(workers, n) + 1).astype(int)
    return [(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:]) if b > a]


def _propagate(spec: ProblemSpec, grid: TimeGrid, drift_at: Callable, eta: SingularControlPath,
               cfg: SimConfig, control) -> EnsemblePath:
    if eta.grid != grid:
        raise GridMismatchError("singular control grid differs from the control grid")
    if eta.dim != spec.singular_dim:
        raise ValueError("singular control dimension does not match the problem")
    N, L, n, d = cfg.particles, grid.steps, spec.state_dim, spec.noise_dim
    dt = grid.dt
    sqdt = np.sqrt(dt)
    states = np.empty((N, L + 1, n))
    dW = np.empty((N, L, d))
    states[:, 0, :] = spec.x0 + spec.G(0.0) @ eta.jump0
    means = np.empty((L + 1, n))
    chunks = _chunks(N, cfg.n_workers)

    def advance(j, t, ybar, kick, lo, hi):
        x = states[lo:hi, j, :]
        z = step_normals(cfg.seed, N, j, d, cfg.antithetic, lo, hi) * sqdt
        dW[lo:hi, j, :] = z
        sig = spec.sigma(t, x, ybar)
        states[lo:hi, j + 1, :] = x + drift_at(j, t, x, ybar) * dt + np.einsum("ijk,ik->ij", sig, z) + kick

    pool = ThreadPoolExecutor(max_workers=len(chunks)) if len(chunks) > 1 else None
    try:
        for j in range(L):
            t = float(grid.knots[j])
            # the mean is a barrier: every particle steps with the same value
            ybar = states[:, j, :].mean(axis=0)
            means[j] = ybar
            kick = spec.G(t) @ eta.increments[j]
            if pool is None:
                advance(j, t, ybar, kick, 0, N)
            else:
                list(pool.map(lambda c: advance(j, t, ybar, kick, *c), chunks))
            nxt = states[:, j + 1, :]
            if not np.all(np.isfinite(nxt)):
                bad = int(np.flatnonzero(~np.all(np.isfinite(nxt), axis=1))[0])
                raise SimulationError(bad, j + 1)
    finally:
        if pool is not None:
            pool.shutdown()
    means[L] = states[:, L, :].mean(axis=0)
    return EnsemblePath(grid, states, means, cfg.seed, cfg, dW, control, eta)


def simulate(spec: ProblemSpec, u: StrictControlPath, eta: SingularControlPath, cfg: SimConfig) -> EnsemblePath:
    """Euler-Maruyama particle system under a strict control."""
    values = u.values

    def drift_at(j, t, x, ybar):
        return spec.b(t, x, ybar, values[j])

    return _propagate(spec, u.grid, drift_at, eta, cfg, u)


def relaxed_drift(spec: ProblemSpec, t: float, x, ybar, weights: np.ndarray, control_set: np.ndarray):
    """Weight-averaged drift summed over the support only (one-hot is exact)."""
    acc = None
    for a in np.flatnonzero(weights):
        term = spec.b(t, x, ybar, control_set[a])
        term = term if weights[a] == 1.0 else weights[a] * term
        acc = term if acc is None else acc + term
    return acc


def simulate_relaxed(spec: ProblemSpec, q: RelaxedControlPath, eta: SingularControlPath,
                     cfg: SimConfig) -> EnsemblePath:
    """Particle system with the drift averaged over the relaxed control weights."""
    w, cs = q.weights, q.control_set

    def drift_at(j, t, x, ybar):
        return relaxed_drift(spec, t, x, ybar, w[j], cs)

    return _propagate(spec, q.grid, drift_at, eta, cfg, q)


def simulate_any(spec, control, eta, cfg) -> EnsemblePath:
    if isinstance(control, RelaxedControlPath):
        return simulate_relaxed(spec, control, eta, cfg)
    return simulate(spec, control, eta, cfg)


def _running_integrand(spec, ens, control, j):
    t = float(ens.grid.knots[j])
    x, ybar = ens.states[:, j, :], ens.empirical_mean[j]
    if isinstance(control, RelaxedControlPath):
        w = control.weights[j]
        acc = None
        for a in np.flatnonzero(w):
            term = spec.f(t, x, ybar, control.control_set[a])
            term = term if w[a] == 1.0 else w[a] * term
            acc = term if acc is None else acc + term
        return acc
    return spec.f(t, x, ybar, control.values[j])


def singular_cost(spec: ProblemSpec, eta: SingularControlPath) -> float:
    """Integral of phi against d eta, including the jump at 0+."""
    g = eta.grid
    total = float(spec.phi(0.0) @ eta.jump0)
    for j in range(g.steps):
        if np.any(eta.increments[j]):
            total += float(spec.phi(float(g.knots[j])) @ eta.increments[j])
    return total


def cost(spec: ProblemSpec, ens: EnsemblePath, control, eta: SingularControlPath) -> CostReport:
    """Left-point Monte-Carlo estimate of the cost and its standard error."""
    if control.grid != ens.grid or eta.grid != ens.grid:
        raise GridMismatchError("control, singular path and ensemble must share one grid")
    g = ens.grid
    run = np.zeros(ens.particles)
    for j in range(g.steps):
        run += _running_integrand(spec, ens, control, j) * g.dt
    term = spec.h(ens.states[:, -1, :], ens.empirical_mean[-1])
    sing = singular_cost(spec, eta)
    per = run + term + sing
    running, terminal = float(run.mean()), float(term.mean())
    se = float(per.std(ddof=1) / np.sqrt(ens.particles))
    return CostReport(running + terminal + sing, running, terminal, sing, se, per)


def evaluate(spec, control, eta, cfg) -> tuple:
    """Simulate and cost in one call."""
    ens = simulate_any(spec, control, eta, cfg)
    return ens, cost(spec, ens, control, eta)


# -- studies --------------------------------------------------------------------


def meanfield_convergence(spec: ProblemSpec, u: StrictControlPath, eta: SingularControlPath,
                          particle_counts, reps: int, seed: int, workers: int | None = None) -> Table:
    """Across-replicate spread of the empirical mean at T versus ensemble size.

    ``meta`` carries the least-squares log-log slope, its standard error (from
    the sampling error of a standard deviation, about ``1/sqrt(2(reps-1))`` on
    the log scale) and a two-sided 95% interval.
    """
    counts = [int(n) for n in particle_counts]
    if reps < 2:
        raise ValueError("reps must be >= 2")
    if any(b <= a for a, b in zip(counts, counts[1:])):
        raise ValueError("particle_counts must be increasing")
    tab = Table(["N", "std_mean_T", "mean_T"])
    for N in counts:
        vals = []
        for r in range(reps):
            cfg = SimConfig(N, derive_seed(seed, N, r), workers=workers)
            ens = simulate(spec, u, eta, cfg)
            vals.append(ens.empirical_mean[-1, 0])
        vals = np.array(vals)
        tab.add(N, float(vals.std(ddof=1)), float(vals.mean()))
    sd = tab.column("std_mean_T")
    logn = np.log(np.array(counts, dtype=float))
    if np.all(sd > 0) and len(counts) >= 2:
        slope = float(np.polyfit(logn, np.log(sd), 1)[0])
        se_log = 1.0 / np.sqrt(2.0 * (reps - 1))
        se = float(se_log / np.sqrt(np.sum((logn - logn.mean()) ** 2)))
    else:
        slope, se = float("nan"), float("nan")
    tab.meta.update(slope=slope, slope_se=se, ci_low=slope - 1.96 * se, ci_high=slope + 1.96 * se,
                    reps=reps, seed=seed)
    return tab


def singular_stability(spec: ProblemSpec, u, eta: SingularControlPath, xi: SingularControlPath,
                       cfg: SimConfig, alphas) -> Table:
    """Root-mean-square sup gap between ensembles under eta^alpha and eta."""
    base = simulate_any(spec, u, eta, cfg)
    tab = Table(["alpha", "rms_sup_gap", "gap_over_alpha"])
    for a in alphas:
        ens = simulate_any(spec, u, convex_perturbation(eta, xi, a), cfg)
        sup = np.max(np.linalg.norm(ens.states - base.states, axis=2), axis=1)
        gap = float(np.sqrt(np.mean(sup ** 2)))
        tab.add(float(a), gap, gap / a)
    return tab


def control_stability(spec: ProblemSpec, q: RelaxedControlPath, eta: SingularControlPath,
                      cfg: SimConfig, ns, grid: TimeGrid | None = None, seed: int = 0) -> Table:
    """Gap between chattered strict and relaxed ensembles with common noise.

    The relaxed path is chattered on ``n`` micro-intervals per interval and
    both controls are resampled onto ``grid`` (default: the singular path's
    grid) before simulation.
    """
    grid = grid or eta.grid
    eta_g = eta.resample(grid)
    qg = q.resample(grid)
    rel = simulate_relaxed(spec, qg, eta_g, cfg)
    j_rel = cost(spec, rel, qg, eta_g)
    tab = Table(["n", "rms_sup_gap", "cost_chattered", "cost_relaxed", "cost_gap"])
    for n in ns:
        un = chattering(q, n, seed).resample(grid)
        ens = simulate(spec, un, eta_g, cfg)
        j_n = cost(spec, ens, un, eta_g)
        sup = np.max(np.linalg.norm(ens.states - rel.states, axis=2), axis=1)
        tab.add(int(n), float(np.sqrt(np.mean(sup ** 2))), j_n.total, j_rel.total,
                abs(j_n.total - j_rel.total))
    return tab
