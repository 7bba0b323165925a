"""First and second variational equations and finite-difference lemma checks.

Both variational processes are integrated along a frozen forward ensemble
with the ensemble's own Brownian increments, so differences against a
re-simulated perturbed ensemble share one probability space.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .adjoint import AdjointPath, _averaged, _control_terms
from .errors import GridMismatchError, SeedMismatchError
from .forward import EnsemblePath, SimConfig, cost, simulate, simulate_any, singular_cost
from .paths import (PerturbationParams, SingularControlPath, StrictControlPath, convex_perturbation,
                    spike_variation)
from .problem import ProblemSpec
from .tables import Table


@dataclass(frozen=True)
class VariationPath:
    """Variational process along an ensemble; ``kind`` is "first" or "second".

    For the second variation ``values[:, 0]`` is the value just after 0, i.e.
    ``G(0)`` times the difference of the two jumps at 0+.
    """

    grid: object
    kind: str
    values: np.ndarray = field(repr=False)
    empirical_mean: np.ndarray = field(repr=False)
    noise_seed: int


def _check_ensemble(ens: EnsemblePath, cfg: SimConfig | None, *paths) -> None:
    if cfg is not None and cfg.seed != ens.noise_seed:
        raise SeedMismatchError(f"config seed {cfg.seed} differs from ensemble seed {ens.noise_seed}")
    if cfg is not None and cfg.particles != ens.particles:
        raise SeedMismatchError("config particle count differs from the ensemble")
    for p in paths:
        if p.grid != ens.grid:
            raise GridMismatchError("path grid differs from the ensemble grid")


def _linear_sweep(spec: ProblemSpec, ens: EnsemblePath, control, y0: np.ndarray, forcing) -> tuple:
    """Integrate dy = (b_x y + b_y E[y] + forcing) dt + (sigma_x y + sigma_y E[y]) dW.

    ``forcing(j, t, x, ybar)`` returns the per-particle drift forcing (or None)
    and a constant state kick applied at the end of step ``j``.
    """
    g = ens.grid
    N, L, n = ens.particles, g.steps, spec.state_dim
    terms = _control_terms(control)
    y = np.empty((N, L + 1, n))
    ym = np.empty((L + 1, n))
    y[:, 0, :] = y0
    for j in range(L):
        t = float(g.knots[j])
        x, xbar = ens.states[:, j, :], ens.empirical_mean[j]
        cur = y[:, j, :]
        cm = cur.mean(axis=0)
        ym[j] = cm
        bx = _averaged(spec, "b_x", t, x, xbar, terms[j])
        by = _averaged(spec, "b_y", t, x, xbar, terms[j])
        sx = spec.partial("sigma_x", t, x, xbar)
        sy = spec.partial("sigma_y", t, x, xbar)
        drift = np.einsum("ikl,il->ik", bx, cur) + np.einsum("ikl,l->ik", by, cm)
        extra, kick = forcing(j, t, x, xbar)
        if extra is not None:
            drift = drift + extra
        diff = np.einsum("ikrl,il->ikr", sx, cur) + np.einsum("ikrl,l->ikr", sy, cm)
        y[:, j + 1, :] = cur + drift * g.dt + np.einsum("ikr,ir->ik", diff, ens.increments[:, j, :]) + kick
    ym[L] = y[:, L, :].mean(axis=0)
    return y, ym


def first_variation(spec: ProblemSpec, ens: EnsemblePath, u: StrictControlPath,
                    u_spiked: StrictControlPath, cfg: SimConfig | None = None) -> VariationPath:
    """Spike variation forced by ``b(., u_spiked) - b(., u)``; starts at 0."""
    _check_ensemble(ens, cfg, u, u_spiked)
    n = spec.state_dim
    differ = np.any(u.values != u_spiked.values, axis=1)

    def forcing(j, t, x, xbar):
        if not differ[j]:
            return None, 0.0
        return spec.b(t, x, xbar, u_spiked.values[j]) - spec.b(t, x, xbar, u.values[j]), 0.0

    y, ym = _linear_sweep(spec, ens, u, np.zeros(n), forcing)
    return VariationPath(ens.grid, "first", y, ym, ens.noise_seed)


def second_variation(spec: ProblemSpec, ens: EnsemblePath, u, eta: SingularControlPath,
                     xi: SingularControlPath, cfg: SimConfig | None = None) -> VariationPath:
    """Variation in the direction ``xi - eta`` of the singular control."""
    _check_ensemble(ens, cfg, u, eta, xi)
    g = ens.grid
    y0 = spec.G(0.0) @ (xi.jump0 - eta.jump0)
    d_inc = xi.increments - eta.increments

    def forcing(j, t, x, xbar):
        return None, spec.G(t) @ d_inc[j]

    y, ym = _linear_sweep(spec, ens, u, y0, forcing)
    return VariationPath(g, "second", y, ym, ens.noise_seed)


def _fit_order(xs, ys) -> float:
    xs, ys = np.asarray(xs, float), np.asarray(ys, float)
    ok = ys > 0
    if ok.sum() < 2:
        return float("nan")
    return float(np.polyfit(np.log(xs[ok]), np.log(ys[ok]), 1)[0])


def check_lemma1(spec: ProblemSpec, u: StrictControlPath, eta: SingularControlPath, cfg: SimConfig,
                 tau: float, v, epsilons) -> Table:
    """Size of the first variation, E int |y1|^2 dt, against the spike width.

    Also reports the mean-square distance of the spiked state to the base
    state and the fitted log-log order in epsilon.
    """
    ens = simulate(spec, u, eta, cfg)
    g = u.grid
    tab = Table(["epsilon", "value", "std_error", "state_gap", "ratio"])
    prev = None
    for eps in epsilons:
        us = spike_variation(u, PerturbationParams(tau, eps, v))
        y1 = first_variation(spec, ens, u, us, cfg)
        per = np.sum(np.sum(y1.values[:, :-1, :] ** 2, axis=2), axis=1) * g.dt
        spiked = simulate(spec, us, eta, cfg)
        gap = float(np.mean(np.sum(np.sum((spiked.states[:, :-1] - ens.states[:, :-1]) ** 2, axis=2), axis=1) * g.dt))
        val = float(per.mean())
        tab.add(float(eps), val, float(per.std(ddof=1) / np.sqrt(len(per))), gap,
                float("nan") if prev is None or prev == 0 else val / prev)
        prev = val
    tab.meta["order"] = _fit_order(tab.column("epsilon"), tab.column("value"))
    return tab


def check_lemma3(spec: ProblemSpec, u, eta: SingularControlPath, xi: SingularControlPath,
                 cfg: SimConfig, alphas) -> Table:
    """Mean-square error of the difference quotient against y2 at T."""
    ens = simulate_any(spec, u, eta, cfg)
    y2 = second_variation(spec, ens, u, eta, xi, cfg)
    tab = Table(["alpha", "value", "std_error", "ratio"])
    prev = None
    for a in alphas:
        ens_a = simulate_any(spec, u, convex_perturbation(eta, xi, a), cfg)
        resid = (ens_a.states[:, -1, :] - ens.states[:, -1, :]) / a - y2.values[:, -1, :]
        per = np.sum(resid ** 2, axis=1)
        val = float(per.mean())
        tab.add(float(a), val, float(per.std(ddof=1) / np.sqrt(len(per))),
                float("nan") if prev is None or prev == 0 else val / prev)
        prev = val
    tab.meta["order"] = _fit_order(tab.column("alpha"), tab.column("value"))
    return tab


def variational_expression(spec: ProblemSpec, ens: EnsemblePath, y2: VariationPath, control,
                           eta: SingularControlPath, xi: SingularControlPath) -> np.ndarray:
    """Per-particle value of the first-order cost change in direction xi - eta."""
    g = ens.grid
    terms = _control_terms(control)
    xT, yT = ens.states[:, -1, :], ens.empirical_mean[-1]
    yv, ym = y2.values, y2.empirical_mean
    per = np.sum(spec.partial("h_x", xT, yT) * yv[:, -1, :], axis=1) \
        + spec.partial("h_y", xT, yT) @ ym[-1]
    for j in range(g.steps):
        t = float(g.knots[j])
        x, xbar = ens.states[:, j, :], ens.empirical_mean[j]
        fx = _averaged(spec, "f_x", t, x, xbar, terms[j])
        fy = _averaged(spec, "f_y", t, x, xbar, terms[j])
        per = per + (np.sum(fx * yv[:, j, :], axis=1) + fy @ ym[j]) * g.dt
    return per + (singular_cost(spec, xi) - singular_cost(spec, eta))


def check_lemma4(spec: ProblemSpec, u, eta: SingularControlPath, xi: SingularControlPath,
                 cfg: SimConfig, alphas) -> Table:
    """Variational expression next to the raw cost difference quotients."""
    ens = simulate_any(spec, u, eta, cfg)
    y2 = second_variation(spec, ens, u, eta, xi, cfg)
    per = variational_expression(spec, ens, y2, u, eta, xi)
    expr = float(per.mean())
    se = float(per.std(ddof=1) / np.sqrt(len(per)))
    base = cost(spec, ens, u, eta).total
    tab = Table(["alpha", "quotient", "expression", "gap"])
    for a in alphas:
        eta_a = convex_perturbation(eta, xi, a)
        ens_a = simulate_any(spec, u, eta_a, cfg)
        quot = (cost(spec, ens_a, u, eta_a).total - base) / a
        tab.add(float(a), float(quot), expr, abs(float(quot) - expr))
    tab.meta.update(expression=expr, std_error=se)
    return tab


@dataclass(frozen=True)
class DualityResult:
    lhs: float
    rhs: float
    gap: float
    std_error: float

    def __iter__(self):
        return iter((self.lhs, self.rhs, self.gap))


def check_duality(spec: ProblemSpec, ens: EnsemblePath, y2: VariationPath, adj: AdjointPath,
                  eta: SingularControlPath, xi: SingularControlPath, control=None) -> DualityResult:
    """Compare the variational expression with the adjoint pairing against d(xi - eta).

    The jump at 0+ pairs with ``P`` at the first knot; the increment of
    interval ``j`` (applied at the end of the Euler step) pairs with ``P`` at
    knot ``j+1``.
    """
    if not (ens.noise_seed == y2.noise_seed == adj.noise_seed):
        raise SeedMismatchError("ensemble, variation and adjoint were built from different noise seeds")
    if not (ens.grid == y2.grid == adj.grid == eta.grid == xi.grid):
        raise GridMismatchError("duality inputs must share one grid")
    if y2.kind != "second":
        raise ValueError("duality needs the second variation")
    control = control if control is not None else ens.control
    if control is None:
        raise ValueError("control path required (ensemble does not carry one)")
    g = ens.grid
    lhs_per = variational_expression(spec, ens, y2, control, eta, xi)
    rhs_per = np.sum(adj.P[:, 0, :] * (spec.G(0.0) @ (xi.jump0 - eta.jump0)), axis=1)
    d_inc = xi.increments - eta.increments
    for j in range(g.steps):
        if np.any(d_inc[j]):
            rhs_per = rhs_per + adj.P[:, j + 1, :] @ (spec.G(float(g.knots[j])) @ d_inc[j])
    rhs_per = rhs_per + (singular_cost(spec, xi) - singular_cost(spec, eta))
    N = ens.particles
    se = np.sqrt(lhs_per.var(ddof=1) / N + rhs_per.var(ddof=1) / N)
    lhs, rhs = float(lhs_per.mean()), float(rhs_per.mean())
    return DualityResult(lhs, rhs, abs(lhs - rhs), float(se))
