"""Maximum-principle checks and a successive-approximation improvement loop.

Residual conventions (all in cost units):

* ``hamiltonian_gap[j] = min_a E[H(a)] - E[H(candidate)]`` is never positive;
  a value below ``-tolerance`` flags a step where the candidate is beaten.
* The singular multiplier ``M = phi + G^T P`` has one slot for the jump at 0+
  (paired with ``P`` at the first knot) and one per interval ``j`` (paired
  with ``P`` at knot ``j+1``, where the increment lands).  The sign condition
  looks at the 1st percentile of ``M`` across particles.
* Slackness is the particle average of ``sum_slots M . d eta``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .adjoint import AdjointPath, solve_adjoint
from .errors import GridMismatchError, SeedMismatchError
from .forward import CostReport, EnsemblePath, SimConfig, cost, simulate_any
from .paths import (PerturbationParams, RelaxedControlPath, SingularControlPath, StrictControlPath,
                    embed_strict, metric_d1, spike_variation)
from .problem import ProblemSpec

CONDITIONS = ("hamiltonian", "sign", "slackness")


@dataclass(frozen=True)
class Tolerances:
    """Tolerance = ``z * std_error + abs + dt_factor * dt`` per condition."""

    z: float = 3.0
    hamiltonian_abs: float = 1e-3
    sign_abs: float = 0.0
    slackness_abs: float = 0.0
    dt_factor: float = 1.0
    mixture_abs: float = 1e-9

    def scaled(self, factor: float) -> "Tolerances":
        """Tolerances for a problem whose costs were multiplied by ``factor``."""
        return replace(self, hamiltonian_abs=self.hamiltonian_abs * factor,
                       sign_abs=self.sign_abs * factor, slackness_abs=self.slackness_abs * factor,
                       dt_factor=self.dt_factor * factor, mixture_abs=self.mixture_abs * factor)


@dataclass(frozen=True)
class HamiltonianSample:
    t: float
    values: np.ndarray
    averaged: np.ndarray


def hamiltonian(spec: ProblemSpec, ens: EnsemblePath, adj: AdjointPath, j: int) -> HamiltonianSample:
    """``H(a) = b(a) . P + sigma : Z + f(a)`` per particle and control point at step ``j``."""
    if ens.noise_seed != adj.noise_seed:
        raise SeedMismatchError("ensemble and adjoint use different noise seeds")
    if ens.grid != adj.grid:
        raise GridMismatchError("ensemble and adjoint grids differ")
    L = ens.grid.steps
    if not 0 <= j < L:
        raise IndexError(f"step index {j} outside [0, {L - 1}]")
    t = float(ens.grid.knots[j])
    x = ens.states[:, j, :]
    ybar = ens.empirical_mean[j]
    cs = spec.control_set
    xb = x[:, None, :]
    b = spec.b(t, xb, ybar, cs[None, :, :])
    f = spec.f(t, xb, ybar, cs[None, :, :])
    sig = spec.sigma(t, x, ybar)
    sz = np.einsum("ikr,ikr->i", sig, adj.Z[:, j])
    values = np.einsum("iak,ik->ia", b, adj.P[:, j, :]) + sz[:, None] + f
    values = np.ascontiguousarray(np.broadcast_to(values, (x.shape[0], cs.shape[0])))
    return HamiltonianSample(t, values, values.mean(axis=0))


# -- report ---------------------------------------------------------------------


@dataclass
class SmpReport:
    """Residuals, tolerances and verdicts of one maximum-principle check."""

    kind: str
    seed: int
    particles: int
    steps: int
    dt: float
    cost: float
    cost_std_error: float
    hamiltonian_gap: np.ndarray
    hamiltonian_tol: np.ndarray
    argmin_index: np.ndarray
    sign_q01: np.ndarray
    sign_mean: np.ndarray
    sign_tol: np.ndarray
    slackness: float
    slackness_std_error: float
    slackness_tol: float
    mixture_residual: float = 0.0
    mixture_tol: float = 0.0
    epsilon_n: float = 0.0
    alpha: float = 0.0
    C1: float = 0.0
    C2: float = 0.0
    verdicts: dict = field(default_factory=dict)

    @property
    def ekeland_slack_hamiltonian(self) -> float:
        return float(np.sqrt(self.epsilon_n) * self.C1 * self.alpha)

    @property
    def ekeland_slack_singular(self) -> float:
        return float(np.sqrt(self.epsilon_n) * self.C2 * self.alpha)

    @property
    def ekeland_slack(self) -> float:
        return max(self.ekeland_slack_hamiltonian, self.ekeland_slack_singular)

    @property
    def passed(self) -> bool:
        return all(self.verdicts.values())

    @property
    def hamiltonian_violation_fraction(self) -> float:
        bad = self.hamiltonian_gap < -(self.hamiltonian_tol + self.ekeland_slack_hamiltonian)
        return float(bad.mean())

    @property
    def worst_sign_residual(self) -> float:
        return float(np.min(self.sign_q01))

    def to_dict(self) -> dict:
        out = {}
        for k, v in asdict(self).items():
            out[k] = v.tolist() if isinstance(v, np.ndarray) else v
        out["ekeland_slack"] = self.ekeland_slack
        out["ekeland_slack_hamiltonian"] = self.ekeland_slack_hamiltonian
        out["ekeland_slack_singular"] = self.ekeland_slack_singular
        out["hamiltonian_violation_fraction"] = self.hamiltonian_violation_fraction
        out["worst_sign_residual"] = self.worst_sign_residual
        out["passed"] = self.passed
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def summary(self) -> str:
        lines = [
            f"{self.kind} check  N={self.particles}  L={self.steps}  seed={self.seed}",
            f"  cost                 {self.cost:.6g} +/- {self.cost_std_error:.2g}",
            f"  hamiltonian gap min  {self.hamiltonian_gap.min():.4g}  "
            f"(violations on {100 * self.hamiltonian_violation_fraction:.1f}% of steps)",
            f"  sign residual q01    {self.worst_sign_residual:.4g}",
            f"  slackness            {self.slackness:.4g} (tol {self.slackness_tol:.3g})",
        ]
        if self.kind == "relaxed":
            lines.append(f"  mixture residual     {self.mixture_residual:.3g}")
        if self.epsilon_n > 0:
            lines.append(f"  ekeland slack        {self.ekeland_slack:.4g} (C1={self.C1:.4g}, C2={self.C2:.4g})")
        for name, ok in self.verdicts.items():
            lines.append(f"  {name:<20} {'PASS' if ok else 'FAIL'}")
        return "\n".join(lines)


def derive_verdicts(report) -> dict:
    """Recompute verdicts from stored residuals and tolerances (dict or SmpReport)."""
    r = report.to_dict() if isinstance(report, SmpReport) else report
    slack_h = float(np.sqrt(r["epsilon_n"]) * r["C1"] * r["alpha"])
    slack_s = float(np.sqrt(r["epsilon_n"]) * r["C2"] * r["alpha"])
    gap = np.asarray(r["hamiltonian_gap"], float)
    htol = np.asarray(r["hamiltonian_tol"], float)
    q01 = np.asarray(r["sign_q01"], float)
    stol = np.asarray(r["sign_tol"], float)
    out = {
        "hamiltonian": bool(np.all(gap >= -(htol + slack_h))),
        "sign": bool(np.all(q01 >= -(stol + slack_s))),
        "slackness": bool(abs(r["slackness"]) <= r["slackness_tol"] + slack_s),
    }
    if r["kind"] == "relaxed":
        out["mixture"] = bool(r["mixture_residual"] <= r["mixture_tol"])
    return out


# -- pipeline -------------------------------------------------------------------


@dataclass
class Analysis:
    """Intermediate products of one simulate/adjoint/Hamiltonian pass."""

    ens: EnsemblePath
    adj: AdjointPath
    cost: CostReport
    gap: np.ndarray
    gap_se: np.ndarray
    mean_H: np.ndarray
    argmin: np.ndarray
    M: np.ndarray
    mixture_residual: float


def _candidate_values(control, j, values):
    if isinstance(control, RelaxedControlPath):
        w = control.weights[j]
        acc = None
        for a in np.flatnonzero(w):
            term = values[:, a] if w[a] == 1.0 else w[a] * values[:, a]
            acc = term if acc is None else acc + term
        return acc
    return values[:, control.indices[j]]


def singular_multiplier(spec: ProblemSpec, adj: AdjointPath) -> np.ndarray:
    """``phi + G^T P`` per particle and slot, shape (N, L+1, m)."""
    g = adj.grid
    N = adj.P.shape[0]
    m = spec.singular_dim
    M = np.empty((N, g.steps + 1, m))
    M[:, 0, :] = spec.phi(0.0) + adj.P[:, 0, :] @ spec.G(0.0)
    for j in range(g.steps):
        t = float(g.knots[j])
        M[:, j + 1, :] = spec.phi(t) + adj.P[:, j + 1, :] @ spec.G(t)
    return M


def _mixture_residual(mean_H: np.ndarray, seed: int, draws: int = 64) -> float:
    """Largest amount by which a random mixture beats the best vertex (should be <= 0)."""
    A = mean_H.shape[1]
    if A == 1:
        return 0.0
    rng = np.random.default_rng(seed)
    mix = rng.dirichlet(np.ones(A), size=draws)
    mixed_min = (mean_H @ mix.T).min(axis=1)
    return float(np.max(mean_H.min(axis=1) - mixed_min))


def analyze(spec: ProblemSpec, control, eta: SingularControlPath, cfg: SimConfig,
            basis_degree: int = 2, cost_sign: str = "standard") -> Analysis:
    ens = simulate_any(spec, control, eta, cfg)
    adj = solve_adjoint(spec, ens, control, basis_degree, cost_sign)
    rep = cost(spec, ens, control, eta)
    L = ens.grid.steps
    A = spec.control_set.shape[0]
    gap = np.empty(L)
    gap_se = np.empty(L)
    mean_H = np.empty((L, A))
    argmin = np.empty(L, dtype=int)
    N = ens.particles
    for j in range(L):
        hs = hamiltonian(spec, ens, adj, j)
        best = int(np.argmin(hs.averaged))
        cand = _candidate_values(control, j, hs.values)
        diff = hs.values[:, best] - cand
        mean_H[j] = hs.averaged
        argmin[j] = best
        gap[j] = min(0.0, float(diff.mean()))
        gap_se[j] = float(diff.std(ddof=1) / np.sqrt(N))
    M = singular_multiplier(spec, adj)
    mix = _mixture_residual(mean_H, cfg.seed) if isinstance(control, RelaxedControlPath) else 0.0
    return Analysis(ens, adj, rep, gap, gap_se, mean_H, argmin, M, mix)


def _eta_slots(eta: SingularControlPath) -> np.ndarray:
    return np.vstack([eta.jump0[None, :], eta.increments])


def _report(kind: str, spec: ProblemSpec, an: Analysis, eta: SingularControlPath, cfg: SimConfig,
            tol: Tolerances, epsilon_n=0.0, alpha=0.0, C1=0.0, C2=0.0) -> SmpReport:
    g = an.ens.grid
    N = an.ens.particles
    M = an.M
    q01 = np.percentile(M, 1.0, axis=0)
    mean = M.mean(axis=0)
    se_M = M.std(axis=0, ddof=1) / np.sqrt(N)
    slots = _eta_slots(eta)
    per = np.einsum("isk,sk->i", M, slots)
    slack = float(per.mean())
    slack_se = float(per.std(ddof=1) / np.sqrt(N))
    rep = SmpReport(
        kind=kind, seed=cfg.seed, particles=N, steps=g.steps, dt=g.dt,
        cost=an.cost.total, cost_std_error=an.cost.std_error,
        hamiltonian_gap=an.gap, hamiltonian_tol=tol.z * an.gap_se + tol.hamiltonian_abs + tol.dt_factor * g.dt,
        argmin_index=an.argmin, sign_q01=q01, sign_mean=mean,
        sign_tol=tol.z * se_M + tol.sign_abs + tol.dt_factor * g.dt,
        slackness=slack, slackness_std_error=slack_se,
        slackness_tol=tol.z * slack_se + tol.slackness_abs + tol.dt_factor * g.dt,
        mixture_residual=an.mixture_residual, mixture_tol=tol.mixture_abs,
        epsilon_n=float(epsilon_n), alpha=float(alpha), C1=float(C1), C2=float(C2),
    )
    rep.verdicts = derive_verdicts(rep)
    return rep


def check_strict(spec: ProblemSpec, u: StrictControlPath, eta: SingularControlPath, cfg: SimConfig,
                 tolerances: Tolerances | None = None, basis_degree: int = 2) -> SmpReport:
    """Hamiltonian minimality, sign condition and complementary slackness."""
    tol = tolerances or Tolerances()
    an = analyze(spec, u, eta, cfg, basis_degree)
    return _report("strict", spec, an, eta, cfg, tol)


def check_relaxed(spec: ProblemSpec, q: RelaxedControlPath, eta: SingularControlPath, cfg: SimConfig,
                  tolerances: Tolerances | None = None, basis_degree: int = 2) -> SmpReport:
    """Relaxed version; adds the vertex-versus-mixture consistency check.

    A one-hot ``q`` reproduces :func:`check_strict` on the embedded control
    field by field (apart from ``kind`` and the extra mixture verdict).
    """
    tol = tolerances or Tolerances()
    an = analyze(spec, q, eta, cfg, basis_degree)
    return _report("relaxed", spec, an, eta, cfg, tol)


def estimate_C1(spec: ProblemSpec, u: StrictControlPath, eta: SingularControlPath, cfg: SimConfig,
                probes: int = 4, width: float | None = None) -> float:
    """Largest cost change per unit d1 over a few probe spikes.

    Spikes of width ``width`` (default: max(T/16, one step)) start at
    ``probes`` equispaced times and use the extreme control points.
    """
    g = u.grid
    width = width or max(g.horizon / 16, g.dt)
    base = cost(spec, simulate_any(spec, u, eta, cfg), u, eta).total
    cs = spec.control_set
    extremes = {int(np.argmin(cs[:, 0])), int(np.argmax(cs[:, 0]))}
    taus = np.linspace(0.0, g.horizon - width, probes)
    best = 0.0
    for tau in taus:
        for a in extremes:
            us = spike_variation(u, PerturbationParams(float(tau), width, cs[a]))
            d = metric_d1(us, u)
            if d == 0:
                continue
            j = cost(spec, simulate_any(spec, us, eta, cfg), us, eta).total
            best = max(best, abs(j - base) / d)
    return float(best)


def estimate_C2(eta: SingularControlPath) -> float:
    """``sqrt(2 M)`` with ``M = |eta(T)|^2 + |xi(T)|^2`` and ``xi = eta`` plus a unit jump."""
    tot = eta.total
    M = float(tot @ tot + (tot + 1.0) @ (tot + 1.0))
    return float(np.sqrt(2.0 * M))


def check_near_optimal(spec: ProblemSpec, u: StrictControlPath, eta: SingularControlPath, cfg: SimConfig,
                       epsilon_n: float, alpha: float, tolerances: Tolerances | None = None,
                       basis_degree: int = 2) -> SmpReport:
    """Strict check with the additive slack ``sqrt(epsilon_n) C alpha``."""
    if epsilon_n < 0:
        raise ValueError("epsilon_n must be nonnegative")
    if not 0.0 < alpha <= 1.0:
        raise ValueError("alpha must lie in (0, 1]")
    tol = tolerances or Tolerances()
    an = analyze(spec, u, eta, cfg, basis_degree)
    C1 = estimate_C1(spec, u, eta, cfg) if epsilon_n > 0 else 0.0
    C2 = estimate_C2(eta) if epsilon_n > 0 else 0.0
    return _report("near-optimal", spec, an, eta, cfg, tol, epsilon_n, alpha, C1, C2)


# -- improvement loop -----------------------------------------------------------


@dataclass
class ImproveResult:
    controls: list
    etas: list
    costs: list
    cost_std_errors: list
    final_report: SmpReport | None = None

    @property
    def control(self) -> StrictControlPath:
        return self.controls[-1]

    @property
    def eta(self) -> SingularControlPath:
        return self.etas[-1]


def improve(spec: ProblemSpec, u0: StrictControlPath, eta0: SingularControlPath, cfg: SimConfig,
            iterations: int = 30, step_damping: float = 0.5, relaxation: float = 0.5,
            singular_step: float = 0.5, tolerances: Tolerances | None = None,
            basis_degree: int = 2, final_check: bool = True) -> ImproveResult:
    """Method of successive approximations driven by the necessary conditions.

    Each iteration simulates, solves the adjoint and then

    * on the worst ``step_damping`` fraction of steps whose Hamiltonian gap
      exceeds the tolerance, moves the control a fraction ``relaxation`` of
      the way to the Hamiltonian argmin (rounded to the nearest control
      point, and at least one grid point);
    * adds ``singular_step * |M|`` to the slot with the most negative mean
      multiplier ``M`` (if below tolerance) and removes up to
      ``singular_step * M`` from charged slots where ``M`` exceeds tolerance.

    Steps within tolerance are left alone, so a point satisfying the
    conditions is a fixed point.  Costs are recorded for every iterate,
    including the last one.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    if not 0.0 < step_damping <= 1.0 or not 0.0 < relaxation <= 1.0:
        raise ValueError("step_damping and relaxation must lie in (0, 1]")
    tol = tolerances or Tolerances()
    cs = spec.control_set
    u, eta = u0, eta0
    controls, etas, costs, ses = [], [], [], []
    g = u.grid
    for it in range(iterations + 1):
        an = analyze(spec, u, eta, cfg, basis_degree)
        controls.append(u)
        etas.append(eta)
        costs.append(an.cost.total)
        ses.append(an.cost.std_error)
        if it == iterations:
            break
        htol = tol.z * an.gap_se + tol.hamiltonian_abs + tol.dt_factor * g.dt
        bad = np.flatnonzero(an.gap < -htol)
        new_idx = u.indices.copy()
        if bad.size:
            take = bad[np.argsort(an.gap[bad], kind="stable")][:max(1, int(np.ceil(step_damping * bad.size)))]
            for j in take:
                cur = cs[new_idx[j]]
                tgt = cs[an.argmin[j]]
                want = cur + relaxation * (tgt - cur)
                k = int(np.argmin(np.sum((cs - want) ** 2, axis=1)))
                if k == new_idx[j]:
                    k = int(an.argmin[j])
                new_idx[j] = k
        new_u = StrictControlPath.from_indices(g, cs, new_idx)
        new_eta = _singular_update(eta, an.M, tol, g.dt, singular_step)
        if new_u == u and new_eta == eta:
            break
        u, eta = new_u, new_eta
    report = check_strict(spec, u, eta, cfg, tol, basis_degree) if final_check else None
    return ImproveResult(controls, etas, costs, ses, report)


def _singular_update(eta: SingularControlPath, M: np.ndarray, tol: Tolerances, dt: float,
                     step: float) -> SingularControlPath:
    N = M.shape[0]
    mean = M.mean(axis=0)
    mtol = tol.z * M.std(axis=0, ddof=1) / np.sqrt(N) + tol.sign_abs + tol.dt_factor * dt
    slots = _eta_slots(eta).copy()
    # remove mass where the multiplier is clearly positive on charged slots
    over = (mean > mtol) & (slots > 0)
    slots[over] = np.maximum(0.0, slots[over] - step * mean[over])
    # push once, at the worst violation
    viol = mean + mtol
    s, k = np.unravel_index(int(np.argmin(viol)), viol.shape)
    if viol[s, k] < 0:
        slots[s, k] += step * abs(mean[s, k])
    return SingularControlPath(eta.grid, slots[1:], slots[0])


def anti_optimal_control(spec: ProblemSpec, u: StrictControlPath, eta: SingularControlPath,
                         cfg: SimConfig, basis_degree: int = 2) -> StrictControlPath:
    """Pointwise Hamiltonian maximizer along the ensemble generated by ``u``."""
    an = analyze(spec, u, eta, cfg, basis_degree)
    return StrictControlPath.from_indices(u.grid, spec.control_set, np.argmax(an.mean_H, axis=1))
