import numpy as np
import pytest

from mfsmp.errors import SimulationError
from mfsmp.forward import (SimConfig, control_stability, cost, meanfield_convergence, read_binary,
                           simulate, simulate_relaxed, singular_stability)
from mfsmp.paths import (RelaxedControlPath, SingularControlPath, StrictControlPath, TimeGrid, chattering,
                         embed_strict)
from mfsmp.problem import builtin_lq, builtin_oscillating, builtin_singular

from helpers import scalar_spec

G256 = TimeGrid(1.0, 256)


def zero_u(spec, g=G256):
    return StrictControlPath.constant(g, spec.control_set, 0.0)


def test_trivial_dynamics_constant():
    spec = scalar_spec(x0=1.5)
    ens = simulate(spec, zero_u(spec, TimeGrid(1, 16)), SingularControlPath.zero(TimeGrid(1, 16)), SimConfig(5, 1))
    assert np.all(ens.states == 1.5)


def test_pure_singular_displacement():
    spec = scalar_spec(gain=-1.0, x0=3.0)
    g = TimeGrid(1.0, 16)
    ens = simulate(spec, zero_u(spec, g), SingularControlPath.jump_at_zero(g, 2.0), SimConfig(4, 0))
    assert np.all(ens.states == 1.0)


def test_increment_lands_after_its_interval():
    spec = scalar_spec(gain=1.0, x0=0.0)
    g = TimeGrid(1.0, 4)
    eta = SingularControlPath(g, [[0.0], [0.5], [0.0], [0.0]], [0.0])
    ens = simulate(spec, zero_u(spec, g), eta, SimConfig(2, 0))
    assert ens.states[0, :, 0].tolist() == [0.0, 0.0, 0.5, 0.5, 0.5]


def test_lq_mean_matches_mean_ode():
    # oracle: m' = (a + abar) m, m(0) = 1  ->  m(1) = exp(-0.2)
    spec = builtin_lq()
    ens = simulate(spec, zero_u(spec), SingularControlPath.zero(G256), SimConfig(10_000, 2))
    xT = ens.states[:, -1, 0]
    se = xT.std(ddof=1) / np.sqrt(len(xT))
    # Euler bias of the mean is about 0.2^2/2 * dt * m, far below 3 se
    assert abs(ens.empirical_mean[-1, 0] - np.exp(-0.2)) <= 3 * se + 1e-3


def test_empirical_mean_invariant():
    spec = builtin_lq()
    ens = simulate(spec, zero_u(spec), SingularControlPath.jump_at_zero(G256, 0.5), SimConfig(300, 4))
    assert np.allclose(ens.empirical_mean, ens.states.mean(axis=0), atol=1e-12, rtol=0)
    assert np.all(ens.states[:, 0, 0] == 1.5)


def test_relaxed_one_hot_bit_identical():
    spec = builtin_lq()
    rng = np.random.default_rng(0)
    u = StrictControlPath.from_indices(G256, spec.control_set, rng.integers(0, 41, 256))
    eta = SingularControlPath.jump_at_zero(G256, 0.3)
    a = simulate(spec, u, eta, SimConfig(200, 9))
    b = simulate_relaxed(spec, embed_strict(u), eta, SimConfig(200, 9))
    assert np.array_equal(a.states, b.states)


def test_relaxed_half_half_on_example_is_zero():
    spec = builtin_oscillating()
    q = RelaxedControlPath.uniform_over(G256, spec.control_set, spec.control_set)
    eta = SingularControlPath.zero(G256)
    ens = simulate_relaxed(spec, q, eta, SimConfig(2, 0))
    assert np.all(ens.states == 0.0)
    assert cost(spec, ens, q, eta).total == 0.0


def test_lq_symmetric_mixture_matches_zero_control():
    spec = builtin_lq()
    q = RelaxedControlPath.uniform_over(G256, spec.control_set, [[-1.0], [1.0]])
    eta = SingularControlPath.zero(G256)
    a = simulate(spec, zero_u(spec), eta, SimConfig(500, 3))
    b = simulate_relaxed(spec, q, eta, SimConfig(500, 3))
    assert np.allclose(a.empirical_mean, b.empirical_mean, atol=1e-12, rtol=0)


def test_example_alternating_cost_bound():
    # exact: J(v^n) = 1 / (3 n^2) for the triangle wave; bound 1/n^2
    spec = builtin_oscillating()
    half = RelaxedControlPath.uniform_over(TimeGrid(1.0, 1), spec.control_set, spec.control_set)
    un = chattering(half, 10, 0).resample(TimeGrid(1.0, 1000))
    eta = SingularControlPath.zero(un.grid)
    rep = cost(spec, simulate(spec, un, eta, SimConfig(2, 0)), un, eta)
    assert rep.total <= 0.01
    assert rep.total == pytest.approx(1 / 300, rel=0.02)


def test_singular_only_cost():
    spec = scalar_spec(phi=0.5, gain=1.0)
    g = TimeGrid(1.0, 8)
    eta = SingularControlPath(g, [[0.0], [0.5], [0.0], [0.0], [1.0], [0.0], [0.0], [0.0]], [0.5])
    rep = cost(spec, simulate(spec, zero_u(spec, g), eta, SimConfig(3, 0)), zero_u(spec, g), eta)
    assert rep.total == 1.0 and rep.singular == 1.0 and rep.running == 0.0 and rep.terminal == 0.0


def test_builtin_singular_closed_form_costs():
    # oracle: E X(t)^2 = (2 - jump)^2 + 0.01 t; left Riemann sum on L = 256
    spec = builtin_singular()
    u = zero_u(spec)
    t = G256.left
    for jump, expected_cont in ((0.0, 4.005), (2.0, 1.005)):
        eta = SingularControlPath.jump_at_zero(G256, jump)
        rep = cost(spec, simulate(spec, u, eta, SimConfig(10_000, 8)), u, eta)
        discrete = np.sum((2 - jump) ** 2 + 0.01 * t) * G256.dt + 0.5 * jump
        assert abs(discrete - expected_cont) < 1e-4
        assert abs(rep.total - discrete) <= 3 * rep.std_error + 1e-9
        assert rep.total == rep.running + rep.terminal + rep.singular


def test_determinism_and_parallel_independence():
    spec = builtin_lq()
    u = zero_u(spec)
    eta = SingularControlPath.zero(G256)
    a = simulate(spec, u, eta, SimConfig(1001, 5, workers=1))
    b = simulate(spec, u, eta, SimConfig(1001, 5, workers=1))
    c = simulate(spec, u, eta, SimConfig(1001, 5, workers=4))
    assert np.array_equal(a.states, b.states)
    assert np.array_equal(a.states, c.states)
    assert np.array_equal(a.increments, c.increments)


def test_env_var_sets_workers(monkeypatch):
    monkeypatch.setenv("MFSMP_THREADS", "3")
    assert SimConfig(10).n_workers == 3
    monkeypatch.setenv("MFSMP_THREADS", "junk")
    assert SimConfig(10).n_workers == 1


def test_particles_must_exceed_one():
    with pytest.raises(ValueError):
        SimConfig(1)


def test_overflow_reports_particle_and_step():
    spec = scalar_spec(drift=lambda t, x, y, u: 1e200 * x ** 3, x0=10.0)
    g = TimeGrid(1.0, 10)
    with np.errstate(over="ignore", invalid="ignore"), pytest.raises(SimulationError) as info:
        simulate(spec, zero_u(spec, g), SingularControlPath.zero(g), SimConfig(3, 0))
    assert info.value.particle == 0 and info.value.step >= 1


def test_meanfield_convergence_deterministic_problem():
    spec = builtin_oscillating()
    g = TimeGrid(1.0, 32)
    tab = meanfield_convergence(spec, StrictControlPath.constant(g, spec.control_set, 1.0),
                                SingularControlPath.zero(g), [10, 20], reps=3, seed=0)
    assert np.all(tab.column("std_mean_T") == 0.0)
    assert np.isnan(tab.meta["slope"])


def test_meanfield_convergence_slope_stable_in_reps():
    spec = builtin_lq()
    g = TimeGrid(1.0, 32)
    u, eta = zero_u(spec, g), SingularControlPath.zero(g)
    t20 = meanfield_convergence(spec, u, eta, [100, 400, 1600], reps=20, seed=1)
    t40 = meanfield_convergence(spec, u, eta, [100, 400, 1600], reps=40, seed=1)
    assert t40.meta["ci_low"] - 0.1 <= t20.meta["slope"] <= t40.meta["ci_high"] + 0.1
    assert t40.meta["slope_se"] < t20.meta["slope_se"]


def test_singular_stability_linear_in_alpha():
    spec = builtin_lq()
    tab = singular_stability(spec, zero_u(spec), SingularControlPath.zero(G256),
                             SingularControlPath.jump_at_zero(G256, 1.0), SimConfig(500, 2),
                             [0.4, 0.2, 0.1, 0.05])
    gaps = tab.column("rms_sup_gap")
    assert np.all(np.diff(gaps) < 0)
    c = tab.column("gap_over_alpha")
    assert np.ptp(c) <= 1e-9 * c.max()


def test_control_stability_decreases():
    spec = builtin_oscillating()
    q = RelaxedControlPath.uniform_over(TimeGrid(1.0, 1), spec.control_set, spec.control_set)
    tab = control_stability(spec, q, SingularControlPath.zero(G256), SimConfig(2, 0), [1, 2, 4, 8, 16])
    assert np.all(np.diff(tab.column("rms_sup_gap")) < 0)
    assert np.all(np.diff(tab.column("cost_gap")) < 0)


def test_binary_and_summary_export(tmp_path):
    spec = builtin_lq()
    g = TimeGrid(1.0, 8)
    ens = simulate(spec, zero_u(spec, g), SingularControlPath.zero(g), SimConfig(6, 1))
    ens.write_binary(tmp_path / "x.bin")
    raw = (tmp_path / "x.bin").read_bytes()
    assert np.frombuffer(raw[:24], "<i8").tolist() == [6, 8, 1]
    assert np.array_equal(read_binary(tmp_path / "x.bin"), ens.states)
    text = ens.summary_table().to_csv()
    assert text.splitlines()[0] == "t,mean0,std0" and len(text.splitlines()) == 10
