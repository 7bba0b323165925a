import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mfsmp.errors import ControlSetError, GridMismatchError, SpikeUnresolvableError
from mfsmp.paths import (PerturbationParams, RelaxedControlPath, SingularControlPath, StrictControlPath,
                         TimeGrid, chattering, convex_perturbation, embed_strict, metric_d, metric_d1,
                         metric_d2, path_from_json, path_to_csv, path_to_json, relaxed_from_csv,
                         singular_from_csv, spike_variation, strict_from_csv, weak_distance)

CS = np.array([[-1.0], [0.0], [1.0]])
PM = np.array([[-1.0], [1.0]])


def zero_path(L=10):
    return StrictControlPath.constant(TimeGrid(1.0, L), CS, 0.0)


def test_grid_basics():
    g = TimeGrid(2.0, 8)
    assert g.knots[0] == 0.0 and g.knots[-1] == 2.0
    assert np.all(np.diff(g.knots) > 0)
    assert g.dt == 0.25
    with pytest.raises(ValueError):
        TimeGrid(1.0, 0)


def test_spike_example():
    us = spike_variation(zero_path(), PerturbationParams(0.3, 0.2, 1.0))
    assert us.values[:, 0].tolist() == [0, 0, 0, 1, 1, 0, 0, 0, 0, 0]


def test_spike_covering_everything_and_noop():
    full = spike_variation(zero_path(), PerturbationParams(0.0, 1.0, -1.0))
    assert np.all(full.values == -1.0)
    u = zero_path()
    assert spike_variation(u, PerturbationParams(0.2, 0.3, 0.0)) == u


def test_spike_errors():
    with pytest.raises(SpikeUnresolvableError):
        spike_variation(zero_path(), PerturbationParams(0.3, 0.05, 1.0))
    with pytest.raises(ValueError):
        spike_variation(zero_path(), PerturbationParams(0.9, 0.2, 1.0))
    with pytest.raises(ControlSetError):
        spike_variation(zero_path(), PerturbationParams(0.3, 0.2, 0.5))


def test_spike_idempotent():
    p = PerturbationParams(0.1, 0.3, -1.0)
    once = spike_variation(zero_path(), p)
    assert spike_variation(once, p) == once


def test_strict_membership_enforced():
    with pytest.raises(ControlSetError):
        StrictControlPath(TimeGrid(1.0, 2), np.array([[0.0], [0.3]]), CS)


def test_convex_perturbation_examples():
    g = TimeGrid(1.0, 4)
    eta = SingularControlPath(g, [[0.1], [0.0], [0.2], [0.0]], [0.0])
    xi = SingularControlPath.jump_at_zero(g, 2.0)
    assert convex_perturbation(eta, xi, 0.0) == eta
    assert convex_perturbation(eta, xi, 1.0) == xi
    half = convex_perturbation(SingularControlPath.zero(g), xi, 0.5)
    assert half.jump0[0] == 1.0 and np.all(half.increments == 0)
    with pytest.raises(GridMismatchError):
        convex_perturbation(eta, SingularControlPath.zero(TimeGrid(1.0, 5)), 0.5)


def test_singular_rejects_negative():
    g = TimeGrid(1.0, 3)
    with pytest.raises(ValueError):
        SingularControlPath(g, [[0.1], [-1e-9], [0.0]], [0.0])
    with pytest.raises(ValueError):
        SingularControlPath(g, [[0.1], [0.0], [0.0]], [-0.5])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-5, 5, allow_nan=False), min_size=4, max_size=4), st.floats(-5, 5, allow_nan=False))
def test_singular_constructor_property(incs, jump):
    g = TimeGrid(1.0, 4)
    ok = all(v >= 0 for v in incs) and jump >= 0
    if ok:
        p = SingularControlPath(g, np.array(incs)[:, None], [jump])
        assert p.knot_values()[0, 0] == 0.0
        assert np.all(np.diff(p.knot_values()[:, 0]) >= 0)
    else:
        with pytest.raises(ValueError):
            SingularControlPath(g, np.array(incs)[:, None], [jump])


def test_embed_examples():
    g = TimeGrid(1.0, 6)
    q = embed_strict(StrictControlPath.constant(g, CS, -1.0))
    assert np.all(q.weights == np.array([1.0, 0.0, 0.0]))
    alt = StrictControlPath(g, np.array([[-1.0], [1.0]] * 3), PM)
    w = embed_strict(alt).weights
    assert w[:, 0].tolist() == [1, 0, 1, 0, 1, 0] and w[:, 1].tolist() == [0, 1, 0, 1, 0, 1]
    assert embed_strict(alt).to_strict() == alt


def test_relaxed_weights_validated():
    g = TimeGrid(1.0, 2)
    with pytest.raises(ValueError):
        RelaxedControlPath(g, [[0.5, 0.5 + 1e-10], [1.0, 0.0]], PM)
    with pytest.raises(ValueError):
        RelaxedControlPath(g, [[1.5, -0.5], [1.0, 0.0]], PM)


def test_chattering_examples():
    g = TimeGrid(1.0, 1)
    onehot = embed_strict(StrictControlPath.constant(g, PM, 1.0))
    assert np.all(chattering(onehot, 7, 3).values == 1.0)
    half = RelaxedControlPath.uniform_over(g, PM, PM)
    v = chattering(half, 10, 0).values[:, 0]
    assert np.sum(v == 1.0) == 5 and np.sum(v == -1.0) == 5
    assert np.all(v[1:] != v[:-1])  # strictly alternating


def test_chattering_weak_distance_decreases():
    # oracle: dyadic n gives exact halves in the single window, n=1 a full-mass atom
    half = RelaxedControlPath.uniform_over(TimeGrid(1.0, 1), PM, PM)
    d = [weak_distance(embed_strict(chattering(half, n, 0)), half, 1) for n in (1, 2, 4, 8)]
    assert d == [0.5, 0.0, 0.0, 0.0]
    # finer windows (each 1/8 of [0,1]) see the alternation until n reaches 8
    fine = half.resample(TimeGrid(1.0, 8))
    d8 = [weak_distance(embed_strict(chattering(half, n, 0)), fine, 1) for n in (1, 2, 4, 8, 16)]
    assert d8 == [0.5, 0.5, 0.5, 0.5, 0.0]
    assert all(b <= a for a, b in zip(d8, d8[1:]))


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0.01, 1.0), min_size=3, max_size=3), st.integers(1, 40), st.integers(0, 10))
def test_chattering_occupation_within_one_over_n(raw, n, seed):
    w = np.array(raw) / np.sum(raw)
    w[-1] = 1.0 - w[:-1].sum()
    q = RelaxedControlPath(TimeGrid(1.0, 2), np.vstack([w, w[::-1]]), CS)
    u = chattering(q, n, seed)
    for j in range(2):
        occ = np.bincount(u.indices[j * n:(j + 1) * n], minlength=3) / n
        assert np.all(np.abs(occ - q.weights[j]) <= 1.0 / n + 1e-12)


def test_weak_distance_examples():
    g = TimeGrid(1.0, 4)
    a = embed_strict(StrictControlPath.constant(g, PM, -1.0))
    b = embed_strict(StrictControlPath.constant(g, PM, 1.0))
    assert weak_distance(a, a, 1) == 0.0
    assert weak_distance(a, b, 1) == 1.0
    assert weak_distance(a, b, 3) == 1.0
    alt = embed_strict(StrictControlPath(TimeGrid(1.0, 10), np.array([[-1.0], [1.0]] * 5), PM))
    half = RelaxedControlPath.uniform_over(TimeGrid(1.0, 1), PM, PM)
    assert weak_distance(alt, half, 1) == 0.0


def test_metric_examples():
    g = TimeGrid(1.0, 10)
    u = zero_path()
    assert metric_d1(u, u) == 0.0
    v = StrictControlPath(g, np.where((g.left >= 0.3 - 1e-12) & (g.left < 0.5 - 1e-12), 1.0, 0.0)[:, None], CS)
    assert metric_d1(u, v) == pytest.approx(0.2)
    spiked = spike_variation(u, PerturbationParams(0.6, 0.1, -1.0))
    assert metric_d1(spiked, u) == pytest.approx(0.1)
    eta = SingularControlPath.zero(g)
    xi = SingularControlPath.jump_at_zero(g, 2.0)
    assert metric_d2(eta, eta) == 0.0
    assert metric_d2(eta, xi) == 2.0
    with pytest.raises(GridMismatchError):
        metric_d1(u, zero_path(5))


@settings(max_examples=30, deadline=None)
@given(st.floats(0.0, 1.0), st.integers(0, 1000))
def test_d2_convex_scaling(alpha, seed):
    rng = np.random.default_rng(seed)
    g = TimeGrid(1.0, 6)
    eta = SingularControlPath(g, rng.uniform(0, 1, (6, 1)), rng.uniform(0, 1, 1))
    xi = SingularControlPath(g, rng.uniform(0, 1, (6, 1)), rng.uniform(0, 1, 1))
    ea = convex_perturbation(eta, xi, alpha)
    assert metric_d2(ea, eta) == pytest.approx(alpha * metric_d2(xi, eta), abs=1e-12)


def _random_pair(rng, g):
    u = StrictControlPath.from_indices(g, CS, rng.integers(0, 3, g.steps))
    eta = SingularControlPath(g, rng.exponential(0.3, (g.steps, 1)) * (rng.random((g.steps, 1)) < 0.3),
                              rng.exponential(0.5, 1))
    return u, eta


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000))
def test_metric_axioms(seed):
    rng = np.random.default_rng(seed)
    g = TimeGrid(1.0, 12)
    (u, e), (v, x), (w, z) = (_random_pair(rng, g) for _ in range(3))
    for d in (lambda a, b: metric_d1(a[0], b[0]), lambda a, b: metric_d2(a[1], b[1]),
              lambda a, b: metric_d(a[0], a[1], b[0], b[1])):
        p, q, r = (u, e), (v, x), (w, z)
        assert d(p, q) == pytest.approx(d(q, p))
        assert d(p, r) <= d(p, q) + d(q, r) + 1e-12
        assert d(p, p) == 0.0


def test_csv_and_json_roundtrip():
    g = TimeGrid(1.0, 4)
    u = StrictControlPath.from_indices(g, CS, [0, 2, 1, 0])
    eta = SingularControlPath(g, [[0.0], [0.25], [0.0], [1.0]], [0.5])
    q = RelaxedControlPath(g, [[0.2, 0.3, 0.5], [1, 0, 0], [0, 1, 0], [0.5, 0, 0.5]], CS)
    assert strict_from_csv(path_to_csv(u), CS) == u
    assert singular_from_csv(path_to_csv(eta)) == eta
    assert relaxed_from_csv(path_to_csv(q)) == q
    for p in (u, eta, q):
        assert path_from_json(path_to_json(p)) == p
    lines = path_to_csv(eta).splitlines()
    assert lines[1] == "0.0,0.0,0.5"
    assert path_to_csv(q).splitlines()[0] == "t_left,t_right,-1.0,0.0,1.0"


def test_resampling():
    coarse = TimeGrid(1.0, 4)
    fine = TimeGrid(1.0, 16)
    u = StrictControlPath.from_indices(coarse, CS, [0, 1, 2, 1])
    assert np.array_equal(u.resample(fine).indices, np.repeat([0, 1, 2, 1], 4))
    eta = SingularControlPath(coarse, [[0.0], [1.0], [0.0], [0.5]], [0.2])
    ef = eta.resample(fine)
    assert ef.increments[4, 0] == 1.0 and ef.increments[12, 0] == 0.5 and ef.total[0] == pytest.approx(1.7)
    q = RelaxedControlPath.uniform_over(coarse, CS, [[-1.0], [1.0]])
    assert np.allclose(q.resample(TimeGrid(1.0, 2)).weights, [[0.5, 0, 0.5]] * 2)
