import numpy as np
import pytest

from rcm.env import Distribution, Environment, EnvironmentLaw, LatticeDomain, build_environment
from rcm.errors import DegenerateVertexError
from rcm.walk import (blowup_statistic, first_hit, local_drift, random_starts, run_batch, scaled_endpoint_samples,
                      simulate_csrw, simulate_discrete, simulate_vsrw, vsrw_batch)

LAW = EnvironmentLaw.iid(Distribution("uniform", (0.5, 2.0)))


@pytest.fixture(scope="module")
def torus():
    return build_environment(LAW, LatticeDomain((10, 10)), 4)


def test_paths_move_along_positive_edges(torus):
    path = simulate_discrete(torus, (3, 3), 500, seed=1)
    dom = torus.domain
    for a, b in zip(path.vertices[:-1], path.vertices[1:]):
        assert torus.conductance(int(a), int(b)) > 0
    steps = np.diff(path.displacement, axis=0)
    assert np.all(np.abs(steps).sum(axis=1) == 1)
    # cover displacement agrees with the torus position
    end = (dom.coords(path.start) + path.displacement[-1]) % np.array(dom.sides)
    assert tuple(end) == tuple(dom.coords(path.vertices[-1]))


def test_reproducible(torus):
    a = simulate_discrete(torus, 0, 200, seed=7, walk_index=3)
    b = simulate_discrete(torus, 0, 200, seed=7, walk_index=3)
    c = simulate_discrete(torus, 0, 200, seed=7, walk_index=4)
    assert np.array_equal(a.vertices, b.vertices)
    assert not np.array_equal(a.vertices, c.vertices)


def test_batch_equals_single_walks(torus):
    starts = np.array([0, 5, 17, 42])
    pos, disp = run_batch(torus, starts, 300, seed=2)
    for w, s in enumerate(starts):
        path = simulate_discrete(torus, int(s), 300, seed=2, walk_index=w)
        assert pos[w] == path.vertices[-1]
        assert np.array_equal(disp[w], path.displacement[-1])


def test_continuous_walks_share_jump_chain(torus):
    d = simulate_discrete(torus, 0, 2000, seed=5)
    c = simulate_csrw(torus, 0, 50.0, seed=5)
    v = simulate_vsrw(torus, 0, 50.0, seed=5)
    for p in (c, v):
        k = len(p.vertices)
        assert np.array_equal(p.vertices, d.vertices[:k])
        assert np.all(np.diff(p.times) > 0)
        assert p.times[-1] <= 50.0


def test_vsrw_batch_matches_single(torus):
    pos, disp = vsrw_batch(torus, np.array([3, 3, 8]), 7.5, seed=9)
    for w, s in enumerate([3, 3, 8]):
        p = simulate_vsrw(torus, s, 7.5, seed=9, walk_index=w)
        assert pos[w] == p.vertices[-1]
        assert np.array_equal(disp[w], p.displacement[-1])


def test_degenerate_start():
    env = Environment(LatticeDomain((3,), "free"), [0.0, 1.0])
    with pytest.raises(DegenerateVertexError):
        simulate_discrete(env, 0, 5)


def test_absorbed_walk_stops():
    env = build_environment(EnvironmentLaw.constant(1.0), LatticeDomain((5,), "absorbing"))
    path = simulate_discrete(env, 2, 10_000, seed=0)
    assert path.absorbed
    assert env.domain.absorbing[path.vertices[-1]]


def test_local_drift_closed_form():
    dom = LatticeDomain((5,), "free")
    env = Environment(dom, [1.0, 1.0, 3.0, 1.0])
    # at x=2: left weight 1, right weight 3
    assert np.allclose(local_drift(env, 2), [0.5])
    assert np.allclose(local_drift(build_environment(EnvironmentLaw.constant(2.0), LatticeDomain((6, 6))), 7), 0)


def test_blowup_statistic(torus):
    p = simulate_discrete(torus, 0, 50, seed=1)
    b = blowup_statistic(p, torus)
    assert np.allclose(b, np.cumsum(1 / torus.pi[p.vertices]))


def test_random_starts_follow_pi():
    dom = LatticeDomain((3,), "free")
    env = Environment(dom, [1.0, 3.0])  # pi = (1, 4, 3)
    s = random_starts(env, 40_000, seed=1)
    freq = np.bincount(s, minlength=3) / len(s)
    assert np.allclose(freq, [1 / 8, 4 / 8, 3 / 8], atol=0.01)


def test_first_hit_matches_gamblers_ruin():
    # path 0..6 with conductances w_i; P_x(hit 6 before 0) = sum_{i<x} 1/w_i / sum 1/w_i
    w = np.array([1.0, 2.0, 0.5, 1.0, 3.0, 1.0])
    env = Environment(LatticeDomain((7,), "free"), w)
    A = np.zeros(7, bool)
    A[0] = True
    B = np.zeros(7, bool)
    B[6] = True
    res = first_hit(env, 2, A, B, 20_000, seed=3)
    p = np.mean(res == 1)
    exact = np.sum(1 / w[:2]) / np.sum(1 / w)
    se = np.sqrt(exact * (1 - exact) / 20_000)
    assert abs(p - exact) < 4 * se
    assert np.all(res >= 0)


def test_scaled_samples_shape(torus):
    x = scaled_endpoint_samples(torus, None, 16, 50, seed=1)
    assert x.shape == (50, 2)
    y = scaled_endpoint_samples(torus, (0, 0), 16, 50, seed=1)
    assert y.shape == (50, 2)
