import math

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings
from hypothesis import strategies as st

from rcm.env import (Distribution, Environment, EnvironmentLaw, LatticeDomain, build_environment,
                     build_trap_environment)
from rcm.errors import DegenerateVertexError, PreconditionError
from rcm.heatkernel import (IsoperimetricProfile, confinement_probability, diagonal_lower_bound,
                            diffusive_bound_stats, exact_kernel, isoperimetric_profile, lazify,
                            morris_peres_integral, morris_peres_threshold, return_probability_series,
                            trap_decay_experiment, uniformized_kernel, verify_morris_peres)

from conftest import small_envs

UNIFORM = EnvironmentLaw.iid(Distribution("uniform", (0.5, 2.0)))


def test_two_step_kernel_closed_form():
    # path 0 - 1 - 2 with weights 1, 3
    env = Environment(LatticeDomain((3,), "free"), [1.0, 3.0])
    mu = exact_kernel(env, 1, 2).probs
    # from 1: to 0 w.p. 1/4, to 2 w.p. 3/4; both return to 1 surely
    assert np.allclose(mu, [0.0, 1.0, 0.0])
    mu0 = exact_kernel(env, 0, 2).probs
    assert np.allclose(mu0, [0.25, 0.0, 0.75])


@pytest.mark.parametrize("env", small_envs())
def test_kernel_is_stochastic_and_reversible(env):
    live = np.flatnonzero(env.pi > 0)
    x, y = int(live[0]), int(live[-1])
    mx = exact_kernel(env, x, 4).probs
    my = exact_kernel(env, y, 4).probs
    assert mx.sum() == pytest.approx(1.0)
    assert env.pi[x] * mx[y] == pytest.approx(env.pi[y] * my[x], abs=1e-14)


def test_degenerate_start_rejected():
    env = Environment(LatticeDomain((3,), "free"), [0.0, 1.0])
    with pytest.raises(DegenerateVertexError):
        exact_kernel(env, 0, 2)


def test_return_series_on_unit_lattice():
    env = build_environment(EnvironmentLaw.constant(1.0), LatticeDomain((201,)))
    r = return_probability_series(env, 100, 40)
    n = r["n"]
    # simple random walk on Z: P^{2n}(0,0) = C(2n, n) / 4^n
    exact = np.array([math.comb(2 * k, k) / 4.0**k for k in n])
    assert np.allclose(r["p2n"], exact, rtol=1e-12)
    assert r["slope"] == pytest.approx(-0.5, abs=0.02)


@settings(max_examples=20)
@given(st.integers(0, 10**6), st.integers(1, 12))
def test_diagonal_lower_bound_chain(seed, n):
    env = build_environment(UNIFORM, LatticeDomain((15, 15), "absorbing"), seed)
    r = diagonal_lower_bound(env, (7, 7), n)
    assert r["p2n"] >= r["middle"] - 1e-15
    assert r["middle"] >= r["bound"] - 1e-15
    assert r["bound"] > 0


def test_trap_rows_are_lower_bounds():
    dom = LatticeDomain((8, 8), "absorbing")
    env = build_trap_environment(dom, 1 / 64, (2, 4), origin=(4, 4))
    res = trap_decay_experiment(env, [4, 8, 16, 64], (2, 4), origin=(4, 4))
    for row in res["rows"]:
        assert row["bound"] <= row["p2n"] * (1 + 1e-12)
    late = res["rows"][-1]
    assert late["p2n"] > late["control"]
    assert res["path_length"] == 0  # access vertex (4, 4) is the origin


def test_confinement_probability():
    assert confinement_probability(0.0, 5) == 1.0
    assert confinement_probability(1.0, 1, 2) == pytest.approx((1 / 4) ** 2)


def test_cycle_profile():
    env = build_environment(EnvironmentLaw.constant(1.0), LatticeDomain((8,)))
    prof = isoperimetric_profile(env)
    # connected sets are arcs: k vertices, volume 2k, two boundary edges
    k = np.arange(1, 8)
    assert np.allclose(prof(2.0 * k), 1.0 / k)
    assert prof(16.0) == 0.0
    assert np.isinf(prof(1.0))
    lazy = isoperimetric_profile(env, laziness=0.25)
    assert np.allclose(lazy.values, 0.75 * prof.values)


def test_profile_cutoff():
    env = build_environment(EnvironmentLaw.constant(1.0), LatticeDomain((5, 5)))
    with pytest.raises(PreconditionError):
        isoperimetric_profile(env)
    greedy = isoperimetric_profile(env, allow_fallback=True)
    assert not greedy.exact
    # a greedy set gives an upper bound; a single vertex always has ratio 1
    assert greedy(4.0) <= 1.0


def test_step_integral_exact():
    prof = IsoperimetricProfile(np.array([1.0, 2.0, 4.0]), np.array([1.0, 0.5, 0.25]))
    # over [1, 8]: log 2 / 1 + log 2 / 0.25 + log 2 / 0.0625
    assert morris_peres_integral(prof, 1.0, 8.0) == pytest.approx(math.log(2) * (1 + 4 + 16))
    smooth = IsoperimetricProfile.from_function(lambda r: r**-0.5, 0.5, 100.0)
    # integral of dr / (r * r^-1) = hi - lo
    assert morris_peres_integral(smooth, 1.0, 50.0) == pytest.approx(49.0, rel=1e-6)
    assert morris_peres_threshold(prof, 0.25, 1.0, 1.0) == 1


@pytest.mark.parametrize("side,c", [(4, 10.0), (3, 20.0)])
def test_morris_peres_bound_holds(side, c):
    env = build_environment(EnvironmentLaw.constant(c), LatticeDomain((side, side)))
    r = verify_morris_peres(env, gamma=0.25, eps=0.01)
    assert r["checked"] > 0
    assert r["holds"]


def test_lazify():
    env = build_environment(EnvironmentLaw.constant(1.0), LatticeDomain((4,)))
    P = lazify(env, 0.5).toarray()
    assert np.allclose(np.diag(P), 0.5)
    assert np.allclose(P.sum(axis=1), 1)


def test_uniformized_against_expm():
    env = build_environment(UNIFORM, LatticeDomain((5, 5)), 2)
    L = (env.weight_matrix.toarray() - np.diag(env.pi))
    K = uniformized_kernel(env, [0, 7], [0.0, 0.5, 3.0], trunc=1e-14)
    for ti, t in enumerate([0.0, 0.5, 3.0]):
        E = scipy.linalg.expm(t * L)
        assert np.allclose(K[ti, 0], E[0], atol=1e-12)
        assert np.allclose(K[ti, 1], E[7], atol=1e-12)


def test_diffusive_stats_exact_vs_monte_carlo():
    env = build_environment(UNIFORM, LatticeDomain((21, 21)), 3)
    ex = diffusive_bound_stats(env, 1, [1.0, 4.0])
    mc = diffusive_bound_stats(env, 1, [1.0, 4.0], method="monte_carlo", n_walks=4000, seed=1)
    assert mc["sup_displacement"] == pytest.approx(ex["sup_displacement"], rel=0.05)
    assert ex["sup_displacement"] < 5 and ex["sup_return"] < 5
