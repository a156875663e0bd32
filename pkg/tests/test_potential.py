import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rcm.env import Distribution, Environment, EnvironmentLaw, LatticeDomain, build_environment
from rcm.errors import ConsistencyError, PreconditionError, SolverError
from rcm.potential import (DirichletProblem, box_conductance, box_mask, conjugate_gradient, dirichlet_energy,
                           effective_resistance, escape_conductance, greens_function, plate_potential,
                           relaxation_sweep, solve_dirichlet, solve_poisson)

from conftest import dense_laplacian, small_envs

METHODS = ("conjugate_gradient", "relaxation", "direct")


def dense_resistance(env, s, t):
    A = dense_laplacian(env)
    n = len(A)
    keep = [i for i in range(n) if i != t]
    Ar = A[np.ix_(keep, keep)]
    rhs = np.zeros(n - 1)
    rhs[keep.index(s)] = 1.0
    return float(np.linalg.solve(Ar, rhs)[keep.index(s)])


def test_series_resistance():
    w = np.array([1.0, 2.0, 0.5, 4.0])
    env = Environment(LatticeDomain((5,), "free"), w)
    for m in METHODS:
        assert effective_resistance(env, 0, 4, m) == pytest.approx(np.sum(1 / w), rel=1e-9)


def test_cycle_resistance():
    env = build_environment(EnvironmentLaw.constant(1.0), LatticeDomain((4,)))
    assert effective_resistance(env, 0, 1) == pytest.approx(0.75, abs=1e-12)
    assert effective_resistance(env, 0, 2) == pytest.approx(1.0, abs=1e-12)


def test_ladder_against_dense():
    env = build_environment(EnvironmentLaw.iid(Distribution("uniform", (0.5, 2.0))), LatticeDomain((6, 5), "free"), 8)
    for m in METHODS:
        assert effective_resistance(env, (0, 0), (5, 4), m) == pytest.approx(dense_resistance(env, 0, 29), rel=1e-8)


def test_disconnected_is_inf():
    env = Environment(LatticeDomain((4,), "free"), [1.0, 0.0, 1.0])
    assert effective_resistance(env, 0, 3) == np.inf
    assert escape_conductance(env, 0, 2) == 0.0


def test_sink_set_vs_tuple():
    env = build_environment(EnvironmentLaw.constant(1.0), LatticeDomain((5, 5), "free"))
    single = effective_resistance(env, (2, 2), (0, 0))
    both = effective_resistance(env, (2, 2), [(0, 0), (4, 4)])
    assert both < single


@given(st.integers(0, 10**6), st.integers(0, 23), st.floats(1.0, 5.0))
def test_rayleigh_monotonicity(seed, edge, factor):
    env = build_environment(EnvironmentLaw.iid(Distribution("uniform", (0.5, 2.0))), LatticeDomain((4, 4), "free"),
                            seed)
    vals = env.values.copy()
    vals[edge] *= factor
    stronger = env.with_values(vals)
    r0 = effective_resistance(env, 0, 15, "direct")
    r1 = effective_resistance(stronger, 0, 15, "direct")
    assert r1 <= r0 * (1 + 1e-12)


@pytest.mark.parametrize("env", small_envs())
def test_relaxation_never_raises_energy(env):
    dom = env.domain
    rng = np.random.default_rng(0)
    f = rng.normal(size=dom.n_vertices)
    A = ~dom.outer_layer if not dom.periodic else np.arange(dom.n_vertices) % 3 != 0
    A &= env.pi > 0
    e = dirichlet_energy(env, f)
    for _ in range(20):
        f = relaxation_sweep(env, f, A)
        e2 = dirichlet_energy(env, f)
        assert e2 <= e + 1e-12
        e = e2


@pytest.mark.parametrize("env", small_envs())
def test_maximum_principle(env):
    dom = env.domain
    interior = (~dom.outer_layer if not dom.periodic else np.arange(dom.n_vertices) % 4 != 0) & (env.pi > 0)
    from rcm.potential import anchored
    interior &= anchored(env, interior)
    g = np.random.default_rng(1).uniform(-2, 3, dom.n_vertices)
    sol = solve_dirichlet(DirichletProblem(env, interior, g), "direct")
    bd = g[~interior]
    assert sol.values[interior].max() <= bd.max() + 1e-12
    assert sol.values[interior].min() >= bd.min() - 1e-12


def test_solvers_agree():
    env = build_environment(EnvironmentLaw.iid(Distribution("log_uniform", (0.1, 10.0))), LatticeDomain((12, 12), "free"),
                            2)
    interior = ~env.domain.outer_layer
    g = env.domain.all_coords[:, 0].astype(float)
    sols = [solve_dirichlet(DirichletProblem(env, interior, g), m, 1e-11).values for m in METHODS]
    assert np.allclose(sols[0], sols[1], atol=1e-9)
    assert np.allclose(sols[0], sols[2], atol=1e-9)
    L = -env.laplacian
    assert np.max(np.abs((L @ sols[0])[interior])) < 1e-9


def test_solver_cap_raises():
    env = build_environment(EnvironmentLaw.constant(1.0), LatticeDomain((30, 30), "free"))
    interior = ~env.domain.outer_layer
    g = env.domain.all_coords[:, 0].astype(float)
    with pytest.raises(SolverError):
        solve_dirichlet(DirichletProblem(env, interior, g), "conjugate_gradient", max_iter=3)
    with pytest.raises(SolverError):
        solve_dirichlet(DirichletProblem(env, interior, g), "relaxation", max_iter=5)


def test_unanchored_interior_rejected():
    env = Environment(LatticeDomain((4,), "free"), [0.0, 1.0, 0.0])
    interior = np.array([False, True, True, False])
    with pytest.raises(PreconditionError):
        solve_dirichlet(DirichletProblem(env, interior, 0.0))


def test_conjugate_gradient_small_spd():
    import scipy.sparse as sp
    A = sp.csr_matrix(np.array([[4.0, 1.0], [1.0, 3.0]]))
    x, res, _ = conjugate_gradient(A, np.array([1.0, 2.0]), 1e-14)
    assert np.allclose(x, [1 / 11, 7 / 11])


def test_plate_symmetry():
    env = build_environment(EnvironmentLaw.constant(1.0), LatticeDomain((9, 9), "free"))
    sol = plate_potential(env, 4)
    f = sol.values.reshape(9, 9)
    # homogeneous slab with free sides: linear profile in the height
    assert np.allclose(f, np.broadcast_to(np.linspace(-1, 1, 9), (9, 9)), atol=1e-9)


def test_box_conductance_homogeneous():
    # f = -x_1 is harmonic; energy = number of edges along axis 0 times 1
    env = build_environment(EnvironmentLaw.constant(1.0), LatticeDomain((7, 7), "free"))
    assert box_conductance(env, 3) == pytest.approx(6 * 7, rel=1e-10)
    with pytest.raises(PreconditionError):
        box_conductance(env, 2)


def test_escape_conductance_small_box():
    env = build_environment(EnvironmentLaw.constant(1.0), LatticeDomain((5,), "free"))
    # from the centre, box radius 2 has vertices 1..3; exits at 0 and 4 through unit edges, two in parallel
    assert escape_conductance(env, 2, 2) == pytest.approx(1.0, rel=1e-12)
    assert box_mask(env, 2, 2).sum() == 3


def test_greens_function_against_dense():
    env = build_environment(EnvironmentLaw.iid(Distribution("uniform", (0.5, 2.0))), LatticeDomain((6, 6), "free"), 3)
    lam = ~env.domain.outer_layer
    idx = np.flatnonzero(lam)
    A = dense_laplacian(env)[np.ix_(idx, idx)]
    G = np.linalg.inv(A)
    x, y = idx[2], idx[7]
    assert greens_function(env, lam, x, y) == pytest.approx(G[2, 7] * env.pi[y], rel=1e-10)


def test_poisson_torus_and_absorbing():
    env = build_environment(EnvironmentLaw.iid(Distribution("uniform", (0.5, 2.0))), LatticeDomain((6, 6)), 1)
    rho = np.zeros(36)
    rho[3], rho[20] = 1.0, -1.0
    phi = solve_poisson(env, rho).values
    assert np.allclose(-env.laplacian @ phi, rho, atol=1e-9)
    assert phi[0] == 0.0
    with pytest.raises(ConsistencyError):
        solve_poisson(env, np.ones(36))
    box = build_environment(EnvironmentLaw.constant(1.0), LatticeDomain((6, 6), "absorbing"))
    rho = np.zeros(36)
    rho[box.domain.index((2, 2))] = 1.0
    phi = solve_poisson(box, rho).values
    inner = ~box.domain.absorbing
    assert np.allclose((-box.laplacian @ phi)[inner], rho[inner], atol=1e-9)
    assert np.all(phi[box.domain.absorbing] == 0)
