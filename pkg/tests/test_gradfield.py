import numpy as np
import pytest
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from hypothesis import given
from hypothesis import strategies as st

from rcm.env import Distribution, EnvironmentLaw, LatticeDomain, build_environment, make_rng
from rcm.errors import ConstructionError, PreconditionError
from rcm.fields import MacroscopicProfile
from rcm.gradfield import (MixtureSpec, convexity_scan, exact_functional_variance, gff_variance_target,
                           gibbs_sweep, green_pairing_target, kappa_posterior, kappa_step, pairing_weights,
                           phi_epsilon, potential_eval, reflect_law, sample_gaussian_field)

UNIFORM = EnvironmentLaw.iid(Distribution("uniform", (0.5, 2.0)))


def test_potential_basics():
    spec = MixtureSpec((1.0, 4.0), (0.5, 0.5))
    assert potential_eval(spec, 0.0) == pytest.approx(0.0, abs=1e-15)
    single = MixtureSpec((2.5,), (1.0,))
    eta = np.linspace(-3, 3, 7)
    assert np.allclose(potential_eval(single, eta), 1.25 * eta**2)


@given(st.floats(0.0, 10.0))
def test_potential_even_and_increasing(x):
    spec = MixtureSpec((1.0, 9.0, 0.2), (0.3, 0.5, 0.2))
    assert potential_eval(spec, x) == pytest.approx(potential_eval(spec, -x), rel=1e-14, abs=1e-300)
    assert potential_eval(spec, x + 0.01) >= potential_eval(spec, x)


def test_convexity_certificates():
    assert convexity_scan(MixtureSpec((1.0, 4.0), (0.5, 0.5)))["convex"]
    scan = convexity_scan(MixtureSpec((1.0, 9.0), (0.5, 0.5)))
    assert not scan["convex"]
    assert scan["min_second_difference"] < 0
    # V is concave on two symmetric bands, roughly 0.5 <= |eta| <= 1
    v = scan["violations"]
    assert np.allclose(np.sort(v), np.sort(-v))
    assert 0.4 < np.min(np.abs(v)) < 0.6
    assert 0.9 < np.max(np.abs(v)) < 1.1
    assert convexity_scan(MixtureSpec((3.0,), (1.0,)))["convex"]


def test_mixture_validation():
    with pytest.raises(ConstructionError):
        MixtureSpec((1.0, 2.0), (0.5, 0.6))
    with pytest.raises(ConstructionError):
        MixtureSpec((0.0, 2.0), (0.5, 0.5))
    with pytest.raises(ConstructionError):
        MixtureSpec((1.0, 2.0), (1.0,))


@given(st.floats(-4.0, 4.0))
def test_posterior_closed_form(eta):
    spec = MixtureSpec((1.0, 4.0), (0.3, 0.7))
    p = kappa_posterior(spec, eta)[0]
    w = np.array([0.3 * np.exp(-0.5 * eta**2), 0.7 * np.exp(-2.0 * eta**2)])
    assert np.allclose(p, w / w.sum(), rtol=1e-12)


def test_kappa_step_frequency_at_zero():
    spec = MixtureSpec((1.0, 4.0), (0.3, 0.7))
    draws = kappa_step(spec, np.zeros(100_000), make_rng(1, 0))
    assert np.mean(draws == 4.0) == pytest.approx(0.7, abs=4 * np.sqrt(0.21 / 1e5))
    assert np.mean(draws == 1.0) + np.mean(draws == 4.0) == 1.0


def test_cycle_increment_variance():
    L = 8
    env = build_environment(EnvironmentLaw.constant(1.0), LatticeDomain((L,)))
    fs = sample_gaussian_field(env, seed=3, n_samples=10_000)
    inc = np.array([f.values[1] - f.values[0] for f in fs])
    exact = (L - 1) / L  # effective resistance across one edge of the cycle
    se = exact * np.sqrt(2.0 / len(inc))
    assert abs(np.var(inc) - exact) < 3 * se


def test_covariance_matches_poisson_solve():
    env = build_environment(UNIFORM, LatticeDomain((5, 5)), 4)
    fs = np.array([f.values for f in sample_gaussian_field(env, seed=2, n_samples=20_000)])
    A = env.laplacian.tocsc()[1:, 1:]
    pairs = [(1, 1), (3, 12), (7, 24), (12, 12), (18, 6), (24, 2)]
    for x, y in pairs:
        e = np.zeros(24)
        e[y - 1] = 1.0
        cov = spla.spsolve(A, e)[x - 1]
        prod = fs[:, x] * fs[:, y]
        se = prod.std() / np.sqrt(len(prod))
        assert abs(prod.mean() - cov) < 4 * se


def test_gauges():
    env = build_environment(UNIFORM, LatticeDomain((6, 6)), 1)
    pinned = sample_gaussian_field(env, seed=5, pin=(2, 3))
    assert pinned.values[env.domain.index((2, 3))] == 0.0
    zm = sample_gaussian_field(env, seed=5, gauge="zero_mean", pin=(2, 3))
    assert abs(zm.values.mean()) < 1e-13
    assert np.allclose(zm.gradients(), pinned.gradients())
    box = build_environment(UNIFORM, LatticeDomain((6, 6), "absorbing"), 1)
    bd = sample_gaussian_field(box, seed=5, gauge="boundary")
    assert np.all(bd.values[box.domain.absorbing] == 0.0)
    with pytest.raises(PreconditionError):
        sample_gaussian_field(env, gauge="boundary")
    with pytest.raises(PreconditionError):
        sample_gaussian_field(env, gauge="free")


def test_sampler_rejects_disconnected_graph():
    env = build_environment(EnvironmentLaw.percolation(0.2), LatticeDomain((6, 6)), 0)
    with pytest.raises(PreconditionError):
        sample_gaussian_field(env)


def test_phi_epsilon_linear_and_gauge_free():
    dom = LatticeDomain((16, 16))
    f = MacroscopicProfile("gaussian", (0.5, 0.5), 0.1, support=0.5)
    g = MacroscopicProfile("dipole", (0.5, 0.5), 0.1, support=0.5)
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=256), rng.normal(size=256)
    eps = 1 / 16
    assert phi_epsilon(2 * a - b, f, eps, dom) == pytest.approx(2 * phi_epsilon(a, f, eps, dom) - phi_epsilon(b, f, eps, dom))
    assert phi_epsilon(np.full(256, 3.7), f, eps, dom) == pytest.approx(0.0, abs=1e-12)
    assert phi_epsilon(a, f.scaled(0.0), eps, dom) == 0.0
    assert phi_epsilon(a, g, eps, dom) == pytest.approx(phi_epsilon(a + 5.0, g, eps, dom))
    w = pairing_weights(f, dom, eps)
    assert abs(w.sum()) < 1e-12


def test_target_scales_quadratically():
    f = MacroscopicProfile("gaussian", (0.5, 0.5), 0.1)
    t1 = gff_variance_target(f, np.eye(2), 1.0)
    assert gff_variance_target(f.scaled(3.0), np.eye(2), 1.0) == pytest.approx(9 * t1, rel=1e-12)
    assert gff_variance_target(f, 2 * np.eye(2), 1.0) == pytest.approx(t1 / 2, rel=1e-12)


def _fd_target(f, q, period, n):
    """Real-space check: solve -(q11 u_xx + q22 u_yy) = f - mean f by finite differences."""
    h = period / n
    x = (np.arange(n) + 0.5) * h
    X, Y = np.meshgrid(x, x, indexing="ij")
    fv = f(np.stack([X, Y], axis=-1), period)
    fv -= fv.mean()
    D = sp.diags([np.ones(n - 1), -2 * np.ones(n), np.ones(n - 1)], [-1, 0, 1], format="lil")
    D[0, n - 1] = D[n - 1, 0] = 1.0
    D = D.tocsr() / h**2
    I = sp.identity(n)
    A = -(q[0, 0] * sp.kron(D, I) + q[1, 1] * sp.kron(I, D))
    A = A.tocsc()[1:, 1:]
    u = np.zeros(n * n)
    u[1:] = spla.spsolve(A, fv.ravel()[1:])
    u -= u.mean()
    return h**2 * fv.ravel() @ u


def test_target_against_finite_differences():
    f = MacroscopicProfile("gaussian", (0.4, 0.6), 0.12)
    q = np.diag([1.0, 2.0])
    assert gff_variance_target(f, q, 1.0) == pytest.approx(_fd_target(f, q, 1.0, 128), rel=5e-3)


def test_pairing_target_polarization():
    f = MacroscopicProfile("gaussian", (0.4, 0.5), 0.1)
    g = MacroscopicProfile("dipole", (0.6, 0.5), 0.1)
    q = np.array([[1.2, 0.1], [0.1, 0.9]])
    a = green_pairing_target(f, g, q, 1.0)
    b = green_pairing_target(f, g, q, 1.0, polarize=False)
    assert a == pytest.approx(b, rel=1e-10)
    assert green_pairing_target(f, f, q, 1.0) == pytest.approx(gff_variance_target(f, q, 1.0), rel=1e-12)


def test_exact_variance_against_draws():
    env = build_environment(UNIFORM, LatticeDomain((8, 8)), 2)
    f = MacroscopicProfile("dipole", (0.5, 0.5), 0.1, support=0.5)
    w = pairing_weights(f, env.domain, 1 / 8)
    v = exact_functional_variance(env, w)
    fs = sample_gaussian_field(env, seed=1, n_samples=4000)
    x = np.array([fl.values @ w for fl in fs])
    assert np.var(x) == pytest.approx(v, rel=4 * np.sqrt(2 / 4000))
    with pytest.raises(PreconditionError):
        exact_functional_variance(env, np.ones(64))


def test_reflect_law():
    assert reflect_law(UNIFORM)(np.array([0.5, 2.0])).tolist() == [2.0, 0.5]
    assert reflect_law(EnvironmentLaw.iid(Distribution("two_point", (1.0, 0.3, 2.0)))) is None
    assert reflect_law(EnvironmentLaw.iid(Distribution("log_uniform", (0.1, 10.0)))) is None


def test_single_atom_chain_keeps_kappa():
    spec = MixtureSpec((2.0,), (1.0,))
    dom = LatticeDomain((6, 6))
    kappa = build_environment(EnvironmentLaw.constant(2.0), dom)
    field = sample_gaussian_field(kappa, seed=0)
    for s in range(5):
        kappa, field = gibbs_sweep(field, spec, kappa, seed=1, sweep=s)
        assert np.all(kappa.values == 2.0)


def test_gibbs_box_keeps_boundary():
    spec = MixtureSpec((1.0, 9.0), (0.5, 0.5))
    dom = LatticeDomain((7, 7), "free")
    kappa = build_environment(EnvironmentLaw.constant(1.0), dom)
    from rcm.gradfield import GradientField
    init = GradientField(dom, dom.all_coords[:, 0].astype(float), "boundary", None)
    k2, f2 = gibbs_sweep(init, spec, kappa, seed=3)
    outer = dom.outer_layer
    assert np.array_equal(f2.values[outer], init.values[outer])
    assert not np.array_equal(f2.values[~outer], init.values[~outer])
    assert set(np.unique(k2.values)) <= {1.0, 9.0}
    with pytest.raises(PreconditionError):
        gibbs_sweep(init, spec, build_environment(EnvironmentLaw.constant(2.0), dom))
