"""Gaussian gradient fields, mixture potentials and the GFF scaling functional.

Given conductances kappa, the field phi has density proportional to
exp(-(1/2) sum_e kappa_e (grad_e phi)^2), i.e. covariance (-L_kappa)^{-1} on
a gauge-fixed subspace. Samples are exact: with B the edge-vertex incidence
matrix and xi iid N(0,1) per edge,

    phi = (-L_kappa)^{-1} B^T sqrt(kappa) xi

has covariance (-L)^{-1} B^T K B (-L)^{-1} = (-L)^{-1} because B^T K B = -L.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy import stats
from scipy.special import logsumexp

from .corrector import DiffusionMatrix
from .env import Environment, EnvironmentLaw, LatticeDomain, build_environment, derive_seed, make_rng
from .errors import ConstructionError, PreconditionError
from .fields import MacroscopicProfile, cell_averages, cell_integrals, check_support
from .potential import anchored, spd_factor

GAUGES = ("pinned", "zero_mean", "boundary")
_FIELD, _KAPPA = 30, 31


@dataclass(frozen=True)
class MixtureSpec:
    """rho = sum_i weights[i] * delta_{atoms[i]}."""

    atoms: tuple
    weights: tuple

    def __post_init__(self):
        a = tuple(float(x) for x in np.atleast_1d(self.atoms))
        w = tuple(float(x) for x in np.atleast_1d(self.weights))
        object.__setattr__(self, "atoms", a)
        object.__setattr__(self, "weights", w)
        if len(a) != len(w) or not a:
            raise ConstructionError("weights", "need one weight per atom")
        if min(a) <= 0:
            raise ConstructionError("atoms", "atoms must be positive")
        if min(w) < 0 or abs(sum(w) - 1.0) > 1e-12:
            raise ConstructionError("weights", f"weights must be nonnegative and sum to 1, got {sum(w)}")

    def to_dict(self) -> dict:
        return {"atoms": list(self.atoms), "weights": list(self.weights)}


def potential_eval(spec: MixtureSpec, eta):
    """V(eta) = -log sum_i p_i exp(-kappa_i eta^2 / 2)."""
    eta = np.asarray(eta, dtype=float)
    a = np.array(spec.atoms)
    with np.errstate(divide="ignore"):
        lw = np.log(np.array(spec.weights))
    v = -logsumexp(lw[:, None] - 0.5 * a[:, None] * eta.ravel()[None, :] ** 2, axis=0)
    return v.reshape(eta.shape) if eta.ndim else float(v[0])


def convexity_scan(spec: MixtureSpec, eta_max: float = 5.0, n: int = 20001) -> dict:
    """Midpoint-convexity check of V on a uniform grid of [-eta_max, eta_max].

    A violation is a grid point where V(x) > (V(x-h) + V(x+h)) / 2.
    """
    eta = np.linspace(-eta_max, eta_max, n)
    v = potential_eval(spec, eta)
    d2 = v[2:] - 2 * v[1:-1] + v[:-2]
    # ignore round-off: a real violation beats the local rounding scale
    tol = 64 * np.finfo(float).eps * np.maximum(1.0, np.abs(v[1:-1]))
    bad = d2 < -tol
    return {"convex": not bool(bad.any()), "violations": eta[1:-1][bad], "min_second_difference": float(d2.min())}


def kappa_posterior(spec: MixtureSpec, eta) -> np.ndarray:
    """P(kappa = atom_i | eta) proportional to p_i exp(-kappa_i eta^2 / 2), shape (len(eta), n_atoms)."""
    eta = np.atleast_1d(np.asarray(eta, dtype=float))
    a = np.array(spec.atoms)
    with np.errstate(divide="ignore"):
        lw = np.log(np.array(spec.weights))[None, :] - 0.5 * a[None, :] * eta[:, None] ** 2
    lw -= lw.max(axis=1, keepdims=True)
    w = np.exp(lw)
    return w / w.sum(axis=1, keepdims=True)


def kappa_step(spec: MixtureSpec, eta, rng: np.random.Generator) -> np.ndarray:
    """Independent draws of kappa_e given the gradients eta_e."""
    probs = kappa_posterior(spec, eta)
    cum = np.cumsum(probs, axis=1)
    cum[:, -1] = 2.0
    u = rng.random(len(probs))
    k = np.sum(u[:, None] >= cum, axis=1)
    return np.array(spec.atoms)[k]


@dataclass
class GradientField:
    domain: LatticeDomain
    values: np.ndarray
    gauge: str = "pinned"
    pin: int | None = 0

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.values, dtype=dtype)

    def gradients(self) -> np.ndarray:
        u, v, _ = self.domain.edges
        return self.values[v] - self.values[u]


def _incidence(env: Environment, cols: np.ndarray) -> sp.csr_matrix:
    """sqrt(kappa_e) (1_v - 1_u) for every edge, restricted to the columns cols."""
    u, v, _ = env.domain.edges
    n = env.domain.n_vertices
    s = np.sqrt(env.values)
    E = len(u)
    B = sp.csr_matrix((np.concatenate([s, -s]), (np.r_[np.arange(E), np.arange(E)], np.r_[v, u])),
                      shape=(E, n))
    return B[:, cols].tocsr()


class GaussianSampler:
    """Reusable factorization for repeated exact draws with fixed kappa.

    unknowns: boolean mask of resampled vertices; all others are held at
    the values passed to sample (zero by default).
    """

    def __init__(self, env: Environment, unknowns: np.ndarray):
        self.env = env
        self.idx = np.flatnonzero(unknowns)
        if np.any(env.values < 0):
            raise PreconditionError("conductances must be nonnegative")
        if not np.array_equal(anchored(env, unknowns), unknowns):
            raise PreconditionError("operator is singular: some resampled vertices are not tied to the gauge")
        L = env.laplacian.tocsr()
        self.A = L[self.idx][:, self.idx].tocsc()
        self.coupling = env.weight_matrix.tocsr()[self.idx]
        self.lu = spd_factor(self.A)
        self.B = _incidence(env, self.idx)

    def sample(self, rng: np.random.Generator, fixed=None) -> np.ndarray:
        n = self.env.domain.n_vertices
        out = np.zeros(n) if fixed is None else np.array(fixed, dtype=float)
        rhs = self.B.T @ rng.standard_normal(self.B.shape[0])
        if fixed is not None:
            rhs = rhs + self.coupling @ out  # conditional mean: harmonic extension
            rhs -= self.coupling[:, self.idx] @ out[self.idx]
        out[self.idx] = self.lu.solve(rhs)
        return out


def _gauge_setup(env: Environment, gauge: str, pin) -> tuple:
    dom = env.domain
    n = dom.n_vertices
    if gauge == "boundary":
        if dom.boundary != "absorbing":
            raise PreconditionError("boundary gauge needs an absorbing box")
        return ~dom.absorbing, None
    if gauge not in ("pinned", "zero_mean"):
        raise PreconditionError(f"unknown gauge {gauge!r}; choose from {GAUGES}")
    p = 0 if pin is None else dom.index(pin)
    mask = np.ones(n, dtype=bool)
    mask[p] = False
    return mask, p


def sample_gaussian_field(env: Environment, seed: int = 0, gauge: str = "pinned", pin=None,
                          n_samples: int | None = None, first_index: int = 0):
    """Exact draw(s) of phi with covariance (-L_kappa)^{-1}.

    gauge "pinned": phi(pin) = 0 (pin defaults to vertex 0).
    gauge "zero_mean": mean of phi is 0; same gradients as the pinned draw.
    gauge "boundary": phi = 0 on the absorbing layer of an absorbing box.
    Draw k uses the stream (seed, 30, first_index + k).
    """
    mask, p = _gauge_setup(env, gauge, pin)
    sampler = GaussianSampler(env, mask)
    out = []
    for k in range(1 if n_samples is None else n_samples):
        phi = sampler.sample(make_rng(seed, _FIELD, first_index + k))
        if gauge == "zero_mean":
            phi -= phi.mean()
        out.append(GradientField(env.domain, phi, gauge, p))
    return out[0] if n_samples is None else out


def gibbs_sweep(field: GradientField, spec: MixtureSpec, kappa: Environment, seed: int = 0,
                sweep: int = 0) -> tuple:
    """One alternating update: every kappa given phi, then phi given kappa.

    On a box (free or absorbing) the outer layer is the boundary: phi keeps
    its values there, only edges meeting the interior change kappa, and the
    interior is redrawn from the Gaussian law conditioned on the boundary
    values. On a torus the whole field is redrawn in the field's gauge.
    Streams: kappa step (seed, 31, sweep), phi step (seed, 30, sweep).
    """
    dom = field.domain
    if kappa.domain != dom:
        raise PreconditionError("field and kappa live on different domains")
    if not np.all(np.isin(kappa.values, spec.atoms)):
        raise PreconditionError("kappa takes values outside the mixture atoms")
    u, v, _ = dom.edges
    eta = field.values[v] - field.values[u]
    if dom.periodic:
        active = np.ones(len(u), dtype=bool)
    else:
        inner = ~dom.outer_layer
        active = inner[u] | inner[v]
    new_k = kappa.values.copy()
    new_k[active] = kappa_step(spec, eta[active], make_rng(seed, _KAPPA, sweep))
    kappa2 = kappa.with_values(new_k)
    rng = make_rng(seed, _FIELD, sweep)
    if dom.periodic:
        mask, p = _gauge_setup(kappa2, "zero_mean" if field.gauge == "zero_mean" else "pinned", field.pin)
        phi = GaussianSampler(kappa2, mask).sample(rng)
        if field.gauge == "zero_mean":
            phi -= phi.mean()
        return kappa2, GradientField(dom, phi, field.gauge, p)
    phi = GaussianSampler(kappa2, ~dom.outer_layer).sample(rng, fixed=field.values)
    return kappa2, GradientField(dom, phi, "boundary", None)


# ---------------------------------------------------------------------------
# scaling functional


def _torus_side(domain: LatticeDomain) -> int:
    if not domain.periodic or len(set(domain.sides)) != 1:
        raise PreconditionError("needs a cubic torus")
    return domain.sides[0]


def pairing_weights(profile: MacroscopicProfile, domain: LatticeDomain, eps: float, order: int = 6) -> np.ndarray:
    """w_x = eps^(1 - d/2) * (cell integral of f over eps(x + [0,1)^d), minus its mean)."""
    check_support(profile, domain.sides, eps)
    C = cell_integrals(profile, domain.sides, eps, order, periodic=domain.periodic)
    return eps ** (1 - domain.d / 2) * (C - C.mean())


def phi_epsilon(field, profile: MacroscopicProfile, eps: float, domain: LatticeDomain | None = None,
                order: int = 6):
    """eps^(1+d/2) * integral of phi_floor(x) f(eps x) dx with f shifted to zero integral.

    field may be a GradientField or an array of shape (V,) or (k, V).
    """
    if isinstance(field, GradientField):
        domain, vals = field.domain, field.values
    else:
        vals = np.asarray(field, dtype=float)
    w = pairing_weights(profile, domain, eps, order)
    return vals @ w


def _as_q(q, d: int) -> np.ndarray:
    q = np.asarray(q.q if isinstance(q, DiffusionMatrix) else q, dtype=float)
    if q.shape != (d, d):
        raise PreconditionError(f"q must be {d}x{d}")
    if np.linalg.eigvalsh(0.5 * (q + q.T)).min() <= 0:
        raise PreconditionError("q must be positive definite")
    return q


def fourier_coefficients(profile: MacroscopicProfile, period: float, n_grid: int = 256) -> tuple:
    """Fourier coefficients c_k of the periodized f and the wave vectors k.

    Computed from cell averages on an n_grid^d grid, with the sinc factor
    of the averaging divided out.
    """
    d = profile.d
    h = period / n_grid
    f = cell_averages(profile, (n_grid,) * d, h, order=4).reshape((n_grid,) * d)
    c = np.fft.fftn(f) / f.size
    k1 = 2 * np.pi * np.fft.fftfreq(n_grid, d=h)
    ks = np.meshgrid(*([k1] * d), indexing="ij")
    sinc = np.prod([np.sinc(kk * h / (2 * np.pi)) for kk in ks], axis=0)
    return c / sinc, ks


def _inverse_symbol(q: np.ndarray, ks) -> np.ndarray:
    d = len(ks)
    kqk = sum(q[i, j] * ks[i] * ks[j] for i in range(d) for j in range(d))
    kqk.flat[0] = np.inf  # drop the mean
    return 1.0 / kqk


def gff_variance_target(profile: MacroscopicProfile, q, period: float, n_grid: int = 256) -> float:
    """<f, (-Q)^{-1} f> on the torus of side period, Q f = sum q_ij d_i d_j f.

    Fourier evaluation sum_{k != 0} |c_k|^2 period^d / (k.qk); the k = 0
    mode (the mean of f) is dropped.
    """
    q = _as_q(q, profile.d)
    c, ks = fourier_coefficients(profile, period, n_grid)
    return float(period**profile.d * np.sum(np.abs(c) ** 2 * _inverse_symbol(q, ks)))


def green_pairing_target(f: MacroscopicProfile, g: MacroscopicProfile, q, period: float,
                         n_grid: int = 256, polarize: bool = True) -> float:
    """<g, (-Q)^{-1} f> on the torus of side period.

    With polarize=True the quadratic form is evaluated on f + g and f - g
    and combined; otherwise the bilinear sum is taken directly.
    """
    q = _as_q(q, f.d)
    cf, ks = fourier_coefficients(f, period, n_grid)
    cg, _ = fourier_coefficients(g, period, n_grid)
    inv = _inverse_symbol(q, ks)
    scale = period**f.d
    if polarize:
        plus = np.sum(np.abs(cf + cg) ** 2 * inv)
        minus = np.sum(np.abs(cf - cg) ** 2 * inv)
        return float(scale * 0.25 * (plus - minus))
    return float(scale * np.sum(np.real(cf * np.conj(cg)) * inv))


def exact_functional_variance(env: Environment, w: np.ndarray) -> float:
    """Var(sum_x w_x phi_x) = w . (-L_kappa)^+ w for zero-sum w on a connected torus."""
    n = env.domain.n_vertices
    A = env.laplacian.tocsr()[1:, 1:].tocsc()
    w = np.asarray(w, dtype=float)
    if abs(w.sum()) > 1e-10 * max(1.0, np.abs(w).sum()):
        raise PreconditionError("weights must sum to zero")
    x = np.zeros(n)
    x[1:] = spd_factor(A).solve(w[1:])
    return float(w @ x)


def anderson_darling_normal(x) -> dict:
    """Normality of x (mean and variance estimated) at the 1% level."""
    res = stats.anderson(np.asarray(x, dtype=float), "norm")
    crit = dict(zip(res.significance_level, res.critical_values))[1.0]
    return {"statistic": float(res.statistic), "critical_1pct": float(crit), "normal": bool(res.statistic < crit)}


def reflect_law(law: EnvironmentLaw):
    """Map kappa -> a + b - kappa preserving an iid law, or None if there is none.

    Pairing each sample with its reflection (antithetic sampling) cancels
    the first-order response of a functional to the conductances.
    """
    if law.kind != "iid":
        return None
    dist = law.distribution
    if dist.kind == "uniform":
        lo, hi = dist.params
        return lambda k: lo + hi - k
    if dist.kind == "two_point" and abs(dist.params[1] - 0.5) < 1e-15:
        v1, _, v2 = dist.params
        return lambda k: v1 + v2 - k
    if dist.kind == "constant":
        return lambda k: k
    return None


def gff_scaling(law: EnvironmentLaw, sides, profile: MacroscopicProfile, period: float, q,
                n_env=4, seed: int = 0, n_draws: int = 0, gauge: str = "zero_mean",
                antithetic: bool = False) -> list:
    """Var(phi_eps(f)) on tori of growing side with eps = period / side.

    For each side, n_env kappa samples (an int, or one count per side) are
    drawn and the conditional variance w.(-L_kappa)^+ w is computed exactly
    and averaged; this is the full variance because phi has mean zero
    given kappa. With antithetic=True each sample is averaged with its
    reflected copy (see reflect_law). With n_draws > 0, that many field
    draws per environment are also made and tested for normality.
    """
    target = gff_variance_target(profile, q, period)
    counts = [int(n_env)] * len(sides) if np.isscalar(n_env) else [int(c) for c in n_env]
    flip = reflect_law(law) if antithetic else None
    if antithetic and flip is None:
        raise PreconditionError("antithetic sampling needs a reflection-symmetric iid law")
    rows = []
    for si, N in enumerate(sides):
        N = int(N)
        dom = LatticeDomain((N,) * profile.d, "periodic")
        eps = period / N
        w = pairing_weights(profile, dom, eps)
        vals, draws = [], []
        for k in range(counts[si]):
            env = build_environment(law, dom, derive_seed(seed, si, k))
            v = exact_functional_variance(env, w)
            if flip is not None:
                v = 0.5 * (v + exact_functional_variance(env.with_values(flip(env.values)), w))
            vals.append(v)
            if n_draws:
                fs = sample_gaussian_field(env, derive_seed(seed, si, k, 1), gauge, n_samples=n_draws)
                draws.extend(float(f.values @ w) for f in fs)
        vals = np.array(vals)
        n = len(vals)
        row = {"side": N, "eps": eps, "variance": float(vals.mean()),
               "stderr": float(vals.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0,
               "target": target, "relative_error": float(vals.mean() / target - 1.0)}
        if n_draws:
            ad = anderson_darling_normal(draws)
            row.update(sample_variance=float(np.var(draws, ddof=1)), ad_statistic=ad["statistic"],
                       ad_critical_1pct=ad["critical_1pct"], normal=ad["normal"])
        rows.append(row)
    return rows
