"""Discrete Cauchy problem, its homogenized limit, and resolvent pairings.

Scaling: lattice vertex x sits at eps*x; u_eps(t, x) = E^x f(eps Y_{t/eps^2})
for the variable-speed walk Y, with initial data the cell averages of f.
The limit solves d_t u = sum_ij q_ij d_i d_j u, i.e. u(t) = f convolved
with the centred Gaussian of covariance 2 q t. Both fields are compared as
cell averages on the same eps-grid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.special import ive

from .corrector import DiffusionMatrix, estimate_diffusion_matrix
from .env import Environment, EnvironmentLaw, LatticeDomain, build_environment, derive_seed
from .errors import GeometryError, PreconditionError, SolverError
from .fields import MacroscopicProfile, _cell_quadrature, cell_averages, check_support
from .gradfield import _as_q, green_pairing_target, pairing_weights
from .potential import solve_poisson
from .walk import vsrw_batch

MAX_TERMS = 10**6


@dataclass
class CauchySolution:
    values: np.ndarray  # u_eps(t, x); NaN off the probes for Monte Carlo
    stderr: np.ndarray | None
    t: float
    eps: float
    method: str
    probes: np.ndarray | None = None
    terms: int = 0

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.values, dtype=dtype)


def generator(env: Environment) -> sp.csr_matrix:
    """VSRW generator W - D; rows of absorbing vertices are zero."""
    G = (env.weight_matrix - sp.diags(env.pi)).tocsr()
    if env.domain.boundary == "absorbing":
        keep = sp.diags((~env.domain.absorbing).astype(float))
        G = (keep @ G).tocsr()
    return G


def heat_semigroup(env: Environment, u0, s: float, tol: float = 1e-15, max_terms: int = MAX_TERMS) -> tuple:
    """exp(s G) u0 by a Chebyshev expansion; returns (u, number of terms).

    With lam = 2 max pi the spectrum of G lies in [-lam, 0], so
    X = (2/lam) G + I has spectrum in [-1, 1] and
    exp(s G) = sum_k c_k T_k(X) with c_0 = ive(0, a), c_k = 2 ive(k, a),
    a = s lam / 2. The coefficients decrease in k; summation stops at the
    first one below tol.
    """
    u0 = np.asarray(u0, dtype=float)
    if s < 0:
        raise PreconditionError("time must be nonnegative")
    if s == 0:
        return u0.copy(), 0
    G = generator(env)
    lam = 2.0 * float(env.pi.max())
    if lam == 0:
        return u0.copy(), 0
    a = s * lam / 2.0
    # ive(k, a) ~ exp(-k^2 / 2a) / sqrt(2 pi a) for k << a
    need = int(np.sqrt(2 * a * np.log(1 / tol)) + 40)
    if need > max_terms:
        raise SolverError(f"semigroup needs about {need} terms, budget is {max_terms}", np.nan, 0)

    def X(v):
        return (2.0 / lam) * (G @ v) + v

    t0, t1 = u0, X(u0)
    out = ive(0, a) * t0 + 2 * ive(1, a) * t1
    k = 1
    while True:
        k += 1
        ck = ive(k, a)
        t0, t1 = t1, 2 * X(t1) - t0
        out += 2 * ck * t1
        if ck < tol:
            return out, k
        if k >= max_terms:
            raise SolverError("semigroup series did not converge within the term budget", float(ck), k)


def initial_data(env: Environment, profile: MacroscopicProfile, eps: float, order: int = 6) -> np.ndarray:
    dom = env.domain
    check_support(profile, dom.sides, eps)
    return cell_averages(profile, dom.sides, eps, order, periodic=dom.periodic)


def solve_cauchy_discrete(env: Environment, profile: MacroscopicProfile, t: float, eps: float,
                          method: str = "exact_semigroup", seed: int = 0, probes=None,
                          n_walks: int = 2000, max_jumps: float = 5e8, order: int = 6) -> CauchySolution:
    """u_eps(t, .) = exp((t / eps^2) G) u_0 with u_0 the cell averages of f.

    monte_carlo estimates E^x u_0(Y_{t/eps^2}) at the probe vertices (ten
    spread-out vertices by default) from n_walks walks each; walk j at
    probe i uses walk index i * n_walks + j. max_jumps caps the expected
    total number of simulated jumps.
    """
    dom = env.domain
    u0 = initial_data(env, profile, eps, order)
    s = t / eps**2
    if method == "exact_semigroup":
        u, k = heat_semigroup(env, u0, s)
        return CauchySolution(u, None, t, eps, method, None, k)
    if method != "monte_carlo":
        raise PreconditionError(f"unknown method {method!r}")
    if probes is None:
        live = np.flatnonzero(env.pi > 0)
        probes = live[np.linspace(0, len(live) - 1, 10).astype(np.int64)]
    probes = np.array([dom.index(p) if isinstance(p, tuple) else int(p) for p in probes], dtype=np.int64)
    expected = s * float(env.pi.mean()) * n_walks * len(probes)
    if expected > max_jumps:
        raise SolverError(f"Monte Carlo needs about {expected:.3g} jumps, budget is {max_jumps:.3g}", np.nan, 0)
    vals = np.full(dom.n_vertices, np.nan)
    se = np.full(dom.n_vertices, np.nan)
    for i, x in enumerate(probes):
        ids = i * n_walks + np.arange(n_walks)
        pos, _ = vsrw_batch(env, np.full(n_walks, x), s, seed, walk_ids=ids)
        f = u0[pos]
        vals[x] = f.mean()
        se[x] = f.std(ddof=1) / np.sqrt(n_walks)
    return CauchySolution(vals, se, t, eps, method, probes, 0)


def _gaussian_images(profile: MacroscopicProfile, M: np.ndarray, period: float):
    """Closed-form convolution of a gaussian or dipole profile with N(0, M - width^2 I), periodized."""
    d = profile.d
    s = profile.width
    Minv = np.linalg.inv(M)
    pref = profile.amplitude * s**d / np.sqrt(np.linalg.det(M))
    kmax = int(np.ceil(8 * np.sqrt(np.linalg.eigvalsh(M).max()) / period)) + 1
    c = np.array(profile.center)

    def fn(pts):
        out = np.zeros(pts.shape[:-1])
        for shift in np.ndindex(*(2 * kmax + 1,) * d):
            y = pts - c + period * (np.array(shift) - kmax)
            My = y @ Minv
            g = pref * np.exp(-0.5 * np.sum(My * y, axis=-1))
            if profile.kind == "dipole":
                g = g * s * My[..., profile.axis]
            out += g
        return out

    return fn


def homogenized_solution(q, profile: MacroscopicProfile, t: float, sides, eps: float,
                         method: str = "closed_form", order: int = 6) -> np.ndarray:
    """Cell averages over the eps-grid torus of u(t) = f * N(0, 2 q t).

    closed_form handles gaussian and dipole profiles exactly (up to the
    cell quadrature); fft multiplies the Fourier coefficients of the cell
    averages by exp(-t k.qk), which is exact because averaging over cells
    commutes with the heat flow, up to aliasing beyond the grid frequency.
    """
    sides = tuple(int(n) for n in sides)
    d = len(sides)
    q = _as_q(q, d)
    if len(set(sides)) != 1:
        raise GeometryError("needs a cubic torus")
    period = sides[0] * eps
    if t < 0:
        raise PreconditionError("time must be nonnegative")
    if t == 0:
        return cell_averages(profile, sides, eps, order)
    if method == "closed_form":
        if profile.kind not in ("gaussian", "dipole"):
            raise PreconditionError("closed form needs a gaussian or dipole profile")
        M = profile.width**2 * np.eye(d) + 2.0 * t * q
        return _cell_quadrature(_gaussian_images(profile, M, period), sides, eps, order)
    if method != "fft":
        raise PreconditionError(f"unknown method {method!r}")
    f = cell_averages(profile, sides, eps, order).reshape(sides)
    k1 = 2 * np.pi * np.fft.fftfreq(sides[0], d=eps)
    ks = np.meshgrid(*([k1] * d), indexing="ij")
    kqk = sum(q[i, j] * ks[i] * ks[j] for i in range(d) for j in range(d))
    return np.real(np.fft.ifftn(np.fft.fftn(f) * np.exp(-t * kqk))).ravel()


def l2_distance(u: np.ndarray, v: np.ndarray, eps: float, d: int) -> float:
    """Grid-quadrature L2 norm of u - v over the eps-cells."""
    return float(np.sqrt(eps**d * np.sum((np.asarray(u) - np.asarray(v)) ** 2)))


def homogenization_error(law: EnvironmentLaw, profile: MacroscopicProfile, t: float, eps_grid, period: float,
                         n_env: int = 2, seed: int = 0, q=None, q_side: int = 128, q_samples: int = 2) -> list:
    """L2 distance between u_eps(t) and the homogenized u(t), per eps, averaged over environments.

    Each eps uses a torus of side period / eps. When q is None it is
    estimated by periodized correctors on q_samples tori of side q_side.
    """
    d = profile.d
    if q is None:
        q = estimate_diffusion_matrix(law, d, q_side, q_samples, derive_seed(seed, 999))
    rows = []
    for i, eps in enumerate(eps_grid):
        N = int(round(period / eps))
        if abs(N * eps - period) > 1e-9 * period:
            raise GeometryError(f"period {period} is not a multiple of eps={eps}")
        dom = LatticeDomain((N,) * d, "periodic")
        ubar = homogenized_solution(q, profile, t, dom.sides, eps)
        norm = l2_distance(ubar, 0.0, eps, d)
        errs = []
        for k in range(n_env):
            env = build_environment(law, dom, derive_seed(seed, i, k))
            u = solve_cauchy_discrete(env, profile, t, eps).values
            errs.append(l2_distance(u, ubar, eps, d))
        errs = np.array(errs)
        rows.append({"eps": float(eps), "side": N, "error": float(errs.mean()),
                     "stderr": float(errs.std(ddof=1) / np.sqrt(n_env)) if n_env > 1 else 0.0,
                     "relative_error": float(errs.mean() / norm) if norm > 0 else float("nan"),
                     "errors": errs.tolist()})
    return rows


def resolvent_pairing(env: Environment, f: MacroscopicProfile, g: MacroscopicProfile, eps: float,
                      q=None, method: str = "direct", require_zero_integral: bool = True) -> dict:
    """<g_eps, (-L)^{-1} f_eps> on a torus, with f_eps the eps^(1+d/2)-scaled cell data.

    Returns the pairing and, when q is given, the continuum target
    <g, (-Q)^{-1} f> on the torus of side N eps.
    """
    dom = env.domain
    if not dom.periodic or len(set(dom.sides)) != 1:
        raise PreconditionError("resolvent pairing needs a cubic torus")
    if require_zero_integral and dom.d <= 2:
        for name, p in (("f", f), ("g", g)):
            if abs(p.integral) > 1e-9 * max(1.0, abs(p.amplitude) if p.kind != "custom" else 1.0):
                raise PreconditionError(f"{name} must integrate to zero in dimension {dom.d}")
    if np.any(env.values <= 0):
        raise PreconditionError("resolvent pairing needs elliptic (positive) conductances")
    wf = pairing_weights(f, dom, eps)
    wg = pairing_weights(g, dom, eps)
    sol = solve_poisson(env, -wf, method=method)  # L phi = -w_f, i.e. (-L) phi = w_f
    out = {"eps": float(eps), "side": dom.sides[0], "pairing": float(wg @ sol.values), "residual": sol.residual}
    if q is not None:
        out["target"] = green_pairing_target(f, g, q, dom.sides[0] * eps)
    return out
