"""Harmonic embeddings, periodic correctors and the homogenized matrix.

Normalization of the diffusion matrix: q is reported in generator form,
Q f = sum_ij q_ij d_i d_j f, for the variable-speed walk. It is computed as

    q_ij = (1/|T|) sum_edges w_e dPsi_i dPsi_j,

so the unit environment gives q = I, and the VSRW covariance per unit time
is 2q. The raw per-vertex sum (1/|T|) sum_x sum_y w_xy dPsi_i dPsi_j visits
every edge twice, hence the stored calibration factor 1/2. The discrete-time
chain has per-step covariance 2q / mean(pi).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .env import Environment
from .errors import ConsistencyError, PreconditionError
from .potential import DEFAULT_TOL, _reduced_system, _solve_block, anchored, solve_dirichlet, DirichletProblem


@dataclass
class VectorField:
    values: np.ndarray  # (V, d); NaN where undefined
    residual: float = 0.0
    iterations: int = 0

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.values, dtype=dtype)


@dataclass
class DiffusionMatrix:
    q: np.ndarray
    mean_pi: float
    calibration: dict = field(default_factory=lambda: {
        "convention": "generator: Q f = sum_ij q_ij d_i d_j f for the variable-speed walk; unit environment gives identity",
        "factor_vs_vertex_sum": 0.5,
        "vsrw_covariance_per_time": "2 q",
        "discrete_covariance_per_step": "2 q / mean(pi)",
    })

    @property
    def vsrw_covariance(self) -> np.ndarray:
        return 2.0 * self.q

    @property
    def discrete_covariance(self) -> np.ndarray:
        """Per-step covariance of the discrete chain (also the CSRW per unit time)."""
        return 2.0 * self.q / self.mean_pi

    def to_dict(self) -> dict:
        return {"q": self.q.tolist(), "discrete_covariance": self.discrete_covariance.tolist(),
                "mean_pi": self.mean_pi, "calibration": self.calibration}


def _auto_method(n: int, method: str) -> str:
    if method != "auto":
        return method
    return "direct" if n <= 300_000 else "conjugate_gradient"


def harmonic_embedding(env: Environment, tol: float = DEFAULT_TOL, method: str = "auto") -> VectorField:
    """Relax every interior vertex to the weighted average of its neighbours.

    The pinned set is the outer layer of the box (the absorbing layer in
    absorbing mode), held at its geometric position. Only vertices joined to
    a pinned vertex with pi > 0 by positive edges are kept; the rest are NaN.
    """
    dom = env.domain
    if dom.periodic:
        raise PreconditionError("embedding needs a box with a boundary to pin")
    pinned = dom.outer_layer & (env.pi > 0)
    live = anchored(env, ~dom.outer_layer & (env.pi > 0))
    coords = dom.all_coords.astype(float)
    out = np.full((dom.n_vertices, dom.d), np.nan)
    out[pinned] = coords[pinned]
    m = _auto_method(int(live.sum()), method)
    res, its = 0.0, 0
    for i in range(dom.d):
        sol = solve_dirichlet(DirichletProblem(env, live, np.where(pinned, coords[:, i], 0.0)), m, tol)
        out[live, i] = sol.values[live]
        res, its = max(res, sol.residual), its + sol.iterations
    return VectorField(out, res, its)


def _torus_forcing(env: Environment) -> np.ndarray:
    """L x for the cover coordinates: b_i(x) = w(x, x+e_i) - w(x, x-e_i)."""
    _, wts = env.neighbor_table
    return np.stack([wts[:, 2 * i] - wts[:, 2 * i + 1] for i in range(env.d)], axis=1)


def periodized_corrector(env: Environment, tol: float = DEFAULT_TOL, method: str = "auto") -> VectorField:
    """Zero-mean periodic chi with L(x + chi) = 0 on the torus."""
    dom = env.domain
    if not dom.periodic:
        raise PreconditionError("periodized corrector needs a torus")
    rest = np.ones(dom.n_vertices, dtype=bool)
    rest[0] = False
    if np.any(env.pi <= 0) or not anchored(env, rest)[1:].all():
        raise PreconditionError("the positive-conductance graph must span the torus")
    b = _torus_forcing(env)
    if np.max(np.abs(b.sum(axis=0))) > 1e-9 * max(1.0, float(np.abs(b).sum())):
        raise ConsistencyError("forcing has nonzero total")
    interior = np.ones(dom.n_vertices, dtype=bool)
    interior[0] = False
    idx, Waa, diag, _ = _reduced_system(env, interior, np.zeros(dom.n_vertices))
    m = _auto_method(dom.n_vertices, method)
    chi = np.zeros((dom.n_vertices, dom.d))
    its = 0
    for i in range(dom.d):
        x, _, it = _solve_block(Waa, diag, b[idx, i], m, tol * 0.1)
        chi[idx, i] = x
        its += it
    chi -= chi.mean(axis=0)
    res = float(np.max(np.abs(harmonicity_residual(env, chi))))
    return VectorField(chi, res, its)


def harmonicity_residual(env: Environment, chi: np.ndarray) -> np.ndarray:
    """L(x + chi) at every vertex of a torus, shape (V, d)."""
    chi = np.asarray(chi, dtype=float).reshape(env.domain.n_vertices, env.d)
    return -(env.laplacian @ chi) + _torus_forcing(env)


def edge_increments(env: Environment, chi) -> np.ndarray:
    """Psi(v) - Psi(u) along every canonical edge u -> u + e, shape (E, d)."""
    chi = np.asarray(chi, dtype=float).reshape(env.domain.n_vertices, env.d)
    u, v, dirs = env.domain.edges
    inc = chi[v] - chi[u]
    inc[np.arange(len(u)), dirs] += 1.0
    return inc


def torus_energy(env: Environment, chi) -> np.ndarray:
    """Per-coordinate torus energy sum_e w_e (dPsi_i)^2 of x + chi."""
    inc = edge_increments(env, chi)
    return np.sum(env.values[:, None] * inc * inc, axis=0)


def diffusion_matrix(env: Environment, chi) -> DiffusionMatrix:
    inc = edge_increments(env, chi)
    n = env.domain.n_vertices
    q = (inc * env.values[:, None]).T @ inc / n
    q = 0.5 * (q + q.T)
    return DiffusionMatrix(q, float(env.pi.mean()))


def explicit_cycle_corrector(omega) -> np.ndarray:
    """chi on a cycle with edge i joining i and i+1: C sum_{i<x} 1/w_i - x, zero mean."""
    omega = np.asarray(omega, dtype=float)
    C = len(omega) / np.sum(1.0 / omega)
    psi = np.concatenate([[0.0], C * np.cumsum(1.0 / omega)[:-1]])
    chi = psi - np.arange(len(omega))
    return chi - chi.mean()


def nondegeneracy_lower_bound(envs) -> np.ndarray:
    """Per-direction lower bound 2 / (E pi * E(1/w_i)) on the discrete per-step variance."""
    envs = [envs] if isinstance(envs, Environment) else list(envs)
    d = envs[0].d
    pis = np.concatenate([e.pi for e in envs])
    out = np.zeros(d)
    for i in range(d):
        w = np.concatenate([e.direction_values(i).ravel() for e in envs])
        if np.any(w <= 0):
            out[i] = 0.0
            continue
        out[i] = 2.0 / (pis.mean() * np.mean(1.0 / w))
    return out


def sublinearity_profile(chi, domain, radii, eps: float = 0.1, K: float = 1.0, center=None) -> dict:
    """Corrector growth diagnostics over l-infinity balls around center.

    Returns per radius n: max |chi| / n, the fraction of the ball where
    |chi| >= eps n, and the density of (K, eps)-good points on the axis
    lines through center. A point x is (K, eps)-good when
    |chi(x + k e) - chi(x)| <= K + eps k for every e in {+-e_i} and every
    1 <= k <= n with x + k e still in the ball.
    """
    chi = np.asarray(chi, dtype=float).reshape(domain.n_vertices, -1)
    norm = np.linalg.norm(chi, axis=1)
    c = domain.center if center is None else domain.index(center)
    disp = domain.displacement(c, np.arange(domain.n_vertices))
    dist = np.max(np.abs(disp), axis=1)
    sides = np.array(domain.sides)
    c0 = domain.coords(c)
    out = {"radius": [], "max_ratio": [], "violation_fraction": [], "good_density": []}
    for n in radii:
        n = int(n)
        if not domain.periodic and (np.any(c0 - n < 0) or np.any(c0 + n >= sides)):
            raise PreconditionError(f"radius {n} leaves the box")
        if domain.periodic and 2 * n + 1 > sides.min():
            raise PreconditionError(f"radius {n} wraps around the torus")
        ball = dist <= n
        out["radius"].append(n)
        out["max_ratio"].append(float(norm[ball].max() / n))
        out["violation_fraction"].append(float(np.mean(norm[ball] >= eps * n)))
        good, total = 0, 0
        for i in range(domain.d):
            for j in range(-n, n + 1):
                if i > 0 and j == 0:
                    continue  # center counted once
                x = c0.copy()
                x[i] += j
                xi = domain.index(tuple(x % sides))
                ok = True
                for a in range(domain.d):
                    for s in (1, -1):
                        # steps that stay inside the ball
                        kmax = n - s * (x[a] - c0[a])
                        if kmax < 1:
                            continue
                        k = np.arange(1, kmax + 1)
                        y = np.repeat(x[None, :], len(k), axis=0)
                        y[:, a] += s * k
                        yi = np.ravel_multi_index(tuple((y % sides).T), domain.sides)
                        if np.any(np.linalg.norm(chi[yi] - chi[xi], axis=1) > K + eps * k):
                            ok = False
                            break
                    if not ok:
                        break
                good += ok
                total += 1
        out["good_density"].append(good / total)
    return {k: np.array(v) for k, v in out.items()}


def estimate_diffusion_matrix(law, d: int, side: int = 128, n_samples: int = 2, seed: int = 0,
                              method: str = "auto") -> DiffusionMatrix:
    """Average of the periodized q over n_samples tori of the given side."""
    from .env import LatticeDomain, build_environment, derive_seed

    dom = LatticeDomain((side,) * d, "periodic")
    qs, pis = [], []
    for k in range(n_samples):
        env = build_environment(law, dom, derive_seed(seed, k))
        dm = diffusion_matrix(env, periodized_corrector(env, method=method))
        qs.append(dm.q)
        pis.append(dm.mean_pi)
    return DiffusionMatrix(np.mean(qs, axis=0), float(np.mean(pis)))
