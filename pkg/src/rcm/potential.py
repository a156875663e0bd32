"""Discrete electrostatics: energies, Dirichlet and Poisson problems, resistances.

Sign conventions: the generator is L f(x) = sum_y w_xy (f(y) - f(x)) and
env.laplacian is -L as a positive semidefinite matrix. Residuals are
reported as max |L f| over the unknown vertices.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from numba import njit

from .cluster import label_clusters, union_find
from .env import Environment
from .errors import ConsistencyError, DegenerateVertexError, PreconditionError, SolverError

DEFAULT_TOL = 1e-10
MAX_SWEEPS = 10**6
MAX_CG_ITER = 10**4
METHODS = ("conjugate_gradient", "relaxation", "direct")


@dataclass
class ScalarField:
    values: np.ndarray
    residual: float = 0.0
    iterations: int = 0
    method: str = ""

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.values, dtype=dtype)

    def __getitem__(self, i):
        return self.values[i]

    def __len__(self):
        return len(self.values)


@dataclass
class DirichletProblem:
    """Find f harmonic on the interior mask with f = g elsewhere."""

    env: Environment
    interior: np.ndarray
    g: np.ndarray

    def __post_init__(self):
        n = self.env.domain.n_vertices
        self.interior = _as_mask(self.interior, n)
        self.g = np.broadcast_to(np.asarray(self.g, dtype=float), (n,)).copy()
        if not np.all(np.isfinite(self.g[~self.interior])):
            raise ConsistencyError("boundary data must be finite")


def _as_mask(A, n: int) -> np.ndarray:
    if A is None:
        return np.ones(n, dtype=bool)
    A = np.asarray(A)
    if A.dtype == bool:
        if A.shape != (n,):
            raise PreconditionError(f"mask has shape {A.shape}, expected ({n},)")
        return A.copy()
    m = np.zeros(n, dtype=bool)
    m[A.astype(np.int64)] = True
    return m


def anchored(env: Environment, interior: np.ndarray) -> np.ndarray:
    """Interior vertices joined by a positive path to some non-interior vertex."""
    u, v, _ = env.domain.edges
    pos = env.values > 0
    roots = union_find(env.domain.n_vertices, u[pos], v[pos])
    outside_roots = np.unique(roots[~interior])
    return interior & np.isin(roots, outside_roots) & (env.pi > 0)


# ---------------------------------------------------------------------------
# energy and relaxation


def dirichlet_energy(env: Environment, f, A=None) -> float:
    """Sum over edges meeting A of w_e (f(u) - f(v))^2, each edge once."""
    f = np.asarray(f, dtype=float)
    u, v, _ = env.domain.edges
    if A is None:
        meet = slice(None)
    else:
        m = _as_mask(A, env.domain.n_vertices)
        meet = m[u] | m[v]
    du = f[u[meet]] - f[v[meet]]
    return float(np.sum(env.values[meet] * du * du))


@njit(cache=True)
def _gs_sweeps(indptr, indices, data, diag, rhs, x, order, n_sweeps):
    # Gauss-Seidel on diag*x - offdiag*x = rhs, where data holds the
    # off-diagonal conductances among unknowns
    for _ in range(n_sweeps):
        for k in range(order.shape[0]):
            i = order[k]
            acc = rhs[i]
            for p in range(indptr[i], indptr[i + 1]):
                acc += data[p] * x[indices[p]]
            x[i] = acc / diag[i]


def _reduced_system(env: Environment, interior: np.ndarray, g: np.ndarray):
    """Block (-L)_{AA} and right-hand side W_{A,B} g_B for unknowns A."""
    idx = np.flatnonzero(interior)
    W = env.weight_matrix
    Waa = W[idx][:, idx].tocsr()
    rhs = np.asarray(W[idx][:, ~interior] @ g[~interior]).ravel()
    diag = env.pi[idx]
    return idx, Waa, diag, rhs


def relaxation_sweep(env: Environment, f, A) -> np.ndarray:
    """One Gauss-Seidel pass: f(x) <- sum_y P(x, y) f(y) for x in A, canonical order."""
    f = np.array(f, dtype=float)
    n = env.domain.n_vertices
    mask = _as_mask(A, n)
    if np.any(env.pi[mask] <= 0):
        raise DegenerateVertexError("relaxation at a vertex with zero total conductance")
    idx, Waa, diag, rhs = _reduced_system(env, mask, f)
    x = f[idx].copy()
    _gs_sweeps(Waa.indptr, Waa.indices, Waa.data, diag, rhs, x, np.arange(len(idx)), 1)
    f[idx] = x
    return f


# ---------------------------------------------------------------------------
# linear solvers


def conjugate_gradient(A: sp.csr_matrix, b: np.ndarray, tol_abs: float, x0=None,
                       max_iter: int = MAX_CG_ITER) -> tuple:
    """Jacobi-preconditioned CG for SPD A; stops when max|b - A x| <= tol_abs."""
    x = np.zeros_like(b) if x0 is None else x0.astype(float).copy()
    r = b - A @ x
    minv = 1.0 / A.diagonal()
    z = minv * r
    p = z.copy()
    rz = r @ z
    it = 0
    while np.max(np.abs(r), initial=0.0) > tol_abs:
        if it >= max_iter:
            res = float(np.max(np.abs(b - A @ x)))
            raise SolverError("conjugate gradient hit the iteration cap", res, it)
        Ap = A @ p
        alpha = rz / (p @ Ap)
        x += alpha * p
        r -= alpha * Ap
        it += 1
        if it % 50 == 0:
            r = b - A @ x  # refresh against drift
        z = minv * r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    res = float(np.max(np.abs(b - A @ x), initial=0.0))
    return x, res, it


def spd_factor(A: sp.spmatrix):
    """Sparse LU of a symmetric positive definite matrix with a symmetric ordering."""
    return spla.splu(sp.csc_matrix(A), permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                     options={"SymmetricMode": True})


def _solve_block(Waa, diag, rhs, method: str, tol_abs: float, x0=None, max_iter=None) -> tuple:
    if len(rhs) == 0:
        return np.zeros(0), 0.0, 0
    A = (sp.diags(diag) - Waa).tocsr()
    if method == "direct":
        x = spd_factor(A).solve(rhs)
        return x, float(np.max(np.abs(rhs - A @ x))), 1
    if method == "conjugate_gradient":
        return conjugate_gradient(A, rhs, tol_abs, x0, max_iter or MAX_CG_ITER)
    if method == "relaxation":
        cap = max_iter or MAX_SWEEPS
        x = np.zeros_like(rhs) if x0 is None else x0.copy()
        order = np.arange(len(rhs))
        done, chunk = 0, 16
        while True:
            res = float(np.max(np.abs(rhs - A @ x)))
            if res <= tol_abs:
                return x, res, done
            if done >= cap:
                raise SolverError("relaxation hit the sweep cap", res, done)
            k = min(chunk, cap - done)
            _gs_sweeps(Waa.indptr, Waa.indices, Waa.data, diag, rhs, x, order, k)
            done += k
            chunk = min(2 * chunk, 4096)
    raise PreconditionError(f"unknown method {method!r}; choose from {METHODS}")


def solve_dirichlet(problem: DirichletProblem, method: str = "conjugate_gradient", tol: float = DEFAULT_TOL,
                    max_iter: int | None = None) -> ScalarField:
    """Harmonic extension of the boundary data into the interior.

    Every interior vertex must reach the boundary through positive edges,
    otherwise the problem has no unique solution.
    """
    env, A, g = problem.env, problem.interior, problem.g
    if np.any(env.pi[A] <= 0):
        raise DegenerateVertexError("interior contains vertices with zero total conductance")
    ok = anchored(env, A)
    if not np.array_equal(ok, A):
        raise PreconditionError(f"{int(np.sum(A & ~ok))} interior vertices are not connected to the boundary")
    scale = max(1.0, float(np.max(np.abs(g[~A]), initial=0.0)))
    idx, Waa, diag, rhs = _reduced_system(env, A, g)
    x, res, it = _solve_block(Waa, diag, rhs, method, tol * scale, max_iter=max_iter)
    f = g.copy()
    f[idx] = x
    return ScalarField(f, res, it, method)


def _solve_on(env: Environment, fixed: np.ndarray, g: np.ndarray, region: np.ndarray,
              method: str, tol: float, max_iter=None) -> ScalarField:
    """Dirichlet solve on region with data on fixed; vertices outside region keep g."""
    interior = region & ~fixed
    interior &= anchored(env, interior)
    return solve_dirichlet(DirichletProblem(env, interior, g), method, tol, max_iter)


# ---------------------------------------------------------------------------
# resistances and conductances


def _component_of(env: Environment, x: int) -> np.ndarray:
    lab = label_clusters(env).labels
    if lab[x] < 0:
        return np.zeros(env.domain.n_vertices, dtype=bool)
    return lab == lab[x]


def effective_resistance(env: Environment, source, sink, method: str = "conjugate_gradient",
                         tol: float = DEFAULT_TOL, full_output: bool = False):
    """Resistance between a vertex and a vertex or set; inf when disconnected."""
    dom = env.domain
    s = dom.index(source)
    # a tuple is one vertex in coordinates; lists and arrays are vertex sets
    if np.ndim(sink) == 0 or isinstance(sink, tuple):
        t = np.array([dom.index(sink)])
    else:
        t = np.array([dom.index(y) for y in sink], dtype=np.int64)
    comp = _component_of(env, s)
    t = t[comp[t]]
    if len(t) == 0 or s in set(t.tolist()):
        val = np.inf if len(t) == 0 else 0.0
        return (val, None) if full_output else val
    fixed = np.zeros(dom.n_vertices, dtype=bool)
    fixed[s] = True
    fixed[t] = True
    g = np.zeros(dom.n_vertices)
    g[s] = 1.0
    sol = _solve_on(env, fixed, g, comp, method, tol)
    E = dirichlet_energy(env, np.where(comp, sol.values, 0.0), comp)
    val = 1.0 / E if E > 0 else np.inf
    return (val, sol) if full_output else val


def box_mask(env: Environment, x, N: int) -> np.ndarray:
    """{y : |y - x|_inf < N}, measured with shortest images on tori."""
    dom = env.domain
    disp = dom.displacement(dom.index(x), np.arange(dom.n_vertices))
    return np.max(np.abs(disp), axis=1) < N


def escape_conductance(env: Environment, x, box, method: str = "conjugate_gradient",
                       tol: float = DEFAULT_TOL, full_output: bool = False):
    """1/R(x, complement of box); box is a mask or a radius N for {|y - x|_inf < N}."""
    dom = env.domain
    i = dom.index(x)
    lam = box_mask(env, i, box) if np.ndim(box) == 0 else _as_mask(box, dom.n_vertices)
    if not lam[i]:
        raise PreconditionError("x must lie inside the box")
    if env.pi[i] <= 0:
        return (0.0, None) if full_output else 0.0
    outside = np.flatnonzero(~lam)
    if len(outside) == 0:
        raise PreconditionError("box covers the whole domain; nothing to escape to")
    R, sol = effective_resistance(env, i, outside, method, tol, full_output=True)
    val = 0.0 if np.isinf(R) else 1.0 / R
    return (val, sol) if full_output else val


def plate_potential(env: Environment, N: int, method: str = "conjugate_gradient",
                    tol: float = DEFAULT_TOL) -> ScalarField:
    """Potential +1 on the top plate, -1 on the bottom one.

    The height axis is axis 1 (axis 0 in d = 1) and must have 2N + 1 layers;
    the plates are its end layers. Vertices with no path to either plate get 0.
    """
    dom = env.domain
    if dom.periodic:
        raise PreconditionError("plate problems need a non-periodic slab")
    h = 1 if dom.d >= 2 else 0
    if dom.sides[h] != 2 * N + 1:
        raise PreconditionError(f"height axis has {dom.sides[h]} layers, expected {2 * N + 1}")
    c = dom.all_coords[:, h]
    fixed = (c == 0) | (c == 2 * N)
    g = np.where(c == 2 * N, 1.0, np.where(c == 0, -1.0, 0.0))
    return _solve_on(env, fixed, g, np.ones(dom.n_vertices, dtype=bool), method, tol)


def heights(env: Environment) -> np.ndarray:
    dom = env.domain
    h = 1 if dom.d >= 2 else 0
    return dom.all_coords[:, h] - (dom.sides[h] - 1) // 2


def box_conductance(env: Environment, N: int, method: str = "conjugate_gradient",
                    tol: float = DEFAULT_TOL, full_output: bool = False):
    """Minimal energy with f(x) = -x_1 on the faces x_1 = +-N, other faces free."""
    dom = env.domain
    if dom.periodic or any(s != 2 * N + 1 for s in dom.sides):
        raise PreconditionError(f"need a box of side {2 * N + 1}")
    x1 = dom.all_coords[:, 0] - N
    fixed = np.abs(x1) == N
    g = np.where(fixed, -x1.astype(float), 0.0)
    sol = _solve_on(env, fixed, g, np.ones(dom.n_vertices, dtype=bool), method, tol)
    # floating components carry no energy; freeze them at a constant
    f = sol.values.copy()
    live = fixed | anchored(env, ~fixed)
    f[~live] = 0.0
    u, v, _ = dom.edges
    keep = live[u] & live[v]
    du = f[u[keep]] - f[v[keep]]
    val = float(np.sum(env.values[keep] * du * du))
    return (val, sol) if full_output else val


def greens_function(env: Environment, lam, x, y, method: str = "direct", tol: float = DEFAULT_TOL) -> float:
    """Expected visits to y before leaving lam, for the discrete walk from x."""
    dom = env.domain
    lam = _as_mask(lam, dom.n_vertices)
    i, j = dom.index(x), dom.index(y)
    if not (lam[i] and lam[j]):
        raise PreconditionError("x and y must lie in the set")
    if env.pi[i] <= 0 or env.pi[j] <= 0:
        raise DegenerateVertexError("Green's function at a degenerate vertex")
    ok = anchored(env, lam)
    if not ok[j]:
        raise PreconditionError("walk cannot leave the set from y; restricted operator is singular")
    if not ok[i]:
        return 0.0
    interior = lam & ok
    idx, Waa, diag, _ = _reduced_system(env, interior, np.zeros(dom.n_vertices))
    pos = {v: k for k, v in enumerate(idx)}
    rhs = np.zeros(len(idx))
    rhs[pos[j]] = 1.0
    h, _, _ = _solve_block(Waa, diag, rhs, method, tol)
    return float(h[pos[i]] * env.pi[j])


def solve_poisson(env: Environment, rho, normalization=None, method: str = "conjugate_gradient",
                  tol: float = DEFAULT_TOL) -> ScalarField:
    """Solve L phi = rho.

    On absorbing boxes phi vanishes on the absorbing layer. Elsewhere rho
    must have zero total charge on its component, phi is computed on that
    component, and phi(normalization) = 0 (default: smallest vertex of the
    component). Vertices off the component get 0.
    """
    dom = env.domain
    n = dom.n_vertices
    rho = np.asarray(rho, dtype=float)
    if rho.shape != (n,):
        raise PreconditionError(f"rho has shape {rho.shape}, expected ({n},)")
    if not np.any(rho):
        return ScalarField(np.zeros(n), 0.0, 0, method)
    scale = max(1.0, float(np.max(np.abs(rho))))
    if dom.boundary == "absorbing":
        ab = dom.absorbing
        if np.any(rho[ab]):
            raise ConsistencyError("charge placed on the absorbing layer")
        interior = ~ab & (env.pi > 0) & anchored(env, ~ab)
        if np.any(rho[~ab & ~interior]):
            raise ConsistencyError("charge on vertices that cannot reach the absorbing layer")
        idx, Waa, diag, _ = _reduced_system(env, interior, np.zeros(n))
        x, res, it = _solve_block(Waa, diag, -rho[idx], method, tol * scale)
        phi = np.zeros(n)
        phi[idx] = x
        return ScalarField(phi, res, it, method)
    lab = label_clusters(env).labels
    support = np.flatnonzero(rho)
    comps = np.unique(lab[support])
    if len(comps) != 1 or comps[0] < 0:
        raise ConsistencyError("rho must be supported on a single component")
    comp = lab == comps[0]
    total = float(np.sum(rho[comp]))
    if abs(total) > 1e-12 * float(np.sum(np.abs(rho))) + 1e-300:
        raise ConsistencyError(f"total charge {total:.3e} is not zero on a domain whose kernel is constants")
    members = np.flatnonzero(comp)
    g0 = int(members[0]) if normalization is None else dom.index(normalization)
    if not comp[g0]:
        raise PreconditionError("normalization vertex is not on the charged component")
    interior = comp.copy()
    interior[g0] = False
    idx, Waa, diag, _ = _reduced_system(env, interior, np.zeros(n))
    x, res, it = _solve_block(Waa, diag, -rho[idx], method, tol * scale)
    phi = np.zeros(n)
    phi[idx] = x
    full_res = float(np.max(np.abs((-(env.laplacian @ phi) - rho)[comp])))
    return ScalarField(phi, full_res, it, method)
