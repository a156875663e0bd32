"""Heat kernels, return probabilities, isoperimetric profiles and mixing bounds."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy import stats

from .env import Environment, LatticeDomain, EnvironmentLaw, build_environment, trap_vertices
from .errors import DegenerateVertexError, PreconditionError


@dataclass
class KernelSnapshot:
    base: int
    n: float
    probs: np.ndarray
    method: str = "exact"
    samples: int = 0


def _start(env: Environment, x0) -> int:
    i = env.domain.index(x0)
    if env.pi[i] <= 0:
        raise DegenerateVertexError("kernel from a degenerate vertex")
    return i


def lazify(P, gamma: float):
    """gamma I + (1 - gamma) P; accepts an environment or a transition matrix."""
    if isinstance(P, Environment):
        P = P.transition_matrix()
    if not 0 <= gamma < 1:
        raise PreconditionError("gamma must lie in [0, 1)")
    if gamma == 0:
        return P
    n = P.shape[0]
    if sp.issparse(P):
        return (gamma * sp.identity(n, format="csr") + (1 - gamma) * P).tocsr()
    return gamma * np.eye(n) + (1 - gamma) * P


def kernel_iter(env: Environment, x0, n: int, P=None):
    """Yield P^k(x0, .) for k = 0..n."""
    i = _start(env, x0)
    PT = (env.transition_matrix() if P is None else P).T.tocsr()
    mu = np.zeros(env.domain.n_vertices)
    mu[i] = 1.0
    yield mu
    for _ in range(n):
        mu = PT @ mu
        yield mu


def exact_kernel(env: Environment, x0, n: int, P=None) -> KernelSnapshot:
    """n-step distribution from x0 by repeated sparse application."""
    mu = None
    for mu in kernel_iter(env, x0, n, P):
        pass
    return KernelSnapshot(env.domain.index(x0), n, mu, "exact")


def fit_slope(n: np.ndarray, p: np.ndarray) -> float:
    return float(np.polyfit(np.log(n), np.log(p), 1)[0])


def return_probability_series(env: Environment, x0, n_max: int, fit_range=None) -> dict:
    """P^{2n}(x0, x0) for n = 1..n_max and the log-log slope.

    The slope is fitted over fit_range = (lo, hi) in n, by default the
    upper half of the series.
    """
    i = env.domain.index(x0)
    p = np.empty(n_max)
    for k, mu in enumerate(kernel_iter(env, i, 2 * n_max)):
        if k >= 2 and k % 2 == 0:
            p[k // 2 - 1] = mu[i]
    n = np.arange(1, n_max + 1)
    lo, hi = fit_range if fit_range is not None else (max(1, n_max // 2), n_max)
    sel = (n >= lo) & (n <= hi)
    return {"n": n, "p2n": p, "slope": fit_slope(n[sel], p[sel]), "fit_range": (lo, hi)}


def diagonal_lower_bound(env: Environment, x0, n: int) -> dict:
    """Both sides of the Cauchy-Schwarz chain bounding P^{2n}(x0, x0) from below.

    B is the set of non-absorbing vertices within Euclidean distance sqrt(n)
    of x0 (shortest images on tori), pi* the largest pi off the absorbing
    layer. Returns the exact diagonal, the middle term
    (pi(x0)/pi*) sum_B P^n(x0,.)^2 and the final bound
    (pi(x0)/pi*) P(X_n in B)^2 / |B|.
    """
    dom = env.domain
    i = dom.index(x0)
    mu_n, p2n = None, None
    for k, mu in enumerate(kernel_iter(env, i, 2 * n)):
        if k == n:
            mu_n = mu.copy()
        if k == 2 * n:
            p2n = float(mu[i])
    disp = dom.displacement(i, np.arange(dom.n_vertices))
    ball = (np.sum(disp.astype(float) ** 2, axis=1) <= n) & ~dom.absorbing
    pistar = float(np.max(env.pi[~dom.absorbing]))
    ratio = env.pi[i] / pistar
    middle = ratio * float(np.sum(mu_n[ball] ** 2))
    bound = ratio * float(np.sum(mu_n[ball])) ** 2 / int(ball.sum())
    return {"n": n, "p2n": p2n, "middle": middle, "bound": bound, "ball_size": int(ball.sum())}


# ---------------------------------------------------------------------------
# trap


def trap_decay_experiment(env: Environment, n_grid, core, direction: int = 0, origin=None,
                          control: bool = True) -> dict:
    """Exact diagonal at the origin against the assembled one-path-family bound.

    The bound follows the access path from the origin to x, steps into b,
    bounces on the core edge (b, a) for the remaining 2n - 2l - 2 steps and
    returns the same way; every factor is an exact transition probability
    of env. The control column is the diagonal for unit conductances on the
    same domain.
    """
    dom = env.domain
    tv = trap_vertices(dom, core, direction, origin)
    P = env.transition_matrix()

    def p(u, v):
        return float(P[u, v])

    path = tv["path"]  # access vertex ... origin
    out_cost = math.prod(p(path[k + 1], path[k]) for k in range(len(path) - 1))
    back_cost = math.prod(p(path[k], path[k + 1]) for k in range(len(path) - 1))
    ell = len(path) - 1
    entry, exit_ = p(tv["x"], tv["b"]), p(tv["b"], tv["x"])
    bounce = p(tv["b"], tv["a"]) * p(tv["a"], tv["b"])
    n_grid = np.asarray(sorted(set(int(n) for n in n_grid)))
    nmax = int(n_grid.max())
    o = tv["origin"]
    diag = np.zeros(nmax + 1)
    for k, mu in enumerate(kernel_iter(env, o, 2 * nmax)):
        if k % 2 == 0:
            diag[k // 2] = mu[o]
    ctrl = None
    if control:
        unit = build_environment(EnvironmentLaw.constant(1.0), dom)
        ctrl = np.zeros(nmax + 1)
        for k, mu in enumerate(kernel_iter(unit, o, 2 * nmax)):
            if k % 2 == 0:
                ctrl[k // 2] = mu[o]
    rows = []
    for n in n_grid:
        m = 2 * n - 2 * ell - 2
        conf = bounce ** (m // 2) if m >= 0 else 0.0
        bound = out_cost * entry * conf * exit_ * back_cost if m >= 0 else 0.0
        rows.append({"n": int(n), "p2n": float(diag[n]), "bound": bound, "path_cost": out_cost * back_cost,
                     "entry": entry, "confinement": conf, "exit": exit_,
                     "control": None if ctrl is None else float(ctrl[n])})
    return {"rows": rows, "trap": {k: v for k, v in tv.items() if k != "path"}, "path_length": ell}


def confinement_probability(strength: float, m: int, d: int = 2) -> float:
    """Probability of bouncing 2m times on a core edge shielded by 2(2d - 1) edges of the given strength."""
    stay = 1.0 / (1.0 + (2 * d - 1) * strength)
    return stay ** (2 * m)


# ---------------------------------------------------------------------------
# isoperimetry


@dataclass
class IsoperimetricProfile:
    """phi(r) = min Q(A, A^c) / pi(A) over sets with pi(A) <= r.

    For kind "step" the profile is right-continuous and piecewise constant
    with jumps at volumes[k]; for kind "sampled" values are point samples of
    a continuous profile. exact is False for greedy upper bounds.
    """

    volumes: np.ndarray
    values: np.ndarray
    cutoff: int = 18
    exact: bool = True
    kind: str = "step"

    def __call__(self, r):
        r = np.asarray(r, dtype=float)
        if self.kind == "sampled":
            return np.interp(r, self.volumes, self.values)
        k = np.searchsorted(self.volumes, r, side="right") - 1
        return np.where(k >= 0, self.values[np.maximum(k, 0)], np.inf)

    @classmethod
    def from_function(cls, fn, r_lo: float, r_hi: float, n: int = 20001) -> "IsoperimetricProfile":
        r = np.geomspace(r_lo, r_hi, n)
        return cls(r, np.asarray(fn(r), dtype=float), kind="sampled")


def _subset_table(env: Environment, verts: np.ndarray, laziness: float) -> tuple:
    """Volume, boundary flow and connectivity of every nonempty subset of verts."""
    k = len(verts)
    pos = {int(v): j for j, v in enumerate(verts)}
    nbr, wts = env.neighbor_table
    pi = env.pi[verts]
    adj = np.zeros(k, dtype=np.int64)
    inner = []  # (j1, j2, w) edges inside verts
    for j, v in enumerate(verts):
        for y, w in zip(nbr[v], wts[v]):
            if y >= 0 and w > 0 and int(y) in pos:
                j2 = pos[int(y)]
                adj[j] |= 1 << j2
                if j < j2:
                    inner.append((j, j2, w))
    masks = np.arange(1, 1 << k, dtype=np.int64)
    bits = ((masks[:, None] >> np.arange(k)) & 1).astype(bool)
    vol = bits @ pi
    # flow out of A: all of pi(A) minus the internal double-counted weight
    internal = np.zeros(len(masks))
    for j1, j2, w in inner:
        internal += w * (bits[:, j1] & bits[:, j2])
    flow = (1.0 - laziness) * (vol - 2.0 * internal)
    reach = masks & -masks
    for _ in range(k):
        grow = np.zeros_like(reach)
        for j in range(k):
            grow |= np.where((reach >> j) & 1, adj[j], 0)
        new = (reach | grow) & masks
        if np.array_equal(new, reach):
            break
        reach = new
    return vol, flow, reach == masks


def _step_profile(vol, flow) -> tuple:
    ratio = flow / vol
    order = np.argsort(vol, kind="stable")
    v, r = vol[order], ratio[order]
    run = np.minimum.accumulate(r)
    # keep the last entry of each equal-volume run
    uniq, idx = np.unique(v, return_index=True)
    last = np.append(idx[1:] - 1, len(v) - 1)
    return uniq, run[last]


def isoperimetric_profile(env: Environment, cutoff: int = 18, laziness: float = 0.0,
                          connected_only: bool = True, allow_fallback: bool = False,
                          vertices=None) -> IsoperimetricProfile:
    """Exact profile by subset enumeration on small graphs.

    Vertices default to all non-absorbing vertices with pi > 0. Edges to
    vertices outside that set count as boundary. laziness gamma scales the
    flow by 1 - gamma, which is the profile of the lazified chain.
    """
    dom = env.domain
    if vertices is None:
        verts = np.flatnonzero((env.pi > 0) & ~dom.absorbing)
    else:
        verts = np.array([dom.index(v) for v in vertices], dtype=np.int64)
    if len(verts) > cutoff:
        if not allow_fallback:
            raise PreconditionError(f"{len(verts)} vertices exceed the enumeration cutoff {cutoff}")
        return _greedy_profile(env, verts, laziness, cutoff)
    vol, flow, conn = _subset_table(env, verts, laziness)
    if connected_only:
        vol, flow = vol[conn], flow[conn]
    v, phi = _step_profile(vol, flow)
    return IsoperimetricProfile(v, phi, cutoff, True, "step")


def _greedy_profile(env: Environment, verts, laziness: float, cutoff: int) -> IsoperimetricProfile:
    """Upper bounds on phi from greedy growth out of every vertex."""
    nbr, wts = env.neighbor_table
    allowed = np.zeros(env.domain.n_vertices, dtype=bool)
    allowed[verts] = True
    vols, flows = [], []
    for s in verts:
        A = {int(s)}
        vol = env.pi[s]
        flow = env.pi[s]
        while True:
            vols.append(vol)
            flows.append((1.0 - laziness) * flow)
            best, best_ratio = None, np.inf
            for x in A:
                for y, w in zip(nbr[x], wts[x]):
                    y = int(y)
                    if y < 0 or w <= 0 or not allowed[y] or y in A:
                        continue
                    inside = sum(wy for z, wy in zip(nbr[y], wts[y]) if int(z) in A)
                    f = flow + env.pi[y] - 2 * inside
                    r = f / (vol + env.pi[y])
                    if r < best_ratio:
                        best, best_ratio, best_flow = y, r, f
            if best is None:
                break
            A.add(best)
            vol += env.pi[best]
            flow = best_flow
    v, phi = _step_profile(np.array(vols), np.array(flows))
    return IsoperimetricProfile(v, phi, cutoff, False, "step")


def morris_peres_integral(profile: IsoperimetricProfile, lo: float, hi: float) -> float:
    """Integral of dr / (r phi(r)^2) over [lo, hi]."""
    if hi <= lo:
        return 0.0
    if profile.kind == "sampled":
        r = profile.volumes
        if lo < r[0] * (1 - 1e-12) or hi > r[-1] * (1 + 1e-12):
            raise PreconditionError(f"profile grid [{r[0]}, {r[-1]}] does not cover [{lo}, {hi}]")
        inside = (r > lo) & (r < hi)
        grid = np.concatenate([[lo], r[inside], [hi]])
        phi = profile(grid)
        if np.any(phi <= 0):
            return math.inf
        return float(np.trapezoid(1.0 / (grid * phi ** 2), grid))
    # step profile: exact piecewise integration of (1/phi_k^2) d log r
    edges = np.concatenate([[lo], profile.volumes[(profile.volumes > lo) & (profile.volumes < hi)], [hi]])
    total = 0.0
    for a, b in zip(edges[:-1], edges[1:]):
        phi = float(profile(a))
        if phi == 0.0:
            return math.inf
        if np.isfinite(phi):
            total += math.log(b / a) / phi ** 2
    return total


def morris_peres_threshold(profile: IsoperimetricProfile, gamma: float, eps: float, pi_min: float):
    """Smallest integer n with n >= 1 + ((1 - gamma)/gamma)^2 * integral over [4 pi_min, 4/eps].

    profile must belong to the chain the bound is applied to (the lazified
    one). Returns math.inf when the profile vanishes inside the range.
    """
    if not 0 < gamma < 0.5:
        raise PreconditionError("gamma must lie in (0, 1/2)")
    lo, hi = 4.0 * pi_min, 4.0 / eps
    if hi <= lo:
        return 1
    integral = morris_peres_integral(profile, lo, hi)
    if not np.isfinite(integral):
        return math.inf
    return int(math.ceil(1.0 + ((1.0 - gamma) / gamma) ** 2 * integral - 1e-12))


def verify_morris_peres(env: Environment, gamma: float = 0.25, eps: float = 0.1, cutoff: int = 18) -> dict:
    """Check P'^n(x, y) <= eps pi(y) at the threshold n for every pair, P' lazified."""
    dom = env.domain
    verts = np.flatnonzero((env.pi > 0) & ~dom.absorbing)
    prof = isoperimetric_profile(env, cutoff, laziness=gamma)
    P = lazify(env.transition_matrix(), gamma).toarray()[np.ix_(verts, verts)]
    pi = env.pi[verts]
    checked, vacuous, worst = 0, 0, -np.inf
    thresholds = {}
    powers: dict = {}
    for a in range(len(verts)):
        for b in range(len(verts)):
            n = morris_peres_threshold(prof, gamma, eps, min(pi[a], pi[b]))
            if not np.isfinite(n):
                vacuous += 1
                continue
            if n not in powers:
                powers[n] = np.linalg.matrix_power(P, int(n))
            ratio = powers[n][a, b] / (eps * pi[b])
            worst = max(worst, ratio)
            thresholds[(int(verts[a]), int(verts[b]))] = int(n)
            checked += 1
    return {"checked": checked, "vacuous": vacuous, "worst_ratio": float(worst),
            "holds": bool(worst <= 1.0 + 1e-12) if checked else True, "thresholds": thresholds}


# ---------------------------------------------------------------------------
# continuous time


def uniformized_kernel(env: Environment, starts, times, trunc: float = 1e-10) -> np.ndarray:
    """VSRW distributions exp(t L)(x, .) for each start, shape (len(times), len(starts), V).

    Uses P_u = I + L / Lam with Lam = max pi and Poisson(Lam t) weights,
    truncated so the neglected mass is below trunc.
    """
    starts = np.atleast_1d(np.asarray(starts, dtype=np.int64))
    times = np.atleast_1d(np.asarray(times, dtype=float))
    lam = float(env.pi.max())
    n = env.domain.n_vertices
    W = env.weight_matrix
    PuT = (sp.identity(n) + (W - sp.diags(env.pi)) / lam).T.tocsr()
    kmax = int(stats.poisson.isf(trunc, lam * times.max())) + 1 if times.max() > 0 else 0
    mu = np.zeros((n, len(starts)))
    mu[starts, np.arange(len(starts))] = 1.0
    out = np.zeros((len(times), len(starts), n))
    for k in range(kmax + 1):
        for ti, t in enumerate(times):
            w = stats.poisson.pmf(k, lam * t) if t > 0 else float(k == 0)
            if w > 0:
                out[ti] += w * mu.T
        mu = PuT @ mu
    return out


def diffusive_bound_stats(env: Environment, radius: int, times, method: str = "exact",
                          n_walks: int = 2000, seed: int = 0, center=None) -> dict:
    """sup over |x - center|_inf <= radius and t in times of E|Y_t - x| / sqrt(t) and t^{d/2} P(Y_t = x)."""
    dom = env.domain
    c = dom.center if center is None else dom.index(center)
    disp_c = dom.displacement(c, np.arange(dom.n_vertices))
    starts = np.flatnonzero((np.max(np.abs(disp_c), axis=1) <= radius) & (env.pi > 0))
    times = np.asarray(times, dtype=float)
    mean_disp = np.zeros((len(times), len(starts)))
    ret = np.zeros((len(times), len(starts)))
    if method == "exact":
        K = uniformized_kernel(env, starts, times)
        for j, x in enumerate(starts):
            dist = np.linalg.norm(dom.displacement(x, np.arange(dom.n_vertices)).astype(float), axis=1)
            mean_disp[:, j] = K[:, j, :] @ dist
            ret[:, j] = K[:, j, x]
    elif method == "monte_carlo":
        from .walk import vsrw_batch
        for j, x in enumerate(starts):
            for ti, t in enumerate(times):
                ids = np.arange(n_walks) + n_walks * (j * len(times) + ti)
                pos, disp = vsrw_batch(env, np.full(n_walks, x), t, seed, walk_ids=ids)
                mean_disp[ti, j] = np.mean(np.linalg.norm(disp.astype(float), axis=1))
                ret[ti, j] = np.mean(pos == x)
    else:
        raise PreconditionError(f"unknown method {method!r}")
    with np.errstate(divide="ignore", invalid="ignore"):
        a = np.where(times[:, None] > 0, mean_disp / np.sqrt(times)[:, None], 0.0)
    b = times[:, None] ** (dom.d / 2) * ret
    return {"sup_displacement": float(a.max()), "sup_return": float(b.max()),
            "displacement": a.max(axis=1), "return": b.max(axis=1), "times": times, "method": method,
            "mean_displacement": mean_disp}
