"""Discrete-time, constant-speed and variable-speed walks among conductances.

Each walk w draws its jump uniforms from the stream (seed, 1, w) and its
holding times from (seed, 2, w). The three walk types therefore share the
same embedded jump chain for a given (seed, w), and a batch of walks gives
exactly the paths the single-walk simulators would produce one by one.
Displacements are tracked in the universal cover, so winding around a
torus is counted.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .env import Environment, make_rng
from .errors import DegenerateVertexError, PreconditionError

_JUMP, _HOLD, _START = 1, 2, 3
_CHUNK = 512


@dataclass
class WalkPath:
    start: int
    vertices: np.ndarray
    displacement: np.ndarray  # (len, d) position relative to start in the cover
    times: np.ndarray | None = None  # entrance time of each vertex; times[0] = 0
    seed: int = 0
    absorbed: bool = False

    def __len__(self):
        return len(self.vertices)

    @property
    def n_jumps(self) -> int:
        return len(self.vertices) - 1


class _Kernel:
    """Cumulative slot probabilities and slot displacements for fast sampling."""

    def __init__(self, env: Environment):
        nbr, wts = env.neighbor_table
        pi = env.pi
        d = env.d
        with np.errstate(invalid="ignore", divide="ignore"):
            cum = np.cumsum(wts, axis=1) / pi[:, None]
        # from the last positive slot on, the threshold is above any uniform
        last = np.where(wts > 0, np.arange(2 * d), -1).max(axis=1)
        cum[np.arange(2 * d)[None, :] >= last[:, None]] = 2.0
        self.cum = cum
        self.nbr = nbr
        self.pi = pi
        step = np.zeros((2 * d, d), dtype=np.int64)
        for i in range(d):
            step[2 * i, i] = 1
            step[2 * i + 1, i] = -1
        self.step = step
        self.absorbing = env.domain.absorbing

    def jump(self, pos: np.ndarray, u: np.ndarray) -> tuple:
        slot = np.sum(u[:, None] >= self.cum[pos], axis=1)
        return self.nbr[pos, slot], self.step[slot]


def _check_start(env: Environment, x0: int) -> None:
    if env.pi[x0] <= 0:
        raise DegenerateVertexError(f"start vertex {tuple(env.domain.coords(x0))} has zero total conductance")


def _uniform_blocks(seed: int, walk_ids, stream: int, total: int):
    """Yield (n_walks, k) blocks of per-walk uniforms, k summing to total."""
    gens = [make_rng(seed, stream, int(w)) for w in walk_ids]
    done = 0
    while done < total:
        k = min(_CHUNK, total - done)
        yield np.stack([g.random(k) for g in gens]) if gens else np.zeros((0, k))
        done += k


def simulate_discrete(env: Environment, x0, n_steps: int, seed: int = 0, walk_index: int = 0) -> WalkPath:
    """n_steps of the discrete chain P(x, y) = w_xy / pi(x)."""
    dom = env.domain
    x = dom.index(x0)
    _check_start(env, x)
    K = _Kernel(env)
    verts = np.empty(n_steps + 1, dtype=np.int64)
    disp = np.zeros((n_steps + 1, dom.d), dtype=np.int64)
    verts[0] = x
    pos = np.array([x])
    cur = np.zeros((1, dom.d), dtype=np.int64)
    k = 0
    absorbed = bool(K.absorbing[x])
    if not absorbed:
        for block in _uniform_blocks(seed, [walk_index], _JUMP, n_steps):
            for j in range(block.shape[1]):
                pos, st = K.jump(pos, block[:, j])
                cur = cur + st
                k += 1
                verts[k] = pos[0]
                disp[k] = cur[0]
                if K.absorbing[pos[0]]:
                    absorbed = True
                    break
            if absorbed:
                break
    return WalkPath(x, verts[:k + 1].copy(), disp[:k + 1].copy(), None, seed, absorbed)


def _simulate_timed(env: Environment, x0, t_max: float, seed: int, walk_index: int, variable: bool) -> WalkPath:
    dom = env.domain
    x = dom.index(x0)
    _check_start(env, x)
    if t_max < 0:
        raise PreconditionError("t_max must be nonnegative")
    K = _Kernel(env)
    hold_rng = make_rng(seed, _HOLD, walk_index)
    jump_rng = make_rng(seed, _JUMP, walk_index)
    verts, disps, times = [x], [np.zeros(dom.d, dtype=np.int64)], [0.0]
    t, pos, cur = 0.0, np.array([x]), np.zeros((1, dom.d), dtype=np.int64)
    absorbed = bool(K.absorbing[x])
    while not absorbed:
        holds = hold_rng.standard_exponential(_CHUNK)
        us = jump_rng.random(_CHUNK)
        stop = False
        for h, u in zip(holds, us):
            rate = K.pi[pos[0]] if variable else 1.0
            t += h / rate
            if t > t_max:
                stop = True
                break
            pos, st = K.jump(pos, np.array([u]))
            cur = cur + st
            verts.append(int(pos[0]))
            disps.append(cur[0].copy())
            times.append(t)
            if K.absorbing[pos[0]]:
                absorbed = True
                break
        if stop:
            break
    return WalkPath(x, np.array(verts, dtype=np.int64), np.array(disps), np.array(times), seed, absorbed)


def simulate_csrw(env: Environment, x0, t_max: float, seed: int = 0, walk_index: int = 0) -> WalkPath:
    """Discrete chain run with iid exponential(1) holding times, up to time t_max."""
    return _simulate_timed(env, x0, t_max, seed, walk_index, variable=False)


def simulate_vsrw(env: Environment, x0, t_max: float, seed: int = 0, walk_index: int = 0) -> WalkPath:
    """Walk holding an exponential(pi(x)) time at x, up to time t_max."""
    return _simulate_timed(env, x0, t_max, seed, walk_index, variable=True)


def blowup_statistic(path: WalkPath, env: Environment) -> np.ndarray:
    """Running sums of 1 / pi(X_k): the expected VSRW clock after k jumps."""
    return np.cumsum(1.0 / env.pi[path.vertices])


def local_drift(env: Environment, x) -> np.ndarray:
    """Expected one-step displacement sum_y P(x, y)(y - x)."""
    i = env.domain.index(x)
    _check_start(env, i)
    nbr, wts = env.neighbor_table
    p = wts[i] / env.pi[i]
    d = env.d
    return np.array([p[2 * k] - p[2 * k + 1] for k in range(d)])


def run_batch(env: Environment, starts, n_steps: int, seed: int = 0, walk_ids=None) -> tuple:
    """Advance many independent discrete walks; returns (final vertices, cover displacements)."""
    K = _Kernel(env)
    pos = np.asarray(starts, dtype=np.int64).copy()
    if np.any(env.pi[pos] <= 0):
        raise DegenerateVertexError("some walks start at degenerate vertices")
    walk_ids = np.arange(len(pos)) if walk_ids is None else np.asarray(walk_ids)
    disp = np.zeros((len(pos), env.d), dtype=np.int64)
    live = ~K.absorbing[pos]
    for block in _uniform_blocks(seed, walk_ids, _JUMP, n_steps):
        for j in range(block.shape[1]):
            new, st = K.jump(pos, block[:, j])
            pos = np.where(live, new, pos)
            disp += st * live[:, None]
            live &= ~K.absorbing[pos]
    return pos, disp


def random_starts(env: Environment, n_walks: int, seed: int) -> np.ndarray:
    """Start vertices drawn from pi / sum(pi), one stream per walk."""
    cdf = np.cumsum(env.pi)
    cdf /= cdf[-1]
    u = np.array([make_rng(seed, _START, w).random() for w in range(n_walks)])
    return np.minimum(np.searchsorted(cdf, u, side="right"), len(cdf) - 1).astype(np.int64)


def scaled_endpoint_samples(env: Environment, x0, n: int, n_walks: int, seed: int = 0) -> np.ndarray:
    """X_n / sqrt(n) for n_walks independent walks, shape (n_walks, d).

    With x0=None every walk starts at its own vertex drawn from pi. On a
    torus this makes the environment seen from the walk stationary from
    the first step, so the increments of the harmonic coordinate have the
    limiting variance at every step (annealed sampling). Otherwise all
    walks start at x0 (quenched sampling).
    """
    if x0 is None:
        starts = random_starts(env, n_walks, seed)
    else:
        starts = np.full(n_walks, env.domain.index(x0), dtype=np.int64)
    _, disp = run_batch(env, starts, n, seed)
    return disp / np.sqrt(n)


def first_hit(env: Environment, x0, A, B, n_walks: int, seed: int = 0, max_steps: int = 10**6) -> np.ndarray:
    """For walks from x0, which of the sets A or B is hit first at a time k >= 1.

    Returns per walk 0 (A first), 1 (B first) or -1 (neither within
    max_steps). A vertex in both sets counts as A.
    """
    A = np.asarray(A, dtype=bool)
    B = np.asarray(B, dtype=bool)
    x = env.domain.index(x0)
    _check_start(env, x)
    K = _Kernel(env)
    pos = np.full(n_walks, x, dtype=np.int64)
    out = np.full(n_walks, -1, dtype=np.int64)
    live = np.ones(n_walks, dtype=bool)
    for block in _uniform_blocks(seed, np.arange(n_walks), _JUMP, max_steps):
        for j in range(block.shape[1]):
            new, _ = K.jump(pos, block[:, j])
            pos = np.where(live, new, pos)
            ha = live & A[pos]
            hb = live & ~ha & B[pos]
            out[ha] = 0
            out[hb] = 1
            live &= ~(ha | hb)
        if not live.any():
            break
    return out


def vsrw_batch(env: Environment, starts, t: float, seed: int = 0, walk_ids=None) -> tuple:
    """Positions and cover displacements at time t of independent VSRWs.

    Walk w uses the same streams as simulate_vsrw(..., walk_index=w).
    """
    K = _Kernel(env)
    pos = np.asarray(starts, dtype=np.int64).copy()
    if np.any(env.pi[pos] <= 0):
        raise DegenerateVertexError("some walks start at degenerate vertices")
    walk_ids = np.arange(len(pos)) if walk_ids is None else np.asarray(walk_ids)
    hold = [make_rng(seed, _HOLD, int(w)) for w in walk_ids]
    jump = [make_rng(seed, _JUMP, int(w)) for w in walk_ids]
    clock = np.zeros(len(pos))
    disp = np.zeros((len(pos), env.d), dtype=np.int64)
    live = ~K.absorbing[pos]
    while live.any():
        hs = np.stack([g.standard_exponential(_CHUNK) for g in hold])
        us = np.stack([g.random(_CHUNK) for g in jump])
        for j in range(_CHUNK):
            clock = np.where(live, clock + hs[:, j] / K.pi[pos], clock)
            live &= clock <= t
            new, st = K.jump(pos, us[:, j])
            pos = np.where(live, new, pos)
            disp += st * live[:, None]
            live &= ~K.absorbing[pos]
            if not live.any():
                break
    return pos, disp
