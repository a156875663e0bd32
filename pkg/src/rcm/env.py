"""Conductance environments on finite boxes and tori of Z^d.

An environment stores one nonnegative value per undirected nearest-neighbour
edge. Edges are kept in a canonical order: direction-major, then the
lexicographic (C-order) index of the lower endpoint. Every random draw is
indexed by that order, so a (law, domain, seed) triple always yields the
same bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .errors import ConstructionError, DegenerateVertexError, FormatError, GeometryError

BOUNDARY_MODES = ("free", "periodic", "absorbing")
_BOUNDARY_CODE = {"free": 0, "periodic": 1, "absorbing": 2}
MAGIC = b"RCM1"


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Counter-based generator for the stream identified by (seed, *stream)."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *[int(s) for s in stream]])
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(seed: int, *stream: int) -> int:
    """Integer seed for a sub-experiment, e.g. environment sample k of a sweep."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *[int(s) for s in stream]])
    return int(ss.generate_state(1, np.uint64)[0] >> 1)


# ---------------------------------------------------------------------------
# geometry


@dataclass(frozen=True)
class LatticeDomain:
    """Box or torus in Z^d.

    boundary is one of "free" (edges leaving the box are absent),
    "periodic" (torus) or "absorbing" (box whose outer layer of vertices
    absorbs walks and carries Dirichlet data).
    """

    sides: tuple
    boundary: str = "periodic"

    def __post_init__(self):
        sides = tuple(int(s) for s in np.atleast_1d(self.sides))
        object.__setattr__(self, "sides", sides)
        if len(sides) < 1:
            raise ConstructionError("sides", "dimension must be at least 1")
        if self.boundary not in BOUNDARY_MODES:
            raise ConstructionError("boundary", f"unknown mode {self.boundary!r}")
        lo = 2 if self.boundary == "periodic" else 1
        for i, s in enumerate(sides):
            if s < lo:
                raise ConstructionError(f"sides[{i}]", f"must be >= {lo}, got {s}")
        if self.boundary == "absorbing" and min(sides) < 3:
            raise ConstructionError("sides", "absorbing boxes need side >= 3 for a nonempty interior")

    @property
    def d(self) -> int:
        return len(self.sides)

    @property
    def periodic(self) -> bool:
        return self.boundary == "periodic"

    @cached_property
    def n_vertices(self) -> int:
        return int(np.prod(self.sides))

    def index(self, x) -> int:
        """Linear index of a vertex given as an int or a coordinate tuple."""
        if np.isscalar(x):
            x = int(x)
            if not 0 <= x < self.n_vertices:
                raise GeometryError(f"vertex index {x} outside domain")
            return x
        c = tuple(int(v) for v in x)
        if len(c) != self.d or any(not 0 <= v < s for v, s in zip(c, self.sides)):
            raise GeometryError(f"vertex {c} outside domain {self.sides}")
        return int(np.ravel_multi_index(c, self.sides))

    def coords(self, idx) -> np.ndarray:
        """Coordinates (..., d) of linear indices."""
        return np.stack(np.unravel_index(np.asarray(idx), self.sides), axis=-1)

    @cached_property
    def all_coords(self) -> np.ndarray:
        c = self.coords(np.arange(self.n_vertices))
        c.setflags(write=False)
        return c

    @property
    def center(self) -> int:
        return self.index(tuple(s // 2 for s in self.sides))

    def edge_shape(self, i: int) -> tuple:
        if self.periodic:
            return self.sides
        s = list(self.sides)
        s[i] -= 1
        return tuple(s)

    @cached_property
    def _edge_offsets(self) -> np.ndarray:
        sizes = [int(np.prod(self.edge_shape(i))) for i in range(self.d)]
        return np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)

    @property
    def n_edges(self) -> int:
        return int(self._edge_offsets[-1])

    @cached_property
    def edges(self) -> tuple:
        """(u, v, direction) arrays in canonical order, with v = u + e_direction."""
        us, vs, ds = [], [], []
        for i in range(self.d):
            shape = self.edge_shape(i)
            c = np.stack(np.unravel_index(np.arange(int(np.prod(shape))), shape), axis=-1)
            u = np.ravel_multi_index(c.T, self.sides)
            c2 = c.copy()
            c2[:, i] += 1
            if self.periodic:
                c2[:, i] %= self.sides[i]
            v = np.ravel_multi_index(c2.T, self.sides)
            us.append(u)
            vs.append(v)
            ds.append(np.full(len(u), i))
        out = tuple(np.concatenate(a).astype(np.int64) for a in (us, vs, ds))
        for a in out:
            a.setflags(write=False)
        return out

    def edge_index(self, x, y) -> int:
        """Canonical index of the edge joining neighbouring vertices x and y."""
        cx = self.coords(self.index(x))
        cy = self.coords(self.index(y))
        diff = cy - cx
        if self.periodic:
            diff = (diff + np.array(self.sides) // 2) % np.array(self.sides) - np.array(self.sides) // 2
            # side 2 tori have two parallel edges; the forward one is returned
        nz = np.flatnonzero(diff)
        if len(nz) != 1 or abs(diff[nz[0]]) != 1:
            raise GeometryError(f"{tuple(cx)} and {tuple(cy)} are not neighbours")
        i = int(nz[0])
        base = cx if diff[i] == 1 else cy
        return int(self._edge_offsets[i] + np.ravel_multi_index(tuple(base), self.edge_shape(i)))

    @cached_property
    def outer_layer(self) -> np.ndarray:
        """Mask of vertices with some coordinate on a face of the box."""
        c = self.all_coords
        m = np.zeros(self.n_vertices, dtype=bool)
        for i, s in enumerate(self.sides):
            m |= (c[:, i] == 0) | (c[:, i] == s - 1)
        m.setflags(write=False)
        return m

    @cached_property
    def absorbing(self) -> np.ndarray:
        """Mask of absorbing vertices (outer layer in absorbing mode, else empty)."""
        if self.boundary == "absorbing":
            return self.outer_layer
        m = np.zeros(self.n_vertices, dtype=bool)
        m.setflags(write=False)
        return m

    def displacement(self, x, y) -> np.ndarray:
        """y - x, using the shortest image on periodic axes."""
        diff = self.coords(y) - self.coords(x)
        if self.periodic:
            s = np.array(self.sides)
            diff = (diff + s // 2) % s - s // 2
        return diff

    def to_dict(self) -> dict:
        return {"sides": list(self.sides), "boundary": self.boundary}

    @classmethod
    def from_dict(cls, d: dict) -> "LatticeDomain":
        return cls(tuple(d["sides"]), d.get("boundary", "periodic"))


# ---------------------------------------------------------------------------
# laws


_DIST_ARITY = {"constant": 1, "uniform": 2, "two_point": 3, "log_uniform": 2}


@dataclass(frozen=True)
class Distribution:
    """Single-edge conductance law.

    constant(c), uniform(a, b), two_point(v1, p1, v2) (v1 with probability p1,
    else v2), log_uniform(a, b) (log of the value uniform on [log a, log b]).
    """

    kind: str
    params: tuple

    def __post_init__(self):
        object.__setattr__(self, "params", tuple(float(p) for p in self.params))
        if self.kind not in _DIST_ARITY:
            raise ConstructionError("distribution.kind", f"unknown {self.kind!r}")
        if len(self.params) != _DIST_ARITY[self.kind]:
            raise ConstructionError("distribution.params", f"{self.kind} takes {_DIST_ARITY[self.kind]} values")
        p = self.params
        if not all(np.isfinite(p)):
            raise ConstructionError("distribution.params", "must be finite")
        if self.kind == "constant" and p[0] < 0:
            raise ConstructionError("distribution.params[0]", "value must be >= 0")
        if self.kind in ("uniform", "log_uniform"):
            if p[0] > p[1]:
                raise ConstructionError("distribution.params", "need a <= b")
            if p[0] < 0 or (self.kind == "log_uniform" and p[0] <= 0):
                raise ConstructionError("distribution.params[0]", "lower end out of range")
        if self.kind == "two_point":
            if p[0] < 0 or p[2] < 0:
                raise ConstructionError("distribution.params", "values must be >= 0")
            if not 0 <= p[1] <= 1:
                raise ConstructionError("distribution.params[1]", "probability must lie in [0, 1]")

    def sample(self, rng: np.random.Generator, size) -> np.ndarray:
        p = self.params
        u = rng.random(size)
        if self.kind == "constant":
            return np.full(size, p[0])
        if self.kind == "uniform":
            return p[0] + (p[1] - p[0]) * u
        if self.kind == "log_uniform":
            return np.exp(np.log(p[0]) + (np.log(p[1]) - np.log(p[0])) * u)
        return np.where(u < p[1], p[0], p[2])

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": list(self.params)}

    @classmethod
    def from_dict(cls, d: dict) -> "Distribution":
        return cls(d["kind"], tuple(d["params"]))


@dataclass(frozen=True)
class TrapSpec:
    """Shielded edge: core vertex a, b = a + e_direction, access x = b + e_direction."""

    strength: float
    core: tuple
    direction: int = 0
    origin: tuple | None = None

    def to_dict(self) -> dict:
        return {"strength": self.strength, "core": list(self.core), "direction": self.direction,
                "origin": None if self.origin is None else list(self.origin)}


LAW_KINDS = ("iid", "percolation", "line_constant", "trap", "constant")


@dataclass(frozen=True)
class EnvironmentLaw:
    kind: str
    distribution: Distribution | None = None
    p: float | None = None
    c: float | None = None
    trap: TrapSpec | None = None
    background: "EnvironmentLaw | None" = field(default=None)

    def __post_init__(self):
        if self.kind not in LAW_KINDS:
            raise ConstructionError("law.kind", f"unknown {self.kind!r}")
        if self.kind in ("iid", "line_constant") and self.distribution is None:
            raise ConstructionError("law.distribution", "required")
        if self.kind == "percolation":
            if self.p is None or not 0 <= self.p <= 1:
                raise ConstructionError("law.p", f"must lie in [0, 1], got {self.p}")
        if self.kind == "constant":
            if self.c is None or not np.isfinite(self.c) or self.c < 0:
                raise ConstructionError("law.c", f"must be finite and >= 0, got {self.c}")
        if self.kind == "trap":
            if self.trap is None:
                raise ConstructionError("law.trap", "required")
            if not 0 < self.trap.strength <= 1:
                raise ConstructionError("law.trap.strength", "must lie in (0, 1]")

    @classmethod
    def iid(cls, dist: Distribution) -> "EnvironmentLaw":
        return cls("iid", distribution=dist)

    @classmethod
    def percolation(cls, p: float) -> "EnvironmentLaw":
        return cls("percolation", p=p)

    @classmethod
    def line_constant(cls, dist: Distribution) -> "EnvironmentLaw":
        return cls("line_constant", distribution=dist)

    @classmethod
    def constant(cls, c: float = 1.0) -> "EnvironmentLaw":
        return cls("constant", c=c)

    def to_dict(self) -> dict:
        out: dict = {"kind": self.kind}
        if self.distribution is not None:
            out["distribution"] = self.distribution.to_dict()
        if self.p is not None:
            out["p"] = self.p
        if self.c is not None:
            out["c"] = self.c
        if self.trap is not None:
            out["trap"] = self.trap.to_dict()
        if self.background is not None:
            out["background"] = self.background.to_dict()
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "EnvironmentLaw":
        kind = d.get("kind")
        dist = Distribution.from_dict(d["distribution"]) if "distribution" in d else None
        trap = None
        if "trap" in d:
            t = d["trap"]
            trap = TrapSpec(float(t["strength"]), tuple(t["core"]), int(t.get("direction", 0)),
                            None if t.get("origin") is None else tuple(t["origin"]))
        bg = cls.from_dict(d["background"]) if d.get("background") else None
        p = d.get("p")
        c = d.get("c")
        return cls(kind, distribution=dist, p=None if p is None else float(p),
                   c=None if c is None else float(c), trap=trap, background=bg)


# ---------------------------------------------------------------------------
# environment


class Environment:
    """Immutable nearest-neighbour conductances on a LatticeDomain."""

    def __init__(self, domain: LatticeDomain, values):
        values = np.array(values, dtype=np.float64).ravel()
        if values.shape != (domain.n_edges,):
            raise ConstructionError("values", f"expected {domain.n_edges} edge values, got {values.size}")
        if not np.all(np.isfinite(values)) or np.any(values < 0):
            raise ConstructionError("values", "conductances must be finite and nonnegative")
        values.setflags(write=False)
        self.domain = domain
        self.values = values

    def __repr__(self):
        return f"Environment(sides={self.domain.sides}, boundary={self.domain.boundary!r})"

    def __eq__(self, other):
        return (isinstance(other, Environment) and self.domain == other.domain
                and self.values.tobytes() == other.values.tobytes())

    def __hash__(self):
        return hash((self.domain, self.values.tobytes()))

    @property
    def d(self) -> int:
        return self.domain.d

    def with_values(self, values) -> "Environment":
        return Environment(self.domain, values)

    def direction_values(self, i: int) -> np.ndarray:
        """Conductances of direction-i edges shaped by their base vertex."""
        o = self.domain._edge_offsets
        return self.values[o[i]:o[i + 1]].reshape(self.domain.edge_shape(i))

    def conductance(self, x, y) -> float:
        return float(self.values[self.domain.edge_index(x, y)])

    @cached_property
    def pi(self) -> np.ndarray:
        u, v, _ = self.domain.edges
        n = self.domain.n_vertices
        p = np.bincount(u, self.values, n) + np.bincount(v, self.values, n)
        p.setflags(write=False)
        return p

    @cached_property
    def weight_matrix(self) -> sp.csr_matrix:
        """Symmetric sparse matrix of conductances (parallel edges summed)."""
        u, v, _ = self.domain.edges
        n = self.domain.n_vertices
        w = self.values
        W = sp.coo_matrix((np.concatenate([w, w]), (np.concatenate([u, v]), np.concatenate([v, u]))),
                          shape=(n, n)).tocsr()
        W.sum_duplicates()
        return W

    @cached_property
    def laplacian(self) -> sp.csr_matrix:
        """Positive semidefinite matrix diag(pi) - W, i.e. minus the generator."""
        return (sp.diags(self.pi) - self.weight_matrix).tocsr()

    @cached_property
    def neighbor_table(self) -> tuple:
        """(nbr, wts) of shape (V, 2d), slots ordered +e_1, -e_1, +e_2, -e_2, ...

        Missing neighbours (edges leaving a free or absorbing box) have
        nbr = -1 and weight 0.
        """
        dom = self.domain
        n, d = dom.n_vertices, dom.d
        nbr = np.full((n, 2 * d), -1, dtype=np.int64)
        wts = np.zeros((n, 2 * d))
        u, v, dirs = dom.edges
        for i in range(d):
            m = dirs == i
            nbr[u[m], 2 * i] = v[m]
            wts[u[m], 2 * i] = self.values[m]
            nbr[v[m], 2 * i + 1] = u[m]
            wts[v[m], 2 * i + 1] = self.values[m]
        nbr.setflags(write=False)
        wts.setflags(write=False)
        return nbr, wts

    def transition_matrix(self, freeze_absorbing: bool = True) -> sp.csr_matrix:
        """Row-stochastic kernel P(x, y) = w_xy / pi(x).

        Rows of degenerate vertices are zero. With freeze_absorbing, absorbing
        vertices become fixed points, so mass is conserved and the killed walk
        is read off the interior block.
        """
        pi = self.pi
        inv = np.divide(1.0, pi, out=np.zeros_like(pi), where=pi > 0)
        P = sp.diags(inv) @ self.weight_matrix
        ab = self.domain.absorbing
        if freeze_absorbing and ab.any():
            keep = sp.diags((~ab).astype(float))
            P = keep @ P + sp.diags(ab.astype(float))
        return sp.csr_matrix(P)


def pi_weight(env: Environment, x) -> float:
    """Total conductance at x."""
    return float(env.pi[env.domain.index(x)])


def transition_row(env: Environment, x) -> tuple:
    """Neighbours of x (slot order, missing slots dropped) and their probabilities.

    The last positive entry absorbs the rounding residual so the row sums to
    exactly 1.
    """
    i = env.domain.index(x)
    total = env.pi[i]
    if total <= 0:
        raise DegenerateVertexError(f"vertex {tuple(env.domain.coords(i))} has zero total conductance")
    nbr, wts = env.neighbor_table
    keep = nbr[i] >= 0
    ys = nbr[i][keep].copy()
    w = wts[i][keep]
    p = w / total
    last = int(np.flatnonzero(w > 0)[-1])
    p[last] = 0.0
    p[last] = 1.0 - p.sum()
    return ys, p


# ---------------------------------------------------------------------------
# construction


def build_environment(law: EnvironmentLaw, domain: LatticeDomain, seed: int = 0) -> Environment:
    """Sample an environment from law; a pure function of (law, domain, seed)."""
    if law.kind == "trap":
        bg = law.background or EnvironmentLaw.constant(1.0)
        t = law.trap
        return build_trap_environment(domain, t.strength, t.core, bg, seed, direction=t.direction, origin=t.origin)
    n = domain.n_edges
    if law.kind == "constant":
        return Environment(domain, np.full(n, law.c))
    rng = make_rng(seed, 0)
    if law.kind == "percolation":
        return Environment(domain, (rng.random(n) < law.p).astype(np.float64))
    if law.kind == "iid":
        return Environment(domain, law.distribution.sample(rng, n))
    # line_constant: one draw per line of parallel edges, copied along the line
    parts = []
    for i in range(domain.d):
        shape = domain.edge_shape(i)
        lines = list(shape)
        lines[i] = 1
        draw = law.distribution.sample(rng, int(np.prod(lines))).reshape(lines)
        parts.append(np.broadcast_to(draw, shape).ravel())
    return Environment(domain, np.concatenate(parts))


def _lattice_path(a: np.ndarray, b: np.ndarray) -> list:
    """Axis-by-axis lattice path from a to b, endpoints included."""
    path = [a.copy()]
    cur = a.copy()
    for i in range(len(a)):
        step = 1 if b[i] > cur[i] else -1
        while cur[i] != b[i]:
            cur[i] += step
            path.append(cur.copy())
    return path


def trap_vertices(domain: LatticeDomain, core, direction: int = 0, origin=None) -> dict:
    """Vertex indices of a trap: core a, partner b, access x, origin o and the access path."""
    if domain.d < 2:
        raise GeometryError("trap construction needs d >= 2")
    e = np.zeros(domain.d, dtype=np.int64)
    e[direction] = 1
    a = np.array(core, dtype=np.int64)
    b = a + e
    x = b + e
    o = np.array(origin if origin is not None else domain.coords(domain.center), dtype=np.int64)
    path = _lattice_path(x, o)
    sides = np.array(domain.sides)
    # every vertex the trap touches must sit strictly inside so that all 2d shield edges exist
    for c in (a, b):
        if np.any(c < 1) or np.any(c > sides - 2):
            raise GeometryError(f"trap vertex {tuple(c)} is not interior to {domain.sides}")
    for c in path:
        if np.any(c < 0) or np.any(c >= sides):
            raise GeometryError(f"access path leaves the domain at {tuple(c)}")
        if domain.absorbing[domain.index(c)]:
            raise GeometryError(f"access path hits the absorbing layer at {tuple(c)}")
    ia, ib = domain.index(a), domain.index(b)
    ipath = [domain.index(c) for c in path]
    if ia in ipath or ib in ipath:
        raise GeometryError("access path runs through the trap core")
    return {"a": ia, "b": ib, "x": ipath[0], "origin": ipath[-1], "path": ipath}


def build_trap_environment(domain: LatticeDomain, trap_strength: float, trap_location,
                           background: EnvironmentLaw | None = None, seed: int = 0,
                           direction: int = 0, origin=None) -> Environment:
    """Background environment with one shielded edge wired to the origin.

    The core edge (a, b) has conductance 1, every other edge at a or b has
    conductance trap_strength (so the edge from b to the access vertex is a
    shield edge), and a unit-conductance lattice path joins the access
    vertex to the origin.
    """
    if not 0 < trap_strength <= 1:
        raise ConstructionError("trap_strength", "must lie in (0, 1]")
    tv = trap_vertices(domain, trap_location, direction, origin)
    base = build_environment(background or EnvironmentLaw.constant(1.0), domain, seed)
    vals = base.values.copy()
    p = tv["path"]
    for u, v in zip(p[:-1], p[1:]):
        vals[domain.edge_index(u, v)] = 1.0
    nbr, _ = base.neighbor_table
    for c in (tv["a"], tv["b"]):
        for y in nbr[c]:
            if y >= 0:
                vals[domain.edge_index(c, int(y))] = trap_strength
    vals[domain.edge_index(tv["a"], tv["b"])] = 1.0
    return Environment(domain, vals)


# ---------------------------------------------------------------------------
# serialization


def serialize(env: Environment) -> bytes:
    dom = env.domain
    head = MAGIC + struct.pack(f"<I{dom.d}IB", dom.d, *dom.sides, _BOUNDARY_CODE[dom.boundary])
    return head + env.values.astype("<f8").tobytes()


def header_size(d: int) -> int:
    return 4 + 4 + 4 * d + 1


def deserialize(data: bytes) -> Environment:
    if len(data) < 8:
        raise FormatError("stream truncated before header")
    if data[:4] != MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    (d,) = struct.unpack_from("<I", data, 4)
    if d < 1 or len(data) < header_size(d):
        raise FormatError("stream truncated inside header")
    sides = struct.unpack_from(f"<{d}I", data, 8)
    (code,) = struct.unpack_from("<B", data, 8 + 4 * d)
    modes = {v: k for k, v in _BOUNDARY_CODE.items()}
    if code not in modes:
        raise FormatError(f"unknown boundary code {code}")
    try:
        dom = LatticeDomain(tuple(sides), modes[code])
    except ConstructionError as exc:
        raise FormatError(str(exc)) from exc
    body = data[header_size(d):]
    if len(body) != 8 * dom.n_edges:
        raise FormatError(f"expected {8 * dom.n_edges} bytes of edge data, got {len(body)}")
    return Environment(dom, np.frombuffer(body, dtype="<f8").astype(np.float64))


def to_json(env: Environment) -> str:
    dom = env.domain
    return json.dumps({"format": "RCM1", "d": dom.d, "sides": list(dom.sides), "boundary": dom.boundary,
                       "values": env.values.tolist()})


def from_json(text: str) -> Environment:
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"invalid JSON: {exc}") from exc
    if obj.get("format") != "RCM1":
        raise FormatError(f"unsupported format {obj.get('format')!r}")
    if obj.get("d") != len(obj.get("sides", [])):
        raise FormatError("d does not match the number of sides")
    dom = LatticeDomain(tuple(obj["sides"]), obj["boundary"])
    vals = obj["values"]
    if len(vals) != dom.n_edges:
        raise FormatError(f"expected {dom.n_edges} values, got {len(vals)}")
    return Environment(dom, vals)


def save(env: Environment, path: str) -> None:
    if str(path).endswith(".json"):
        with open(path, "w") as fh:
            fh.write(to_json(env))
    else:
        with open(path, "wb") as fh:
            fh.write(serialize(env))


def load(path: str) -> Environment:
    if str(path).endswith(".json"):
        with open(path) as fh:
            return from_json(fh.read())
    with open(path, "rb") as fh:
        return deserialize(fh.read())


def as_vertex_array(domain: LatticeDomain, xs: Sequence) -> np.ndarray:
    return np.array([domain.index(x) for x in xs], dtype=np.int64)
