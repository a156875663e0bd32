"""Connected components of the positive-conductance graph."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .env import Environment
from .errors import SelectionError


@dataclass(frozen=True)
class ClusterLabeling:
    """labels[x] is the smallest vertex index of x's component, or -1 if pi(x) = 0."""

    labels: np.ndarray
    sizes: dict
    largest: int | None
    crossing: int | None

    def members(self, label: int) -> np.ndarray:
        return np.flatnonzero(self.labels == label)

    @property
    def n_components(self) -> int:
        return len(self.sizes)

    def to_json(self) -> str:
        return json.dumps({"labels": {str(i): int(l) for i, l in enumerate(self.labels) if l >= 0},
                           "sizes": {str(k): int(v) for k, v in self.sizes.items()},
                           "largest": self.largest, "crossing": self.crossing})


def union_find(n: int, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Root of every vertex after merging the pairs (u, v).

    Array-based union-find: each round hooks the larger root of every
    still-split edge onto the smaller one, then compresses paths fully.
    Parents only ever decrease, so each root is its component's minimum.
    """
    parent = np.arange(n, dtype=np.int64)
    u = np.asarray(u, dtype=np.int64)
    v = np.asarray(v, dtype=np.int64)
    while True:
        pu, pv = parent[u], parent[v]
        split = pu != pv
        if not split.any():
            return parent
        u, v = u[split], v[split]
        lo = np.minimum(pu[split], pv[split])
        hi = np.maximum(pu[split], pv[split])
        np.minimum.at(parent, hi, lo)
        while True:
            gp = parent[parent]
            if np.array_equal(gp, parent):
                break
            parent = gp


def label_clusters(env: Environment) -> ClusterLabeling:
    dom = env.domain
    u, v, _ = dom.edges
    pos = env.values > 0
    roots = union_find(dom.n_vertices, u[pos], v[pos])
    labels = np.where(env.pi > 0, roots, -1)
    ids, counts = np.unique(labels[labels >= 0], return_counts=True)
    sizes = {int(i): int(c) for i, c in zip(ids, counts)}
    largest = None
    if sizes:
        # ties go to the smaller label
        largest = int(ids[np.argmax(counts)])
    crossing = None
    if not dom.periodic and sizes:
        c = dom.all_coords
        best = -1
        for i, s in enumerate(dom.sides):
            lo = set(np.unique(labels[(c[:, i] == 0) & (labels >= 0)]).tolist())
            hi = set(np.unique(labels[(c[:, i] == s - 1) & (labels >= 0)]).tolist())
            for lab in lo & hi:
                if best < 0 or sizes[lab] > sizes[best] or (sizes[lab] == sizes[best] and lab < best):
                    best = lab
        crossing = best if best >= 0 else None
    labels.setflags(write=False)
    return ClusterLabeling(labels, sizes, largest, crossing)


def working_cluster(labeling: ClusterLabeling, policy="largest") -> np.ndarray:
    """Vertex indices of the selected component.

    policy: "largest", "crossing", "infinite" (crossing if present, else
    largest), or ("containing", vertex_index).
    """
    if isinstance(policy, tuple) and policy[0] == "containing":
        x = int(policy[1])
        lab = int(labeling.labels[x])
        if lab < 0:
            raise SelectionError(f"vertex {x} is not in any component")
        return labeling.members(lab)
    if policy == "infinite":
        policy = "crossing" if labeling.crossing is not None else "largest"
    if policy == "largest":
        if labeling.largest is None:
            raise SelectionError("environment has no positive edges")
        return labeling.members(labeling.largest)
    if policy == "crossing":
        if labeling.crossing is None:
            raise SelectionError("no component touches two opposite faces")
        return labeling.members(labeling.crossing)
    raise SelectionError(f"unknown policy {policy!r}")


def cluster_mask(env: Environment, policy="infinite") -> np.ndarray:
    m = np.zeros(env.domain.n_vertices, dtype=bool)
    m[working_cluster(label_clusters(env), policy)] = True
    return m
