import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given
from hypothesis import strategies as st
from scipy.sparse.csgraph import connected_components

from rcm.cluster import cluster_mask, label_clusters, union_find, working_cluster
from rcm.env import Environment, EnvironmentLaw, LatticeDomain, build_environment
from rcm.errors import SelectionError


@given(st.integers(2, 40), st.lists(st.tuples(st.integers(0, 39), st.integers(0, 39)), max_size=60))
def test_union_find_matches_csgraph(n, pairs):
    pairs = [(a % n, b % n) for a, b in pairs]
    u = np.array([p[0] for p in pairs], dtype=np.int64)
    v = np.array([p[1] for p in pairs], dtype=np.int64)
    roots = union_find(n, u, v)
    A = sp.coo_matrix((np.ones(len(u)), (u, v)), shape=(n, n))
    _, lab = connected_components(A, directed=False)
    for a in range(n):
        for b in range(n):
            assert (roots[a] == roots[b]) == (lab[a] == lab[b])
    # roots are component minima
    for r in np.unique(roots):
        assert r == np.flatnonzero(roots == r).min()


@given(st.integers(0, 10**6), st.floats(0.2, 0.8))
def test_labels_match_csgraph(seed, p):
    env = build_environment(EnvironmentLaw.percolation(p), LatticeDomain((7, 6), "free"), seed)
    lab = label_clusters(env)
    u, v, _ = env.domain.edges
    keep = env.values > 0
    A = sp.coo_matrix((np.ones(keep.sum()), (u[keep], v[keep])), shape=(42, 42))
    _, ref = connected_components(A, directed=False)
    live = env.pi > 0
    assert np.all(lab.labels[~live] == -1)
    idx = np.flatnonzero(live)
    for a in idx:
        for b in idx:
            assert (lab.labels[a] == lab.labels[b]) == (ref[a] == ref[b])
    assert sum(lab.sizes.values()) == live.sum()


def test_crossing_and_largest():
    dom = LatticeDomain((5, 3), "free")
    vals = np.zeros(dom.n_edges)
    # a horizontal line along x1 = 1 crosses; a short vertical piece elsewhere
    for x in range(4):
        vals[dom.edge_index((x, 1), (x + 1, 1))] = 1.0
    vals[dom.edge_index((0, 0), (1, 0))] = 1.0
    env = Environment(dom, vals)
    lab = label_clusters(env)
    cross = working_cluster(lab, "crossing")
    assert sorted(cross.tolist()) == sorted(dom.index((x, 1)) for x in range(5))
    assert np.array_equal(working_cluster(lab, "infinite"), cross)
    assert np.array_equal(working_cluster(lab, "largest"), cross)
    small = working_cluster(lab, ("containing", dom.index((0, 0))))
    assert len(small) == 2
    with pytest.raises(SelectionError):
        working_cluster(lab, ("containing", dom.index((4, 0))))


def test_no_edges():
    env = Environment(LatticeDomain((3, 3), "free"), np.zeros(12))
    lab = label_clusters(env)
    assert lab.n_components == 0
    with pytest.raises(SelectionError):
        working_cluster(lab, "largest")


def test_percolation_3d_giant_component():
    env = build_environment(EnvironmentLaw.percolation(0.65), LatticeDomain((30, 30, 30), "free"), 1)
    m = cluster_mask(env, "infinite")
    assert m.mean() > 0.95
