import math

import numpy as np
import pytest

from hiertcn.data import SessionizedHistory
from hiertcn.graph import (
    GcnLayer,
    GcnParams,
    ItemGraph,
    build_item_graph,
    community_separation,
    embedding_table,
    gcn_backward,
    gcn_forward,
    gcn_nce_loss,
    graph_from_edges,
    graphconv_layer,
    sample_non_neighbors,
    train_gcn,
    two_community_graph,
)
from hiertcn.primitives import ConfigError, ShapeError, finite_difference_check


def _hist(uid, items, ts):
    return SessionizedHistory.from_log(uid, items, ts)


def _edge_set(g: ItemGraph):
    return {(int(g.node_ids[a]), int(g.node_ids[b])) for a, b in g.edges()}


# ---------------------------------------------------------------- construction


def test_edge_within_window():
    g = build_item_graph([_hist(1, [7, 9], [0, 10])], 60)
    assert _edge_set(g) == {(7, 9)}
    g.check()


def test_no_edge_outside_window():
    g = build_item_graph([_hist(1, [7, 9], [0, 10])], 5)
    assert g.n_edges == 0 and g.n_nodes == 2


def test_repeat_item_no_self_loop():
    g = build_item_graph([_hist(1, [7, 7, 9], [0, 1, 2])], 60)
    assert _edge_set(g) == {(7, 9)}


def test_brute_force_oracle():
    rng = np.random.default_rng(0)
    users = []
    for u in range(50):
        n = int(rng.integers(1, 15))
        users.append(_hist(u, rng.integers(0, 40, n), np.sort(rng.integers(0, 2000, n)).astype(float)))
    g = build_item_graph(users, 120)
    expect = set()
    for u in users:
        for i in range(len(u)):
            for j in range(len(u)):
                a, b = int(u.items[i]), int(u.items[j])
                if a != b and abs(u.timestamps[i] - u.timestamps[j]) <= 120:
                    expect.add((min(a, b), max(a, b)))
    assert _edge_set(g) == expect
    g.check()


def test_graph_from_edges_dedups():
    g = graph_from_edges([10, 20, 30], [[0, 1], [1, 0], [1, 1], [2, 1], [0, 1]], np.zeros((3, 2)))
    assert g.edges().tolist() == [[0, 1], [1, 2]]
    assert g.degree().tolist() == [1, 2, 1]


def test_feature_rows_checked():
    with pytest.raises(ShapeError):
        build_item_graph([_hist(1, [1, 2], [0, 1])], 5, features=np.zeros((3, 4)))


# ---------------------------------------------------------------- layer


def _path3():
    return graph_from_edges([0, 1, 2], [[0, 1], [1, 2]], np.array([[1.0], [2.0], [-1.0]]))


def test_layer_zero_params():
    g, _ = two_community_graph(20, seed=1)
    layer = GcnLayer(np.zeros((16, 4)), np.zeros(4), np.zeros((20, 3)))
    out, _ = graphconv_layer(g.features, g, layer)
    assert not out.any()


def test_isolated_node():
    g = graph_from_edges([5], np.zeros((0, 2)), np.array([[0.5, -1.0]]))
    rng = np.random.default_rng(0)
    layer = GcnLayer(rng.standard_normal((2, 3)), rng.standard_normal(3), rng.standard_normal((5, 4)))
    out, _ = graphconv_layer(g.features, g, layer)
    expect = np.maximum(np.concatenate([g.features[0], np.zeros(3)]) @ layer.W, 0)
    np.testing.assert_allclose(out[0], expect)


def test_three_node_path_hand_evaluation():
    g = _path3()
    layer = GcnLayer(np.array([[1.0]]), np.array([0.5]), np.array([[2.0], [1.0]]))
    out, _ = graphconv_layer(g.features, g, layer)
    relu = lambda v: max(v, 0.0)
    m = [relu(1.0 + 0.5), relu(2.0 + 0.5), relu(-1.0 + 0.5)]  # 1.5, 2.5, 0
    n = [m[1], (m[0] + m[2]) / 2, m[1]]  # 2.5, 0.75, 2.5
    z = [1.0, 2.0, -1.0]
    expect = [relu(2 * z[i] + n[i]) for i in range(3)]  # 4.5, 4.75, 0.5
    np.testing.assert_allclose(out[:, 0], expect)
    assert expect == [4.5, 4.75, 0.5]


def test_neighbor_order_permutation_invariance():
    g, _ = two_community_graph(40, seed=2)
    params = GcnParams.init(16, 8, seed=3)
    rng = np.random.default_rng(0)
    idx = g.indices.copy()
    for r in range(g.n_nodes):
        lo, hi = g.indptr[r], g.indptr[r + 1]
        idx[lo:hi] = rng.permutation(idx[lo:hi])
    shuffled = ItemGraph(g.node_ids, g.indptr, idx, g.features)
    a, _ = gcn_forward(g, params)
    b, _ = gcn_forward(shuffled, params)
    # a small relabelling may reorder float sums; compare at rounding level and require most bits equal
    np.testing.assert_allclose(a, b, rtol=1e-13, atol=1e-15)


def test_neighbor_order_bit_identical_for_exact_values():
    # integer-valued activations make every mean exact, so reordering cannot move a bit
    g = graph_from_edges(np.arange(5), [[0, 1], [0, 2], [0, 3], [0, 4], [1, 2]], np.arange(10.0).reshape(5, 2))
    layer = GcnLayer(np.array([[1.0, 0.0], [0.0, 2.0]]), np.array([1.0, 0.0]), np.ones((4, 3)))
    a, _ = graphconv_layer(g.features, g, layer)
    idx = g.indices.copy()
    lo, hi = g.indptr[0], g.indptr[1]
    idx[lo:hi] = idx[lo:hi][::-1]
    b, _ = graphconv_layer(g.features, ItemGraph(g.node_ids, g.indptr, idx, g.features), layer)
    assert np.array_equal(a, b)


# ---------------------------------------------------------------- objective


def test_nce_zero_embeddings():
    z = np.zeros((4, 3))
    for C in (1, 3):
        loss, _ = gcn_nce_loss(z, [[0, 1], [2, 3]], np.zeros((2, C), int))
        assert abs(loss - (1 + C) * math.log(2)) < 1e-12
    with pytest.raises(ConfigError):
        gcn_nce_loss(z, [[0, 1]], np.zeros((1, 0), int))


def test_gcn_gradient_through_two_layers():
    g, _ = two_community_graph(24, seed=5, feature_dim=6)
    params = GcnParams.init(6, 5, seed=1)
    for layer in params.layers:
        layer.q[:] = 0.1
    rng = np.random.default_rng(0)
    pos = g.edges()[:10]
    neg = sample_non_neighbors(g, pos[:, 0], 2, rng)
    z, caches = gcn_forward(g, params)
    _, dz = gcn_nce_loss(z, pos, neg)
    dfeat, grads = gcn_backward(dz, caches)
    flat = params.as_dict()
    feats = g.features.copy()

    def f(i):
        return gcn_nce_loss(gcn_forward(g, params, i["features"])[0], pos, neg)[0]

    err = finite_difference_check(f, {**flat, "features": feats}, {**grads, "features": dfeat})
    assert err < 1e-4


def test_non_neighbor_sampling():
    g, _ = two_community_graph(30, p_in=0.6, seed=4)
    rng = np.random.default_rng(0)
    rows = np.repeat(np.arange(30), 20)
    neg = sample_non_neighbors(g, rows, 3, rng)
    for r, ns in zip(rows, neg):
        assert r not in ns and not np.isin(ns, g.neighbors(r)).any()
    full = graph_from_edges([0, 1, 2], [[0, 1], [0, 2], [1, 2]], np.zeros((3, 1)))
    with pytest.raises(ValueError):
        sample_non_neighbors(full, [0], 1, rng)


def test_loss_decreases_on_two_communities():
    g, _ = two_community_graph(60, seed=0)
    res = train_gcn(g, dim=16, steps=200, seed=0)
    assert np.mean(res.losses[-20:]) < np.mean(res.losses[:20])


def test_embedding_table_output():
    g, labels = two_community_graph(60, seed=1)
    res = train_gcn(g, dim=16, steps=50, seed=1)
    t = embedding_table(g, res.embeddings)
    assert t.dim == 16 and len(t) == 60
    np.testing.assert_array_equal(t.lookup([3]), res.embeddings[[3]].astype(np.float32))
    intra, inter = community_separation(res.embeddings, labels)
    assert -1 <= inter <= 1 and -1 <= intra <= 1


def test_train_requires_edges():
    g = graph_from_edges([1, 2], np.zeros((0, 2)), np.zeros((2, 3)))
    with pytest.raises(ValueError):
        train_gcn(g, steps=1)
