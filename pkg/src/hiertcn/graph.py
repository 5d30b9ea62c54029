"""Item co-interaction graph and localized graph convolution embeddings.

Two items are linked when one user interacted with both within a time
window. Each layer computes, per node ``u``::

    n_u = mean over neighbours v of relu(z_v Q + q)
    z_u' = relu(concat(z_u, n_u) W)

and an isolated node uses ``n_u = 0``. Embeddings are trained with a
negative-sampling objective over graph edges and can be written out as an
:class:`EmbeddingTable` for the user models.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import _accel
from .embeddings import EmbeddingTable
from .objectives import log_sigmoid
from .primitives import AdamState, ConfigError, ShapeError, adam_step, uniform_init

log = logging.getLogger(__name__)

N_LAYERS = 2


@dataclass
class ItemGraph:
    node_ids: np.ndarray  # [N] int64, ascending
    indptr: np.ndarray  # [N + 1] CSR row pointers
    indices: np.ndarray  # [nnz] neighbour rows
    features: np.ndarray  # [N, d0]

    def __post_init__(self):
        n = self.node_ids.size
        if self.indptr.size != n + 1 or self.features.shape[0] != n:
            raise ShapeError("graph arrays disagree on the node count")

    @property
    def n_nodes(self) -> int:
        return int(self.node_ids.size)

    @property
    def n_edges(self) -> int:
        return int(self.indices.size // 2)

    def degree(self) -> np.ndarray:
        return np.diff(self.indptr)

    def neighbors(self, row: int) -> np.ndarray:
        return self.indices[self.indptr[row] : self.indptr[row + 1]]

    def edges(self) -> np.ndarray:
        """Each undirected edge once, as rows ``[a, b]`` with ``a < b``."""
        src = np.repeat(np.arange(self.n_nodes), self.degree())
        keep = src < self.indices
        return np.stack([src[keep], self.indices[keep]], axis=1)

    def check(self) -> None:
        e = self.edges()
        src = np.repeat(np.arange(self.n_nodes), self.degree())
        assert not np.any(src == self.indices), "self-loop"
        assert 2 * e.shape[0] == self.indices.size, "adjacency is not symmetric"
        fwd = set(map(tuple, np.stack([src, self.indices], 1).tolist()))
        assert all((b, a) in fwd for a, b in fwd), "adjacency is not symmetric"


def graph_from_edges(node_ids, edges, features) -> ItemGraph:
    """Undirected CSR graph over ``node_ids`` from row-index pairs; drops loops and duplicates."""
    node_ids = np.asarray(node_ids, dtype=np.int64)
    n = node_ids.size
    e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    e = e[e[:, 0] != e[:, 1]]
    both = np.concatenate([e, e[:, ::-1]])
    key = np.unique(both[:, 0] * n + both[:, 1])
    src, dst = key // n, key % n
    indptr = np.concatenate(([0], np.cumsum(np.bincount(src, minlength=n)))).astype(np.int64)
    return ItemGraph(node_ids, indptr, dst.astype(np.int64), np.asarray(features))


def build_item_graph(users, window_seconds: float, node_ids=None, features=None, feature_dim: int = 32,
                     seed: int = 0) -> ItemGraph:
    """Co-interaction graph from per-user histories (``items`` and sorted ``timestamps``).

    An edge joins two distinct items that one user interacted with at most
    ``window_seconds`` apart (inclusive). Nodes default to every item seen;
    features default to random unit vectors of ``feature_dim``.
    """
    users = list(users)
    items = np.concatenate([np.asarray(u.items, np.int64) for u in users]) if users else np.zeros(0, np.int64)
    times = np.concatenate([np.asarray(u.timestamps, np.float64) for u in users]) if users else np.zeros(0)
    offsets = np.concatenate(([0], np.cumsum([len(u.items) for u in users]))).astype(np.int64)
    node_ids = np.unique(items) if node_ids is None else np.unique(np.asarray(node_ids, np.int64))
    if items.size and not np.isin(items, node_ids).all():
        raise ValueError("interactions reference items outside node_ids")
    a, b = _accel.window_pairs(offsets, items, times, float(window_seconds))
    edges = np.stack([np.searchsorted(node_ids, a), np.searchsorted(node_ids, b)], axis=1)
    if features is None:
        rng = np.random.default_rng(seed)
        features = rng.standard_normal((node_ids.size, feature_dim))
        features /= np.linalg.norm(features, axis=1, keepdims=True)
    features = np.asarray(features)
    if features.shape[0] != node_ids.size:
        raise ShapeError("need one feature row per node")
    return graph_from_edges(node_ids, edges, features)


def two_community_graph(n_nodes: int = 60, p_in: float = 0.3, p_out: float = 0.02, feature_dim: int = 16,
                        seed: int = 0):
    """Planted two-block graph with uninformative random features. Returns (graph, labels)."""
    rng = np.random.default_rng(seed)
    labels = (np.arange(n_nodes) >= n_nodes // 2).astype(np.int64)
    iu = np.triu_indices(n_nodes, 1)
    same = labels[iu[0]] == labels[iu[1]]
    hit = rng.random(iu[0].size) < np.where(same, p_in, p_out)
    edges = np.stack([iu[0][hit], iu[1][hit]], axis=1)
    feats = rng.standard_normal((n_nodes, feature_dim))
    feats /= np.linalg.norm(feats, axis=1, keepdims=True)
    return graph_from_edges(np.arange(n_nodes), edges, feats), labels


# ---------------------------------------------------------------------------
# layers


@dataclass
class GcnLayer:
    Q: np.ndarray  # [d_in, d_hidden]
    q: np.ndarray  # [d_hidden]
    W: np.ndarray  # [d_in + d_hidden, d_out]

    @classmethod
    def init(cls, rng, d_in, d_hidden, d_out, dtype=np.float64):
        return cls(uniform_init(rng, (d_in, d_hidden), d_in, dtype), np.zeros(d_hidden, dtype),
                   uniform_init(rng, (d_in + d_hidden, d_out), d_in + d_hidden, dtype))


@dataclass
class GcnParams:
    layers: list

    @classmethod
    def init(cls, d0: int, dim: int, hidden: int | None = None, seed: int = 0, dtype=np.float64):
        rng = np.random.default_rng(seed)
        hidden = hidden or dim
        dims = [d0] + [dim] * N_LAYERS
        return cls([GcnLayer.init(rng, dims[i], hidden, dims[i + 1], dtype) for i in range(N_LAYERS)])

    def as_dict(self) -> dict:
        out = {}
        for i, l in enumerate(self.layers):
            out[f"l{i}.Q"], out[f"l{i}.q"], out[f"l{i}.W"] = l.Q, l.q, l.W
        return out


def graphconv_layer(z, graph: ItemGraph, layer: GcnLayer):
    """One localized convolution. Returns (z', cache)."""
    z = np.asarray(z)
    if z.shape[0] != graph.n_nodes or z.shape[1] != layer.Q.shape[0]:
        raise ShapeError(f"features {z.shape} do not fit graph/layer")
    a = z @ layer.Q + layer.q
    m = np.maximum(a, 0)
    n = _accel.segment_mean(m, graph.indptr, graph.indices)
    c = np.concatenate([z, n], axis=1)
    o = c @ layer.W
    return np.maximum(o, 0), (z, a, c, o, layer, graph)


def graphconv_layer_backward(dz_out, cache):
    """Returns (dz, {"Q", "q", "W"})."""
    z, a, c, o, layer, graph = cache
    do = dz_out * (o > 0)
    dW = c.T @ do
    dc = do @ layer.W.T
    d_in = z.shape[1]
    dz = dc[:, :d_in].copy()
    dm = _accel.segment_mean_backward(np.ascontiguousarray(dc[:, d_in:]), graph.indptr, graph.indices, graph.n_nodes)
    da = dm * (a > 0)
    dz += da @ layer.Q.T
    return dz, {"Q": z.T @ da, "q": da.sum(axis=0), "W": dW}


def gcn_forward(graph: ItemGraph, params: GcnParams, z0=None):
    z = graph.features if z0 is None else z0
    caches = []
    for layer in params.layers:
        z, cache = graphconv_layer(z, graph, layer)
        caches.append(cache)
    return z, caches


def gcn_backward(dz, caches):
    """Returns (d features, grads keyed like :meth:`GcnParams.as_dict`)."""
    grads = {}
    for i in reversed(range(len(caches))):
        dz, g = graphconv_layer_backward(dz, caches[i])
        for k, v in g.items():
            grads[f"l{i}.{k}"] = v
    return dz, grads


# ---------------------------------------------------------------------------
# objective


def gcn_nce_loss(z, pos_pairs, neg):
    """Negative-sampling loss over edges.

    ``pos_pairs`` [P, 2] are (u, v) rows with v a neighbour of u; ``neg``
    [P, C] are sampled rows for each u. Per pair the loss is
    ``-log s(z_u.z_v) - sum_c log s(-z_u.z_n)``, i.e. C times the sampled
    expectation. Returns (mean over pairs, dz).
    """
    z = np.asarray(z)
    pos_pairs = np.asarray(pos_pairs, dtype=np.int64).reshape(-1, 2)
    neg = np.asarray(neg, dtype=np.int64).reshape(pos_pairs.shape[0], -1)
    if neg.shape[1] < 1:
        raise ConfigError("need C >= 1 negatives per pair")
    P = max(pos_pairs.shape[0], 1)
    zu, zv, zn = z[pos_pairs[:, 0]], z[pos_pairs[:, 1]], z[neg]
    sp = np.sum(zu * zv, axis=1)
    sn = np.einsum("pcd,pd->pc", zn, zu)
    loss = float((-log_sigmoid(sp).sum() - log_sigmoid(-sn).sum()) / P)
    a = -(1.0 - _sigmoid(sp)) / P  # d/d sp
    b = _sigmoid(sn) / P  # d/d sn
    dz = np.zeros_like(z)
    np.add.at(dz, pos_pairs[:, 0], a[:, None] * zv + np.einsum("pc,pcd->pd", b, zn))
    np.add.at(dz, pos_pairs[:, 1], a[:, None] * zu)
    np.add.at(dz, neg.ravel(), (b[:, :, None] * zu[:, None, :]).reshape(-1, z.shape[1]))
    return loss, dz


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _is_edge(graph: ItemGraph, rows, cols) -> np.ndarray:
    # CSR rows hold sorted neighbours, so row * N + col keys are globally sorted
    n = graph.n_nodes
    keys = np.repeat(np.arange(n), graph.degree()) * n + graph.indices
    q = np.asarray(rows) * n + np.asarray(cols)
    pos = np.minimum(np.searchsorted(keys, q), max(keys.size - 1, 0))
    return keys[pos] == q if keys.size else np.zeros(q.shape, bool)


def sample_non_neighbors(graph: ItemGraph, rows, count: int, rng, max_tries: int = 50) -> np.ndarray:
    """``count`` nodes per row, uniform over nodes that are neither the row nor its neighbours."""
    rows = np.asarray(rows, dtype=np.int64)
    n = graph.n_nodes
    out = rng.integers(0, n, (rows.size, count))
    r = np.broadcast_to(rows[:, None], out.shape)
    for _ in range(max_tries):
        bad = (out == r) | _is_edge(graph, r, out)
        if not bad.any():
            return out
        out[bad] = rng.integers(0, n, int(bad.sum()))
    # rows whose complement is tiny: enumerate it
    for i in np.nonzero(bad.any(axis=1))[0]:
        allowed = np.setdiff1d(np.arange(n), np.append(graph.neighbors(rows[i]), rows[i]))
        if allowed.size == 0:
            raise ValueError(f"node {rows[i]} is adjacent to every other node; no negatives exist")
        out[i] = rng.choice(allowed, count)
    return out


@dataclass
class GcnTrainResult:
    params: GcnParams
    embeddings: np.ndarray
    losses: list


def train_gcn(graph: ItemGraph, dim: int = 32, hidden: int | None = None, steps: int = 500, lr: float = 1e-3,
              negatives: int = 1, batch_edges: int = 256, seed: int = 0, log_every: int = 0) -> GcnTrainResult:
    """Full-graph forward each step, loss on a sample of edges.

    The output ReLU makes every score non-negative, so a heavy negative
    term can push all embeddings to the dead all-zero point; one negative
    per edge and a small step size avoid that on small graphs.
    """
    if graph.n_edges == 0:
        raise ValueError("graph has no edges to train on")
    rng = np.random.default_rng(seed)
    params = GcnParams.init(graph.features.shape[1], dim, hidden, seed)
    flat = params.as_dict()
    adam = AdamState({}, {}, 0)
    edges = graph.edges()
    losses = []
    for step in range(steps):
        pick = edges[rng.integers(0, edges.shape[0], min(batch_edges, edges.shape[0]))]
        flip = rng.random(pick.shape[0]) < 0.5
        pick = np.where(flip[:, None], pick[:, ::-1], pick)
        neg = sample_non_neighbors(graph, pick[:, 0], negatives, rng)
        z, caches = gcn_forward(graph, params)
        loss, dz = gcn_nce_loss(z, pick, neg)
        _, grads = gcn_backward(dz, caches)
        adam_step(flat, grads, adam, lr)
        losses.append(loss)
        if log_every and step % log_every == 0:
            log.info("gcn step %d loss %.4f", step, loss)
    z, _ = gcn_forward(graph, params)
    return GcnTrainResult(params, z, losses)


def embedding_table(graph: ItemGraph, embeddings) -> EmbeddingTable:
    return EmbeddingTable.from_arrays(graph.node_ids, np.asarray(embeddings, dtype=np.float32))


def community_separation(embeddings, labels) -> tuple:
    """(mean intra-community cosine, mean inter-community cosine) over distinct pairs."""
    x = np.asarray(embeddings, dtype=np.float64)
    norm = np.linalg.norm(x, axis=1, keepdims=True)
    x = x / np.where(norm > 0, norm, 1.0)
    cos = x @ x.T
    labels = np.asarray(labels)
    same = labels[:, None] == labels[None, :]
    off = ~np.eye(len(labels), dtype=bool)
    return float(cos[same & off].mean()), float(cos[~same].mean())
