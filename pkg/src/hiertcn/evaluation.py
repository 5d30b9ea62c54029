"""Ranking metrics, rule-based baselines and the evaluation harness.

Ranks are pessimistic: ``rank = 1 + #(other candidates scoring >= truth)``,
so a constant scorer always lands at the bottom of its pool.
"""

from __future__ import annotations

import csv
import io
import json
from collections import deque
from dataclasses import asdict, dataclass, field

import numpy as np

from . import _accel
from .batching import FlatBatcher, QueueBatcher

REPORT_VERSION = 1
DEFAULT_KS = (1, 5, 10)


# ---------------------------------------------------------------------------
# metrics


def pessimistic_rank(scores, truth: int) -> int:
    scores = np.asarray(scores)
    return int(np.sum(scores >= scores[truth]))


def recall_at_k(rank, k: int):
    """1 when the truth sits within the top ``k`` (inclusive)."""
    r = np.asarray(rank)
    if np.any(r < 1):
        raise ValueError("ranks are 1-indexed")
    out = (r <= k).astype(float)
    return float(out) if out.ndim == 0 else out


def mrr(rank):
    r = np.asarray(rank, dtype=float)
    if np.any(r < 1):
        raise ValueError("ranks are 1-indexed")
    out = 1.0 / r
    return float(out) if out.ndim == 0 else out


def mrp(rank, pool_size):
    r = np.asarray(rank, dtype=float)
    n = np.asarray(pool_size, dtype=float)
    if np.any(r < 1) or np.any(r > n):
        raise ValueError("need 1 <= rank <= pool_size")
    out = r / n
    return float(out) if out.ndim == 0 else out


def aggregate(ranks, pool_sizes, ks=DEFAULT_KS) -> dict:
    ranks = np.asarray(ranks, dtype=np.int64)
    if ranks.size == 0:
        return {**{f"recall@{k}": 0.0 for k in ks}, "mrr": 0.0, "mrp": 0.0, "n": 0}
    out = {f"recall@{k}": float(recall_at_k(ranks, k).mean()) for k in ks}
    out["mrr"] = float(mrr(ranks).mean())
    out["mrp"] = float(mrp(ranks, pool_sizes).mean())
    out["n"] = int(ranks.size)
    return out


# ---------------------------------------------------------------------------
# rule-based baselines


class RecentPool:
    """The last ``k`` interacted item embeddings of one user."""

    def __init__(self, k: int = 20, dim: int | None = None):
        if k < 1:
            raise ValueError("pool size must be >= 1")
        self.k = k
        self.dim = dim
        self.items = deque(maxlen=k)
        self.cold_hits = 0

    def push(self, x) -> None:
        x = np.asarray(x)
        self.dim = x.shape[-1]
        self.items.append(x)

    def __len__(self) -> int:
        return len(self.items)

    def matrix(self) -> np.ndarray:
        return np.stack(self.items) if self.items else np.zeros((0, self.dim or 0))


def mv_predict(pool: RecentPool) -> np.ndarray:
    """Mean of the pooled embeddings; zeros (counted in ``pool.cold_hits``) when empty."""
    if not len(pool):
        pool.cold_hits += 1
        return np.zeros(pool.dim or 0)
    return pool.matrix().mean(axis=0)


def maxitem_score(candidate, pool: RecentPool):
    """Largest dot product between ``candidate`` (or a [n, d] stack) and the pool."""
    cand = np.asarray(candidate)
    if not len(pool):
        pool.cold_hits += 1
        return 0.0 if cand.ndim == 1 else np.zeros(cand.shape[0])
    s = cand @ pool.matrix().T
    return float(s.max()) if cand.ndim == 1 else s.max(axis=-1)


# ---------------------------------------------------------------------------
# scorers


class Scorer:
    """Produces scores for candidate pools of test events.

    ``prepare`` sees every evaluated user once; ``scores`` receives a chunk of
    events as flat ragged arrays.
    """

    name = "scorer"

    def prepare(self, users, table) -> None:
        self.users = users
        self.table = table

    def scores(self, ev_user, ev_t, offsets, cand_ids, cand_embs) -> np.ndarray:
        raise NotImplementedError


class VectorScorer(Scorer):
    """Scores are ``candidate . u`` for one embedding ``u`` per event."""

    def vectors(self, ui: int) -> np.ndarray:
        return self.U[ui]

    def scores(self, ev_user, ev_t, offsets, cand_ids, cand_embs):
        d = cand_embs.shape[1]
        u = np.empty((len(ev_user), d), dtype=np.float64)
        for i, (ui, t) in enumerate(zip(ev_user, ev_t)):
            u[i] = self.vectors(ui)[t]
        rep = np.repeat(u, np.diff(offsets), axis=0)
        return np.einsum("nd,nd->n", cand_embs.astype(np.float64), rep)


class ModelScorer(VectorScorer):
    def __init__(self, model, batch_size: int = 64, max_unroll_sessions: int = 4):
        self.model = model
        self.name = model.config.architecture
        self.batch_size = batch_size
        self.max_unroll = max_unroll_sessions

    def prepare(self, users, table):
        super().prepare(users, table)
        self.U = embed_users(self.model, users, table, self.batch_size, self.max_unroll)


class OracleScorer(VectorScorer):
    """``u`` equals the true next item (a perfect predictor)."""

    name = "Oracle"

    def prepare(self, users, table):
        super().prepare(users, table)
        self.U = [table.lookup(h.items, np.float64) for h in users]


class MVScorer(VectorScorer):
    """``u`` is the mean of the user's last ``k`` interactions."""

    name = "MV"

    def __init__(self, k: int = 20):
        self.k = k

    def prepare(self, users, table):
        super().prepare(users, table)
        self.cold = 0
        self.U = []
        for h in users:
            pool = RecentPool(self.k, table.dim)
            embs = table.lookup(h.items, np.float64)
            out = np.empty_like(embs)
            for t in range(len(h)):
                out[t] = mv_predict(pool)
                pool.push(embs[t])
            self.cold += pool.cold_hits
            self.U.append(out)


class MaxItemScorer(Scorer):
    """Score is the best dot product with any of the last ``k`` interactions."""

    name = "MaxItem"

    def __init__(self, k: int = 20):
        self.k = k

    def prepare(self, users, table):
        super().prepare(users, table)
        self.embs = [table.lookup(h.items, np.float64) for h in users]

    def scores(self, ev_user, ev_t, offsets, cand_ids, cand_embs):
        out = np.empty(cand_ids.size)
        for i, (ui, t) in enumerate(zip(ev_user, ev_t)):
            pool = RecentPool(self.k, cand_embs.shape[1])
            for x in self.embs[ui][max(0, t - self.k) : t]:
                pool.push(x)
            lo, hi = offsets[i], offsets[i + 1]
            out[lo:hi] = maxitem_score(cand_embs[lo:hi].astype(np.float64), pool)
        return out


class RandomScorer(Scorer):
    name = "Random"

    def __init__(self, seed: int = 0):
        self.seed = seed

    def prepare(self, users, table):
        super().prepare(users, table)
        self.rng = np.random.default_rng(self.seed)

    def scores(self, ev_user, ev_t, offsets, cand_ids, cand_embs):
        return self.rng.random(cand_ids.size)


class ConstantScorer(Scorer):
    name = "Constant"

    def scores(self, ev_user, ev_t, offsets, cand_ids, cand_embs):
        return np.zeros(cand_ids.size)


def embed_users(model, users, table, batch_size: int = 64, max_unroll_sessions: int = 4) -> list:
    """User embeddings for every event of every user, computed in batches."""
    c = model.config
    out = [np.zeros((len(h), c.embedding_dim), c.np_dtype) for h in users]
    if c.hierarchical:
        batches = QueueBatcher(users, table, batch_size, max_unroll_sessions, max_session_length=1 << 30,
                               dtype=c.np_dtype)
        state = None
        for b in batches:
            u, state, _ = model.forward(b, state)
            v = b.mask > 0
            ui = np.broadcast_to(b.user_index[..., None], b.mask.shape)[v]
            for i, t, vec in zip(ui, b.event_index[v], u[v]):
                out[i][t] = vec
    else:
        for b in FlatBatcher(users, table, batch_size, dtype=c.np_dtype):
            u, _, _ = model.forward(b)
            for row, ui in enumerate(b.user_index):
                out[ui][:] = u[row, : len(users[ui])]
    return out


# ---------------------------------------------------------------------------
# candidate pools


@dataclass
class PoolStrategy:
    kind: str = "impressions"  # impressions | full-catalog | uniform-sample
    size: int = 100

    def __post_init__(self):
        if self.kind not in ("impressions", "full-catalog", "uniform-sample"):
            raise ValueError(f"unknown pool strategy {self.kind!r}")
        if self.kind == "uniform-sample" and self.size < 1:
            raise ValueError("sample size must be >= 1")

    def label(self) -> str:
        return f"uniform-sample({self.size})" if self.kind == "uniform-sample" else self.kind


def build_pool(strategy: PoolStrategy, truth: int, impressions, catalog, rng):
    """Candidate IDs for one event and the position of the truth, or None when unavailable."""
    if strategy.kind == "impressions":
        imp = np.asarray(impressions, dtype=np.int64)
        if imp.size == 0:
            return None
        hit = np.nonzero(imp == truth)[0]
        if hit.size == 0:
            imp = np.concatenate([[truth], imp])
            return imp, 0
        return imp, int(hit[0])
    if strategy.kind == "full-catalog":
        pos = np.nonzero(catalog == truth)[0]
        return catalog, int(pos[0])
    others = catalog[catalog != truth]
    m = min(strategy.size - 1, others.size)
    pick = others[rng.choice(others.size, m, replace=False)] if m else others[:0]
    ids = np.concatenate([[truth], pick])
    return ids, 0


# ---------------------------------------------------------------------------
# breakdowns


def pow2_bucket(n: int) -> str:
    if n <= 0:
        return "0"
    lo = 1 << (int(n).bit_length() - 1)
    hi = 2 * lo - 1
    return str(lo) if lo == hi else f"{lo}-{hi}"


def position_bucket(p: int, cap: int = 10) -> str:
    return str(p) if p < cap else f"{cap}+"


def gap_bucket(gap_seconds: float | None) -> str:
    if gap_seconds is None:
        return "first"
    h = gap_seconds / 3600.0
    if h < 1:
        return "<1h"
    lo = 1 << (int(h).bit_length() - 1)
    return f"{lo}-{2 * lo}h"


def _bucket_key(label: str):
    if label in ("first", "<1h", "0"):
        return (-1, label)
    digits = "".join(ch for ch in label.split("-")[0] if ch.isdigit())
    return (int(digits) if digits else 1 << 30, label)


@dataclass
class MetricsReport:
    metrics: dict
    counts: dict
    breakdowns: dict = field(default_factory=dict)
    pool: str = "impressions"
    mode: str = "cold"
    scorer: str = ""
    version: int = REPORT_VERSION

    @property
    def mrr(self) -> float:
        return self.metrics["mrr"]

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        d = json.loads(text)
        if d.get("version") != REPORT_VERSION:
            raise ValueError(f"unsupported report version {d.get('version')}")
        return cls(**d)

    def to_table(self) -> str:
        keys = [k for k in self.metrics if k != "n"]
        lines = [f"scorer={self.scorer} mode={self.mode} pool={self.pool} events={self.counts['scored']}"
                 f" skipped={self.counts['skipped']}"]
        lines.append(" ".join(f"{k:>10}" for k in keys))
        lines.append(" ".join(f"{self.metrics[k]:>10.4f}" for k in keys))
        for axis, rows in self.breakdowns.items():
            lines.append("")
            lines.append(f"{axis:<14}" + f"{'n':>8}" + "".join(f"{k:>11}" for k in keys))
            for r in rows:
                lines.append(f"{r['bucket']:<14}{r['n']:>8}" + "".join(f"{r[k]:>11.4f}" for k in keys))
        return "\n".join(lines)

    def to_csv(self) -> str:
        buf = io.StringIO()
        keys = [k for k in self.metrics if k != "n"]
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["axis", "bucket", "n", *keys])
        w.writerow(["overall", "all", self.counts["scored"], *[self.metrics[k] for k in keys]])
        for axis, rows in self.breakdowns.items():
            for r in rows:
                w.writerow([axis, r["bucket"], r["n"], *[r[k] for k in keys]])
        return buf.getvalue()


def _breakdown(labels, ranks, sizes, ks) -> list:
    rows = []
    labels = np.asarray(labels)
    for lab in sorted(set(labels.tolist()), key=_bucket_key):
        sel = labels == lab
        rows.append({"bucket": lab, **aggregate(ranks[sel], sizes[sel], ks)})
    return rows


def evaluate(scorer: Scorer, users, table, strategy: PoolStrategy | None = None, score_from=None,
             seed: int = 0, mode: str = "cold", ks=DEFAULT_KS, chunk: int = 512,
             return_ranks: bool = False):
    """Score every test interaction of ``users`` once and summarise the ranks.

    ``score_from[i]`` is the first event of user ``i`` that is scored; the
    earlier events are context only (warm-start evaluation).
    """
    strategy = strategy or PoolStrategy()
    users = list(users)
    catalog = np.sort(table.ids)
    rng = np.random.default_rng(seed)
    scorer.prepare(users, table)
    ev_user, ev_t, pools, truths = [], [], [], []
    hist, pos, gap = [], [], []
    skipped = 0
    for ui, h in enumerate(users):
        start = 0 if score_from is None else int(score_from[ui])
        q = h.q
        o = h.session_offsets
        for t in range(start, len(h)):
            got = build_pool(strategy, int(h.items[t]), h.impressions[t], catalog, rng)
            if got is None:
                skipped += 1
                continue
            ids, tpos = got
            ev_user.append(ui)
            ev_t.append(t)
            pools.append(ids)
            truths.append(tpos)
            j = q[t]
            hist.append(pow2_bucket(t))
            pos.append(position_bucket(t - o[j]))
            gap.append(gap_bucket(None if j == 0 else float(h.timestamps[o[j]] - h.timestamps[o[j] - 1])))
    n = len(ev_user)
    ranks = np.zeros(n, dtype=np.int64)
    sizes = np.array([p.size for p in pools], dtype=np.int64)
    for a in range(0, n, chunk):
        b = min(n, a + chunk)
        offs = np.concatenate([[0], np.cumsum(sizes[a:b])])
        ids = np.concatenate(pools[a:b]) if b > a else np.zeros(0, np.int64)
        embs = table.lookup(ids, np.float32)
        s = np.asarray(scorer.scores(np.array(ev_user[a:b]), np.array(ev_t[a:b]), offs, ids, embs))
        ranks[a:b] = _accel.ragged_ranks(s, offs, np.array(truths[a:b]))
    report = MetricsReport(
        metrics=aggregate(ranks, sizes, ks),
        counts={"scored": n, "skipped": skipped, "users": len(users)},
        breakdowns={
            "history_length": _breakdown(hist, ranks, sizes, ks),
            "session_position": _breakdown(pos, ranks, sizes, ks),
            "session_gap": _breakdown(gap, ranks, sizes, ks),
        },
        pool=strategy.label(), mode=mode, scorer=getattr(scorer, "name", type(scorer).__name__),
    )
    if return_ranks:
        return report, ranks, sizes
    return report
