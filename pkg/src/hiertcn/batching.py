"""Mini-batch generation.

:class:`QueueBatcher` feeds hierarchical models: ``B`` queues of sessions,
users assigned whole to the least-loaded queue, and up to
``max_unroll_sessions`` sessions per queue taken per batch. Row ``b`` of
consecutive batches continues queue ``b``, so the consumer carries each row's
high-level state across batches and zeroes it where ``reset`` is set. That
window is also the truncation length for backpropagation through the
high-level GRU.

:class:`FlatBatcher` feeds single-level models: whole user histories padded
to the longest in the batch, bucketed by length.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)


@dataclass
class InputCounter:
    """Tracks bytes of materialised item-embedding inputs."""

    current: int = 0
    peak: int = 0
    total: int = 0
    batches: int = 0

    def hold(self, nbytes: int) -> None:
        self.current = nbytes
        self.peak = max(self.peak, nbytes)
        self.total += nbytes
        self.batches += 1


@dataclass
class SessionBatch:
    items: np.ndarray  # [B, S, L, d] interacted item embeddings (zero where padded)
    item_ids: np.ndarray  # [B, S, L] (-1 where padded)
    mask: np.ndarray  # [B, S, L]
    session_mask: np.ndarray  # [B, S]
    reset: np.ndarray  # [B, S] zero the high state before this session
    user_ids: np.ndarray  # [B, S] (-1 where padded)
    user_index: np.ndarray  # [B, S] position of the user in the batcher's list
    session_index: np.ndarray  # [B, S] session number within the user
    event_index: np.ndarray  # [B, S, L] event number within the user (-1 where padded)
    negatives: np.ndarray | None = None  # [E, M, d] for the E valid events, row-major order
    neg_mask: np.ndarray | None = None  # [E, M]
    neg_ids: np.ndarray | None = None  # [E, M] (-1 where padded)

    @property
    def shape(self):
        return self.mask.shape


@dataclass
class FlatBatch:
    items: np.ndarray  # [B, T, d]
    item_ids: np.ndarray  # [B, T]
    mask: np.ndarray  # [B, T]
    session_start: np.ndarray  # [B, T] 1 at the first event of each session
    user_ids: np.ndarray  # [B]
    user_index: np.ndarray  # [B]
    event_index: np.ndarray  # [B, T]
    negatives: np.ndarray | None = None  # [E, M, d] as in SessionBatch
    neg_mask: np.ndarray | None = None
    neg_ids: np.ndarray | None = None


@dataclass
class QueueState:
    queues: list
    loads: np.ndarray
    current_user: np.ndarray

    @classmethod
    def empty(cls, n: int) -> "QueueState":
        return cls([deque() for _ in range(n)], np.zeros(n, dtype=np.int64), np.full(n, -1, dtype=np.int64))

    def check(self) -> None:
        assert len(self.queues) == self.loads.size
        assert all(len(q) == c for q, c in zip(self.queues, self.loads))


class NegativeSampler:
    """Negatives per event: impressions minus the positive, else uniform over the catalog."""

    def __init__(self, catalog_ids, count: int = 10, source: str = "impressions"):
        if source not in ("impressions", "uniform"):
            raise ValueError(f"unknown negative source {source!r}")
        if count < 1:
            raise ValueError("need at least one negative per positive")
        self.catalog = np.asarray(catalog_ids, dtype=np.int64)
        self.count = count
        self.source = source

    def sample(self, rng, positive: int, impressions: np.ndarray) -> np.ndarray:
        if self.source == "impressions" and impressions.size:
            neg = impressions[impressions != positive]
            if neg.size > self.count:
                neg = neg[rng.choice(neg.size, self.count, replace=False)]
            if neg.size:
                return neg
        draws = self.catalog[rng.integers(0, self.catalog.size, self.count * 2)]
        return draws[draws != positive][: self.count]


def _fill_negatives(batch, users, table, sampler, rng, dtype, events):
    """Attach negatives for the valid events of ``batch``.

    ``events`` lists (user position, event index) in the row-major order of
    ``batch.mask > 0``; the negative arrays follow the same order.
    """
    lists = [sampler.sample(rng, int(users[u].items[e]), users[u].impressions[e]) for u, e in events]
    m_max = max([1] + [x.size for x in lists])
    ids = np.full((len(lists), m_max), -1, dtype=np.int64)
    nmask = np.zeros((len(lists), m_max), dtype=dtype)
    for i, neg in enumerate(lists):
        ids[i, : neg.size] = neg
        nmask[i, : neg.size] = 1
    embs = np.zeros(ids.shape + (table.dim,), dtype=dtype)
    sel = ids >= 0
    if sel.any():
        embs[sel] = table.lookup(ids[sel], dtype)
    batch.neg_ids, batch.neg_mask, batch.negatives = ids, nmask, embs


def split_long_sessions(user, max_len: int) -> list:
    """(start, stop) event ranges per session, cutting sessions longer than ``max_len``."""
    out = []
    o = user.session_offsets
    for j in range(user.n_sessions):
        lo, hi = int(o[j]), int(o[j + 1])
        if hi - lo > max_len:
            log.warning("user %s session %d has %d events; splitting at %d", user.user_id, j, hi - lo, max_len)
        for a in range(lo, hi, max_len):
            out.append((a, min(a + max_len, hi)))
    return out


class QueueBatcher:
    """Queue-based session mini-batches for hierarchical models."""

    def __init__(self, users, table, batch_size: int = 32, max_unroll_sessions: int = 4,
                 max_session_length: int = 256, sampler: NegativeSampler | None = None,
                 rng=None, dtype=np.float32, counter: InputCounter | None = None, order=None):
        if batch_size < 1 or max_unroll_sessions < 1:
            raise ValueError("batch_size and max_unroll_sessions must be >= 1")
        self.users = list(users)
        self.table = table
        self.B = batch_size
        self.S = max_unroll_sessions
        self.max_len = max_session_length
        self.sampler = sampler
        self.rng = np.random.default_rng(0) if rng is None else rng
        self.dtype = dtype
        self.counter = counter if counter is not None else InputCounter()
        self.order = list(range(len(self.users))) if order is None else list(order)
        self.state = QueueState.empty(self.B)

    def _enqueue_user(self, ui: int) -> int:
        st = self.state
        b = int(np.argmin(st.loads))
        ranges = split_long_sessions(self.users[ui], self.max_len)
        for j, (lo, hi) in enumerate(ranges):
            st.queues[b].append((ui, j, lo, hi, j == 0))
        st.loads[b] += len(ranges)
        return b

    def assign(self) -> list:
        """Enqueue every user without dequeuing; returns the queue index per user."""
        return [self._enqueue_user(ui) for ui in self.order]

    def __iter__(self):
        pending = deque(self.order)
        st = self.state
        while True:
            while pending and st.loads.min() < self.S:
                self._enqueue_user(pending.popleft())
            if st.loads.sum() == 0:
                return
            yield self._dequeue()

    def _dequeue(self) -> SessionBatch:
        st, B, S = self.state, self.B, self.S
        picked = []
        for b in range(B):
            row = []
            while st.queues[b] and len(row) < S:
                row.append(st.queues[b].popleft())
            st.loads[b] -= len(row)
            picked.append(row)
        L = max((hi - lo for row in picked for (_, _, lo, hi, _) in row), default=1)
        ids = np.full((B, S, L), -1, dtype=np.int64)
        ev = np.full((B, S, L), -1, dtype=np.int64)
        mask = np.zeros((B, S, L), dtype=self.dtype)
        smask = np.zeros((B, S), dtype=self.dtype)
        reset = np.zeros((B, S), dtype=self.dtype)
        uids = np.full((B, S), -1, dtype=np.int64)
        uidx = np.full((B, S), -1, dtype=np.int64)
        sidx = np.full((B, S), -1, dtype=np.int64)
        events = []
        for b, row in enumerate(picked):
            for s, (ui, j, lo, hi, first) in enumerate(row):
                user = self.users[ui]
                n = hi - lo
                ids[b, s, :n] = user.items[lo:hi]
                ev[b, s, :n] = np.arange(lo, hi)
                mask[b, s, :n] = 1
                smask[b, s] = 1
                reset[b, s] = 1.0 if (first or st.current_user[b] != ui) else 0.0
                st.current_user[b] = ui
                uids[b, s] = user.user_id
                uidx[b, s] = ui
                sidx[b, s] = j
                events.extend((ui, e) for e in range(lo, hi))
        items = np.zeros((B, S, L, self.table.dim), dtype=self.dtype)
        valid = ids >= 0
        items[valid] = self.table.lookup(ids[valid], self.dtype)
        self.counter.hold(items.nbytes)
        batch = SessionBatch(items, ids, mask, smask, reset, uids, uidx, sidx, ev)
        if self.sampler is not None:
            _fill_negatives(batch, self.users, self.table, self.sampler, self.rng, self.dtype, events)
        return batch


class FlatBatcher:
    """Full-history batches for single-level models, bucketed by length."""

    def __init__(self, users, table, batch_size: int = 32, sampler: NegativeSampler | None = None,
                 rng=None, dtype=np.float32, counter: InputCounter | None = None,
                 order=None, bucket_factor: int = 8):
        self.users = list(users)
        self.table = table
        self.B = batch_size
        self.sampler = sampler
        self.rng = np.random.default_rng(0) if rng is None else rng
        self.dtype = dtype
        self.counter = counter if counter is not None else InputCounter()
        self.order = list(range(len(self.users))) if order is None else list(order)
        self.bucket_factor = bucket_factor

    def groups(self) -> list:
        order = self.order
        window = self.B * self.bucket_factor
        groups = []
        for a in range(0, len(order), window):
            chunk = sorted(order[a : a + window], key=lambda i: len(self.users[i]))
            groups.extend(chunk[k : k + self.B] for k in range(0, len(chunk), self.B))
        return groups

    def __iter__(self):
        for g in self.groups():
            yield self.make_batch(g)

    def make_batch(self, group) -> FlatBatch:
        B = len(group)
        T = max(len(self.users[i]) for i in group)
        ids = np.full((B, T), -1, dtype=np.int64)
        ev = np.full((B, T), -1, dtype=np.int64)
        mask = np.zeros((B, T), dtype=self.dtype)
        start = np.zeros((B, T), dtype=self.dtype)
        uids = np.zeros(B, dtype=np.int64)
        events = []
        for b, ui in enumerate(group):
            u = self.users[ui]
            n = len(u)
            ids[b, :n] = u.items
            ev[b, :n] = np.arange(n)
            mask[b, :n] = 1
            start[b, u.session_offsets[:-1]] = 1
            uids[b] = u.user_id
            events.extend((ui, e) for e in range(n))
        items = np.zeros((B, T, self.table.dim), dtype=self.dtype)
        valid = ids >= 0
        items[valid] = self.table.lookup(ids[valid], self.dtype)
        self.counter.hold(items.nbytes)
        batch = FlatBatch(items, ids, mask, start, uids, np.asarray(group, dtype=np.int64), ev)
        if self.sampler is not None:
            _fill_negatives(batch, self.users, self.table, self.sampler, self.rng, self.dtype, events)
        return batch


def naive_targets(users) -> list:
    """Every (user_id, event index, item) in plain per-user order (oracle for coverage tests)."""
    return [(u.user_id, t, int(u.items[t])) for u in users for t in range(len(u))]


def emitted_targets(batches) -> list:
    out = []
    for bt in batches:
        valid = bt.mask > 0
        uid = np.broadcast_to(bt.user_ids[..., None], bt.mask.shape) if bt.item_ids.ndim == 3 else np.broadcast_to(bt.user_ids[:, None], bt.mask.shape)
        out.extend(zip(uid[valid].tolist(), bt.event_index[valid].tolist(), bt.item_ids[valid].tolist()))
    return out
