"""Interaction logs, sessionisation and the synthetic multi-session generator.

Interaction log format (UTF-8, tab separated, one header line)::

    #htcn-log	1	user_id	item_id	timestamp	kind	impression_group[	session_id]

``kind`` is ``interaction`` or ``impression``. Impressions shown alongside an
interaction share its ``impression_group``; the interacted item is itself one
of the group's impressions. An empty group means no impressions were logged.
The optional ``session_id`` column overrides idle-gap segmentation.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .embeddings import EmbeddingTable, write_embedding_table

log = logging.getLogger(__name__)

LOG_MAGIC = "#htcn-log"
LOG_VERSION = "1"
LOG_FIELDS = ["user_id", "item_id", "timestamp", "kind", "impression_group"]
IDLE_THRESHOLD = 1800.0

INTERACTIONS_FILE = "interactions.tsv"
EMBEDDINGS_FILE = "items.emb"
CONFIG_FILE = "synthetic_config.json"


class DataError(ValueError):
    """Malformed or inconsistent input data."""


class UnsortedTimestampsError(DataError):
    pass


@dataclass
class Interaction:
    user_id: int
    item_id: int
    timestamp: float
    kind: str = "interaction"
    impression_group: int | None = None


def segment_sessions(timestamps, idle_threshold: float = IDLE_THRESHOLD) -> np.ndarray:
    """Session offsets for sorted ``timestamps``.

    A new session starts exactly when the gap to the previous interaction is
    strictly greater than ``idle_threshold``. Returns ``[0, ..., n]``.
    """
    ts = np.asarray(timestamps, dtype=np.float64)
    if ts.size == 0:
        return np.zeros(1, dtype=np.int64)
    gaps = np.diff(ts)
    if np.any(gaps < 0):
        raise UnsortedTimestampsError("timestamps must be sorted before sessionisation")
    starts = np.nonzero(gaps > idle_threshold)[0] + 1
    return np.concatenate(([0], starts, [ts.size])).astype(np.int64)


def _offsets_from_ids(session_ids) -> np.ndarray:
    sid = np.asarray(session_ids)
    if sid.size == 0:
        return np.zeros(1, dtype=np.int64)
    starts = np.nonzero(sid[1:] != sid[:-1])[0] + 1
    return np.concatenate(([0], starts, [sid.size])).astype(np.int64)


@dataclass
class SessionizedHistory:
    """One user's interactions in time order, partitioned into sessions."""

    user_id: int
    items: np.ndarray  # int64 [n]
    timestamps: np.ndarray  # float64 [n]
    session_offsets: np.ndarray  # int64 [n_sessions + 1]
    impressions: list = field(default_factory=list)  # per event int64 arrays (may be empty)

    def __post_init__(self):
        self.items = np.asarray(self.items, dtype=np.int64)
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64)
        self.session_offsets = np.asarray(self.session_offsets, dtype=np.int64)
        if not self.impressions:
            self.impressions = [np.zeros(0, dtype=np.int64) for _ in range(self.items.size)]

    @classmethod
    def from_log(cls, user_id, items, timestamps, impressions=None, idle_threshold=IDLE_THRESHOLD,
                 session_ids=None):
        ts = np.asarray(timestamps, dtype=np.float64)
        if session_ids is not None:
            if np.any(np.diff(ts) < 0):
                raise UnsortedTimestampsError(f"user {user_id}: timestamps not sorted")
            offsets = _offsets_from_ids(session_ids)
        else:
            offsets = segment_sessions(ts, idle_threshold)
        return cls(user_id, items, ts, offsets, list(impressions) if impressions is not None else [])

    def __len__(self) -> int:
        return int(self.items.size)

    @property
    def n_sessions(self) -> int:
        return int(self.session_offsets.size - 1)

    @property
    def q(self) -> np.ndarray:
        """Session index of every timestep."""
        return np.repeat(np.arange(self.n_sessions), np.diff(self.session_offsets))

    @property
    def sessions(self) -> list[np.ndarray]:
        o = self.session_offsets
        return [np.arange(o[i], o[i + 1]) for i in range(self.n_sessions)]

    def session_items(self, j: int) -> np.ndarray:
        return self.items[self.session_offsets[j] : self.session_offsets[j + 1]]

    def resegment(self, idle_threshold=IDLE_THRESHOLD) -> "SessionizedHistory":
        return SessionizedHistory(self.user_id, self.items, self.timestamps,
                                  segment_sessions(self.timestamps, idle_threshold), self.impressions)

    def slice_events(self, lo: int, hi: int) -> "SessionizedHistory":
        """Events ``lo:hi`` with sessions clipped to that range."""
        o = np.clip(self.session_offsets, lo, hi) - lo
        o = np.unique(o)
        if o[0] != 0:
            o = np.concatenate(([0], o))
        return SessionizedHistory(self.user_id, self.items[lo:hi], self.timestamps[lo:hi], o,
                                  self.impressions[lo:hi])


@dataclass
class Dataset:
    users: list
    table: EmbeddingTable | None = None
    meta: dict = field(default_factory=dict)

    @property
    def n_events(self) -> int:
        return sum(len(u) for u in self.users)

    def by_id(self) -> dict:
        return {u.user_id: u for u in self.users}

    def subset(self, user_ids) -> "Dataset":
        keep = set(int(u) for u in user_ids)
        return Dataset([u for u in self.users if u.user_id in keep], self.table, dict(self.meta))

    def item_ids(self) -> np.ndarray:
        if self.table is not None:
            return self.table.ids
        parts = [u.items for u in self.users] + [i for u in self.users for i in u.impressions]
        return np.unique(np.concatenate(parts)) if parts else np.zeros(0, np.int64)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for u in self.users:
            h.update(np.int64(u.user_id).tobytes())
            h.update(u.items.tobytes())
            h.update(u.timestamps.tobytes())
        return h.hexdigest()[:16]


# ---------------------------------------------------------------------------
# log IO


def write_interaction_log(path, users, with_session_ids: bool = False) -> Path:
    path = Path(path)
    group = 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        header = [LOG_MAGIC, LOG_VERSION] + LOG_FIELDS + (["session_id"] if with_session_ids else [])
        w.writerow(header)
        for u in users:
            q = u.q
            for t in range(len(u)):
                imps = u.impressions[t]
                ts = _fmt_ts(u.timestamps[t])
                extra = [str(int(q[t]))] if with_session_ids else []
                if imps.size:
                    for it in imps:
                        w.writerow([u.user_id, int(it), ts, "impression", group] + extra)
                    w.writerow([u.user_id, int(u.items[t]), ts, "interaction", group] + extra)
                    group += 1
                else:
                    w.writerow([u.user_id, int(u.items[t]), ts, "interaction", ""] + extra)
    return path


def _fmt_ts(t: float) -> str:
    return str(int(t)) if float(t).is_integer() else repr(float(t))


def read_interaction_log(path, idle_threshold: float = IDLE_THRESHOLD) -> list:
    """Parse a log into :class:`SessionizedHistory` objects, in first-seen user order."""
    path = Path(path)
    per_user: dict[int, dict] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        r = csv.reader(fh, delimiter="\t")
        try:
            header = next(r)
        except StopIteration:
            raise DataError(f"{path}: empty interaction log") from None
        if header[:2] != [LOG_MAGIC, LOG_VERSION] or header[2:7] != LOG_FIELDS:
            raise DataError(f"{path}: unrecognised header {header[:7]}")
        has_sid = len(header) > 7 and header[7] == "session_id"
        for lineno, row in enumerate(r, start=2):
            if not row:
                continue
            try:
                uid, item, ts, kind, grp = int(row[0]), int(row[1]), float(row[2]), row[3], row[4]
            except (ValueError, IndexError) as exc:
                raise DataError(f"{path}:{lineno}: malformed record {row}") from exc
            rec = per_user.setdefault(uid, {"items": [], "ts": [], "grp": [], "sid": [], "imp": {}})
            if kind == "impression":
                if grp == "":
                    raise DataError(f"{path}:{lineno}: impression without a group")
                rec["imp"].setdefault(grp, []).append(item)
            elif kind == "interaction":
                rec["items"].append(item)
                rec["ts"].append(ts)
                rec["grp"].append(grp)
                if has_sid:
                    rec["sid"].append(row[5])
            else:
                raise DataError(f"{path}:{lineno}: unknown kind {kind!r}")
    users = []
    for uid, rec in per_user.items():
        ts = np.asarray(rec["ts"], dtype=np.float64)
        if np.any(np.diff(ts) < 0):
            raise UnsortedTimestampsError(f"user {uid}: interactions out of time order")
        imps = []
        for item, grp in zip(rec["items"], rec["grp"]):
            if grp == "":
                imps.append(np.zeros(0, dtype=np.int64))
                continue
            group = np.asarray(rec["imp"].get(grp, []), dtype=np.int64)
            if group.size and item not in group:
                raise DataError(f"user {uid}: interacted item {item} missing from its impression group {grp}")
            imps.append(group)
        if not rec["items"]:
            continue
        users.append(SessionizedHistory.from_log(uid, rec["items"], ts, imps, idle_threshold,
                                                 rec["sid"] if has_sid else None))
    return users


def load_dataset(directory, idle_threshold: float = IDLE_THRESHOLD) -> Dataset:
    """Load ``interactions.tsv`` and, when present, ``items.emb`` from ``directory``."""
    directory = Path(directory)
    log_path = directory / INTERACTIONS_FILE if directory.is_dir() else directory
    if not log_path.exists():
        raise DataError(f"no interaction log at {log_path}")
    users = read_interaction_log(log_path, idle_threshold)
    emb = log_path.parent / EMBEDDINGS_FILE
    table = EmbeddingTable.open(emb) if emb.exists() else None
    meta = {}
    cfg = log_path.parent / CONFIG_FILE
    if cfg.exists():
        meta["synthetic_config"] = json.loads(cfg.read_text())
    return Dataset(users, table, meta)


# ---------------------------------------------------------------------------
# synthetic data


@dataclass
class SyntheticConfig:
    """Generator settings. Count defaults give about 3.9 sessions per user,
    2.4 events per session and 9.8 impressions per event, each with a long
    right tail."""

    n_users: int = 2000
    n_items: int = 3000
    dim: int = 32
    sessions_mean: float = 3.9
    sessions_std: float = 4.7
    min_sessions: int = 1
    max_sessions: int = 100
    events_mean: float = 2.4
    events_std: float = 3.0
    max_events: int = 60
    impressions_mean: float = 9.8
    impressions_std: float = 8.6
    max_impressions: int = 80
    rho: float = 0.9  # AR(1) coefficient of the long-term interest walk
    long_term_weight: float = 0.7  # share of session interest variance from the long-term vector
    event_noise: float = 0.35  # per-event jitter around the session interest
    concentration: float = 12.0  # softmax sharpness when picking items near an interest
    n_distractors: int = 256  # interests that impressions' negatives are drawn around
    session_gap_hours: float = 20.0
    event_gap_seconds: float = 90.0
    start_time: float = 1.5e9
    span_days: float = 60.0
    seed: int = 0

    def validate(self) -> "SyntheticConfig":
        if not 0.0 <= self.rho < 1.0:
            raise ValueError("rho must be in [0, 1)")
        if self.n_users < 1 or self.n_items < 2 or self.dim < 1:
            raise ValueError("n_users, n_items and dim must be positive (n_items >= 2)")
        if self.min_sessions < 1 or self.sessions_mean < self.min_sessions:
            raise ValueError("sessions_mean must be >= min_sessions >= 1")
        if self.events_mean < 1 or self.impressions_mean < 1:
            raise ValueError("events and impressions means must be >= 1")
        if not 0.0 <= self.long_term_weight <= 1.0:
            raise ValueError("long_term_weight must be in [0, 1]")
        return self

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "SyntheticConfig":
        raw = json.loads(text)
        if not isinstance(raw, dict):
            raise ValueError("synthetic config must be a JSON object")
        unknown = set(raw) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown synthetic config keys: {sorted(unknown)}")
        return cls(**raw).validate()


def shifted_counts(rng, n, mean, std, low, high) -> np.ndarray:
    """Integer counts >= ``low`` with roughly the given mean and std.

    ``low`` plus a negative binomial, or plus a Poisson when the requested
    spread is below Poisson spread; clipped at ``high``.
    """
    mu = mean - low
    if mu <= 0:
        return np.full(n, low, dtype=np.int64)
    var = std**2
    if var <= mu:
        x = rng.poisson(mu, n)
    else:
        p = mu / var
        r = mu * p / (1.0 - p)
        x = rng.negative_binomial(r, p, n)
    return np.minimum(low + x, high).astype(np.int64)


def long_term_walk(rng, n_sessions: int, dim: int, rho: float) -> np.ndarray:
    """Stationary AR(1) walk of unit-variance vectors, one per session."""
    walk = np.empty((n_sessions, dim))
    walk[0] = rng.standard_normal(dim)
    scale = np.sqrt(1.0 - rho**2)
    for j in range(1, n_sessions):
        walk[j] = rho * walk[j - 1] + scale * rng.standard_normal(dim)
    return walk


def _flat_cdf(weights) -> np.ndarray:
    """Row-normalised cumulative weights, each row offset by its index and flattened."""
    cdf = np.cumsum(weights, axis=1)
    return (cdf / cdf[:, -1:] + np.arange(cdf.shape[0])[:, None]).ravel()


def _sample_rows(flat_cdf, n_cols: int, which, u) -> np.ndarray:
    """Inverse-CDF draws: one column of row ``which[i]`` per uniform ``u[i]``.

    The offset layout of :func:`_flat_cdf` lets one ``searchsorted`` serve
    every row.
    """
    idx = np.searchsorted(flat_cdf, which + u * (1.0 - 1e-12))
    return np.minimum(idx - which * n_cols, n_cols - 1).astype(np.int64)


def _unit(x):
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


@dataclass
class SyntheticData:
    dataset: Dataset
    config: SyntheticConfig
    long_term: list  # per user [n_sessions, dim]
    session_interest: list  # per user [n_sessions, dim]

    def write(self, directory) -> Path:
        return write_dataset(self.dataset, directory, self.config)


def generate_synthetic(config: SyntheticConfig) -> SyntheticData:
    """Deterministic multi-session users whose interests drift across sessions."""
    cfg = config.validate()
    rng = np.random.default_rng(cfg.seed)
    catalog = _unit(rng.standard_normal((cfg.n_items, cfg.dim)))
    item_ids = np.arange(1, cfg.n_items + 1, dtype=np.int64) * 7 + 1000

    distractors = _unit(rng.standard_normal((cfg.n_distractors, cfg.dim)))
    logits = cfg.concentration * distractors @ catalog.T
    logits -= logits.max(axis=1, keepdims=True)
    neg_cdf = _flat_cdf(np.exp(logits))

    n_sess = shifted_counts(rng, cfg.n_users, cfg.sessions_mean, cfg.sessions_std, cfg.min_sessions, cfg.max_sessions)
    w = np.sqrt(cfg.long_term_weight)
    wn = np.sqrt(1.0 - cfg.long_term_weight)
    users, lt_all, si_all = [], [], []
    for u in range(cfg.n_users):
        ns = int(n_sess[u])
        lt = long_term_walk(rng, ns, cfg.dim, cfg.rho)
        si = w * lt + wn * rng.standard_normal((ns, cfg.dim))
        n_ev = shifted_counts(rng, ns, cfg.events_mean, cfg.events_std, 1, cfg.max_events)
        total = int(n_ev.sum())
        sess_of = np.repeat(np.arange(ns), n_ev)
        interest = _unit(si)[sess_of] + cfg.event_noise * rng.standard_normal((total, cfg.dim)) / np.sqrt(cfg.dim)
        lg = cfg.concentration * _unit(interest) @ catalog.T
        lg -= lg.max(axis=1, keepdims=True)
        pe = np.exp(lg)
        pos_rows = _sample_rows(_flat_cdf(pe), cfg.n_items, np.arange(total), rng.random(total))

        n_imp = shifted_counts(rng, total, cfg.impressions_mean, cfg.impressions_std, 1, cfg.max_impressions)
        n_neg = n_imp - 1
        which = rng.integers(0, cfg.n_distractors, int(n_neg.sum()))
        neg_all = _sample_rows(neg_cdf, cfg.n_items, which, rng.random(which.size))
        neg_off = np.concatenate(([0], np.cumsum(n_neg)))
        imps = []
        for i in range(total):
            neg = neg_all[neg_off[i] : neg_off[i + 1]]
            neg = np.unique(neg[neg != pos_rows[i]])
            rows = np.concatenate(([pos_rows[i]], neg))
            if rows.size > 1:
                rows = rows[rng.permutation(rows.size)]
            imps.append(item_ids[rows])

        start = cfg.start_time + rng.uniform(0, cfg.span_days * 86400.0 * 0.25)
        gaps_in = np.minimum(rng.exponential(cfg.event_gap_seconds, total), IDLE_THRESHOLD - 1)
        gaps_out = IDLE_THRESHOLD + 1 + rng.exponential(cfg.session_gap_hours * 3600.0, ns)
        steps = gaps_in.copy()
        first = np.concatenate(([0], np.cumsum(n_ev)[:-1]))
        steps[first] = gaps_out
        steps[0] = 0.0
        ts = np.floor(start + np.cumsum(steps))
        offsets = np.concatenate(([0], np.cumsum(n_ev))).astype(np.int64)
        user_id = 100000 + u
        users.append(SessionizedHistory(user_id, item_ids[pos_rows], ts, offsets, imps))
        lt_all.append(lt)
        si_all.append(si)
    table = EmbeddingTable.from_arrays(item_ids, catalog.astype(np.float32))
    ds = Dataset(users, table, {"synthetic_config": asdict(cfg)})
    return SyntheticData(ds, cfg, lt_all, si_all)


def write_dataset(dataset: Dataset, directory, config: SyntheticConfig | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_interaction_log(directory / INTERACTIONS_FILE, dataset.users)
    if dataset.table is not None:
        write_embedding_table(directory / EMBEDDINGS_FILE, dataset.table.ids, np.asarray(dataset.table.vectors))
    if config is not None:
        (directory / CONFIG_FILE).write_text(config.to_json() + "\n")
    return directory
