"""Online inference: per-user state cache, session buffers and a JSON HTTP API.

The cache keeps, per user, the high-level state after the last closed
session, the time of the last interaction and the item IDs of the open
session. Recommendations run the low level over the open session with the
cached state and never mutate the cache.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import struct
import threading
import time
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import numpy as np

from .data import IDLE_THRESHOLD, DataError
from .models import HighState, Model, rank_candidates
from .primitives import ConfigError

log = logging.getLogger(__name__)

SNAPSHOT_MAGIC = b"HTCNUSC1"
SNAPSHOT_VERSION = 1
_DT_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}
_DT_FROM = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class UnknownItemError(DataError):
    pass


class TimestampRegressionError(DataError):
    """An interaction older than the user's last one."""


class SnapshotError(ValueError):
    pass


@dataclass
class UserEntry:
    high: HighState
    last_ts: float | None = None
    buffer: list = field(default_factory=list)  # item IDs of the open session
    version: int = 0
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)


@dataclass
class RecommendationResponse:
    user_id: int
    item_ids: list
    scores: list
    model_version: str
    state_version: int
    cold_user: bool
    session_closed: bool = False  # the open session was idle and treated as closed

    def to_dict(self) -> dict:
        return {
            "user_id": self.user_id,
            "item_ids": self.item_ids,
            "scores": self.scores,
            "model_version": self.model_version,
            "state_version": self.state_version,
            "cold_user": self.cold_user,
            "session_closed": self.session_closed,
        }


class UserStateCache:
    """user_id -> UserEntry. Writes to one user are serialised by that user's lock."""

    def __init__(self, config):
        self.config = config
        self._users: dict[int, UserEntry] = {}
        self._lock = threading.Lock()

    def get(self, user_id: int) -> UserEntry | None:
        return self._users.get(int(user_id))

    def get_or_create(self, user_id: int) -> UserEntry:
        user_id = int(user_id)
        e = self._users.get(user_id)
        if e is None:
            with self._lock:
                e = self._users.setdefault(user_id, UserEntry(HighState.zeros(self.config)))
        return e

    def user_ids(self) -> list:
        with self._lock:
            return list(self._users)

    def __len__(self) -> int:
        return len(self._users)

    def __contains__(self, user_id) -> bool:
        return int(user_id) in self._users

    # -- snapshot -------------------------------------------------------

    def save(self, path) -> Path:
        """Layout: magic, u32 version, u8 dtype code, u32 layers, u32 hidden, u64 users,
        then per user: i64 id, u32 sessions, f64 last_ts (NaN if none), u64 version,
        u32 buffer length, buffer i64 IDs, layers x hidden state values."""
        c = self.config
        dt = np.dtype(c.np_dtype)
        path = Path(path)
        tmp = path.with_suffix(path.suffix + ".tmp")
        ids = sorted(self.user_ids())
        with open(tmp, "wb") as fh:
            fh.write(SNAPSHOT_MAGIC)
            fh.write(struct.pack("<IBIIQ", SNAPSHOT_VERSION, _DT_CODES[dt], c.high_layers, c.high_hidden, len(ids)))
            for uid in ids:
                e = self._users[uid]
                with e.lock:
                    last = math.nan if e.last_ts is None else float(e.last_ts)
                    fh.write(struct.pack("<qIdQI", uid, e.high.session_count, last, e.version, len(e.buffer)))
                    fh.write(np.asarray(e.buffer, dtype="<i8").tobytes())
                    for h in e.high.layers:
                        fh.write(np.asarray(h, dtype=dt.newbyteorder("<")).tobytes())
        os.replace(tmp, path)
        return path

    @classmethod
    def load(cls, path, config) -> "UserStateCache":
        cache = cls(config)
        with open(path, "rb") as fh:
            data = fh.read()
        if data[:8] != SNAPSHOT_MAGIC:
            raise SnapshotError(f"{path} is not a user-state snapshot")
        try:
            version, code, n_layers, hidden, n_users = struct.unpack_from("<IBIIQ", data, 8)
        except struct.error as e:
            raise SnapshotError("snapshot header is truncated") from e
        if version != SNAPSHOT_VERSION:
            raise SnapshotError(f"unsupported snapshot version {version}")
        if code not in _DT_FROM:
            raise SnapshotError(f"unknown dtype code {code}")
        if (n_layers, hidden) != (config.high_layers, config.high_hidden):
            raise SnapshotError(
                f"snapshot state is {n_layers}x{hidden}, model expects {config.high_layers}x{config.high_hidden}")
        dt = _DT_FROM[code]
        pos = 8 + struct.calcsize("<IBIIQ")
        rec = struct.calcsize("<qIdQI")
        try:
            for _ in range(n_users):
                uid, count, last, ver, nb = struct.unpack_from("<qIdQI", data, pos)
                pos += rec
                buf = np.frombuffer(data, "<i8", nb, pos).tolist()
                pos += 8 * nb
                layers = []
                for _ in range(n_layers):
                    layers.append(np.frombuffer(data, dt, hidden, pos).astype(config.np_dtype))
                    pos += dt.itemsize * hidden
                cache._users[uid] = UserEntry(HighState(layers, count), None if math.isnan(last) else last, buf, ver)
        except (struct.error, ValueError) as e:
            raise SnapshotError("snapshot is truncated") from e
        if pos != len(data):
            raise SnapshotError("trailing bytes in snapshot")
        return cache


class RecommenderService:
    """Online counterpart of :meth:`Model.forward_user` for hierarchical models."""

    def __init__(self, model: Model, table, idle_threshold: float = IDLE_THRESHOLD,
                 cache: UserStateCache | None = None, model_version: str = ""):
        if not model.config.hierarchical:
            raise ConfigError("serving needs a hierarchical model (it caches the high-level state)")
        if table.dim != model.config.embedding_dim:
            raise ConfigError(f"embedding table dim {table.dim} != model dim {model.config.embedding_dim}")
        self.model = model
        self.table = table
        self.idle_threshold = float(idle_threshold)
        self.cache = cache if cache is not None else UserStateCache(model.config)
        self.model_version = model_version or _model_tag(model)
        self._swap = threading.Lock()

    # -- helpers --------------------------------------------------------

    def _embs(self, ids):
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and not self.table.contains(ids).all():
            missing = ids[~self.table.contains(ids)]
            raise UnknownItemError(f"unknown item id(s): {missing[:5].tolist()}")
        return self.table.lookup(ids, self.model.config.np_dtype)

    def _close(self, model, high, buffer):
        return model.close_session(high, self._embs(buffer))

    # -- operations -----------------------------------------------------

    def on_interaction(self, user_id: int, item_id: int, timestamp: float) -> dict:
        item_id = int(item_id)
        if not self.table.contains([item_id])[0]:
            raise UnknownItemError(f"unknown item id {item_id}")
        ts = float(timestamp)
        model = self.model
        e = self.cache.get_or_create(user_id)
        closed = False
        with e.lock:
            if e.last_ts is not None and ts < e.last_ts:
                raise TimestampRegressionError(f"user {user_id}: timestamp {ts} is before last activity {e.last_ts}")
            if e.buffer and ts - e.last_ts > self.idle_threshold:
                e.high = self._close(model, e.high, e.buffer)
                e.buffer = []
                closed = True
            e.buffer.append(item_id)
            e.last_ts = ts
            e.version += 1
            return {"user_id": int(user_id), "session_closed": closed, "session_count": e.high.session_count,
                    "session_length": len(e.buffer), "state_version": e.version}

    def recommend(self, user_id: int, candidate_ids, k: int | None = None, now: float | None = None):
        cand = np.asarray(candidate_ids, dtype=np.int64).ravel()
        if cand.size == 0:
            raise DataError("candidate list is empty")
        cand_embs = self._embs(cand)
        model = self.model
        e = self.cache.get(user_id)
        cold = e is None
        if cold:
            high, buffer, last, version = HighState.zeros(model.config), [], None, 0
        else:
            with e.lock:
                high, buffer, last, version = e.high.copy(), list(e.buffer), e.last_ts, e.version
        idle = bool(buffer) and now is not None and float(now) - last > self.idle_threshold
        if idle:
            high = self._close(model, high, buffer)
            buffer = []
        u = model.low_forward(self._embs(buffer), high)[-1]
        ids, scores = rank_candidates(u, cand, cand_embs, k)
        return RecommendationResponse(int(user_id), ids.tolist(), [float(s) for s in scores], self.model_version,
                                      version, cold, idle)

    def close_idle_sessions(self, now: float) -> int:
        """Close every open session idle for longer than the threshold. Returns how many closed."""
        now = float(now)
        n = 0
        model = self.model
        for uid in self.cache.user_ids():
            e = self.cache.get(uid)
            with e.lock:
                if e.buffer and now - e.last_ts > self.idle_threshold:
                    e.high = self._close(model, e.high, e.buffer)
                    e.buffer = []
                    e.version += 1
                    n += 1
        return n

    def swap_model(self, model: Model, model_version: str = "") -> None:
        c, o = model.config, self.model.config
        if (c.high_layers, c.high_hidden, c.embedding_dim) != (o.high_layers, o.high_hidden, o.embedding_dim):
            raise ConfigError("new model's state shape differs from the cached states")
        with self._swap:
            self.model = model
            self.model_version = model_version or _model_tag(model)

    def health(self) -> dict:
        return {"status": "ok", "users": len(self.cache), "model_version": self.model_version,
                "architecture": self.model.config.architecture}


def _model_tag(model: Model) -> str:
    h = hashlib.sha256(model.config.to_json().encode())
    for k in sorted(model.params):
        h.update(np.ascontiguousarray(model.params[k]).tobytes())
    return h.hexdigest()[:12]


# ---------------------------------------------------------------------------
# HTTP


class _Handler(BaseHTTPRequestHandler):
    service: RecommenderService = None  # set per server class
    protocol_version = "HTTP/1.1"

    def log_message(self, fmt, *args):
        log.debug("%s " + fmt, self.address_string(), *args)

    def _send(self, code: int, body: dict):
        raw = json.dumps(body).encode()
        self.send_response(code)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(raw)))
        self.end_headers()
        self.wfile.write(raw)

    def _body(self) -> dict:
        n = int(self.headers.get("Content-Length") or 0)
        if n == 0:
            return {}
        d = json.loads(self.rfile.read(n))
        if not isinstance(d, dict):
            raise ValueError("request body must be a JSON object")
        return d

    def do_GET(self):
        if self.path == "/v1/health":
            self._send(200, self.service.health())
        else:
            self._send(404, {"error": f"no route {self.path}"})

    def do_POST(self):
        svc = self.service
        try:
            body = self._body()
            if self.path == "/v1/interactions":
                self._send(200, svc.on_interaction(int(body["user_id"]), int(body["item_id"]), float(body["timestamp"])))
            elif self.path == "/v1/recommendations":
                k = body.get("k")
                now = body.get("now")
                r = svc.recommend(int(body["user_id"]), body["candidate_ids"], None if k is None else int(k),
                                  None if now is None else float(now))
                self._send(200, r.to_dict())
            elif self.path == "/v1/maintenance/close-idle":
                now = float(body.get("now", time.time()))
                self._send(200, {"closed": svc.close_idle_sessions(now)})
            else:
                self._send(404, {"error": f"no route {self.path}"})
        except DataError as e:
            self._send(422, {"error": str(e)})
        except (KeyError, TypeError, ValueError) as e:
            self._send(400, {"error": f"bad request: {e}"})


def make_server(service: RecommenderService, host: str = "127.0.0.1", port: int = 8080) -> ThreadingHTTPServer:
    handler = type("Handler", (_Handler,), {"service": service})
    srv = ThreadingHTTPServer((host, port), handler)
    srv.daemon_threads = True
    return srv


def serve(service: RecommenderService, host="127.0.0.1", port=8080, snapshot=None) -> None:
    """Run until interrupted; the cache snapshot is written on shutdown."""
    srv = make_server(service, host, port)
    log.info("serving on http://%s:%d", *srv.server_address[:2])
    try:
        srv.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        srv.server_close()
        if snapshot is not None:
            service.cache.save(snapshot)
            log.info("wrote user-state snapshot %s", snapshot)
