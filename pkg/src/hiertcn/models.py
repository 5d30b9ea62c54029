"""Sequence models: single-level TCN/GRU, HierGRU, HRNN and HierTCN.

A hierarchical model keeps one high-level GRU state per user, advanced once
per closed session on the session aggregate. Inside a session the low-level
network (TCN or GRU) reads the shifted item sequence ``[0, x_1, ..., x_{L-1}]``
together with the pre-session high state and a shared MLP head maps its
output to a user embedding ``u_t``. Single-level models see the whole
history with a session-start indicator channel.

Parameters live in one flat ``name -> array`` dict so optimisers and
checkpoints need no knowledge of the structure.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .batching import FlatBatch, SessionBatch
from .primitives import (
    BatchNormStats, ConfigError, ConvFilterBank, EmptySequenceError, GruParams, MlpHeadParams, PackedIndex,
    ResidualParams, ShapeError, dilation_schedule, gru_stack_backward, gru_stack_forward, mlp_head_backward,
    mlp_head_forward, receptive_field, residual_block_packed_backward, residual_block_packed_forward,
    uniform_init,
)

ARCHITECTURES = ("TCN", "GRU", "HierGRU", "HierTCN", "HRNN")
HIERARCHICAL = ("HierGRU", "HierTCN", "HRNN")


@dataclass
class ModelConfig:
    architecture: str = "HierTCN"
    embedding_dim: int = 32
    kernel_size: int = 5
    tcn_blocks: int = 4
    tcn_channels: int = 64
    dilations: list | None = None  # None: 1, 2, 4, ... per block
    low_layers: int = 4  # low-level GRU depth
    low_hidden: int = 64
    high_layers: int = 4
    high_hidden: int = 64
    head_hidden: int = 64
    connection: str = "Full"  # Full | Init
    aggregation: str = "Mean"  # Mean | LastHidden
    dropout: float = 0.0
    batch_norm: bool = False
    bn_steps: int = 64  # timesteps with their own statistics
    gru_bias: bool = False
    dtype: str = "float32"
    seed: int = 0

    @property
    def hierarchical(self) -> bool:
        return self.architecture in HIERARCHICAL

    @property
    def low_kind(self) -> str:
        return "tcn" if self.architecture in ("TCN", "HierTCN") else "gru"

    @property
    def dilation_list(self) -> list:
        if self.dilations is not None:
            return [int(x) for x in self.dilations]
        return dilation_schedule(self.tcn_blocks, self.kernel_size)

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    @property
    def low_out_dim(self) -> int:
        return self.tcn_channels if self.low_kind == "tcn" else self.low_hidden

    @property
    def low_in_dim(self) -> int:
        d = self.embedding_dim
        if not self.hierarchical:
            return d + 1
        if self.low_kind == "gru" and self.connection == "Init":
            return d
        return d + self.high_hidden

    @property
    def high_in_dim(self) -> int:
        return self.low_hidden if self.aggregation == "LastHidden" else self.embedding_dim

    def receptive_field(self) -> int | None:
        if self.low_kind != "tcn":
            return None
        return receptive_field(self.kernel_size, self.dilation_list)

    def validate(self) -> "ModelConfig":
        if self.architecture not in ARCHITECTURES:
            raise ConfigError(f"unknown architecture {self.architecture!r}; choose from {ARCHITECTURES}")
        if self.connection not in ("Full", "Init"):
            raise ConfigError(f"connection must be Full or Init, got {self.connection!r}")
        if self.aggregation not in ("Mean", "LastHidden"):
            raise ConfigError(f"aggregation must be Mean or LastHidden, got {self.aggregation!r}")
        if self.aggregation == "LastHidden" and self.low_kind != "gru":
            raise ConfigError("LastHidden aggregation needs a recurrent low level")
        if self.hierarchical and self.low_kind == "gru" and self.connection == "Init":
            if self.low_layers != self.high_layers or self.low_hidden != self.high_hidden:
                raise ConfigError("Init connection into a GRU needs matching low/high layer counts and widths")
        if self.low_kind == "tcn":
            if self.kernel_size < 1:
                raise ConfigError("kernel_size must be >= 1")
            dl = self.dilation_list
            if len(dl) != self.tcn_blocks or any(x < 1 for x in dl):
                raise ConfigError("need one dilation >= 1 per TCN block")
        for name in ("embedding_dim", "tcn_channels", "low_layers", "low_hidden", "high_layers",
                     "high_hidden", "head_hidden", "bn_steps"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["dilations"] is not None:
            d["dilations"] = [int(x) for x in d["dilations"]]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown model config keys: {sorted(extra)}")
        return cls(**d).validate()


def preset(architecture: str, scale: str = "desk", embedding_dim: int = 32, **overrides) -> ModelConfig:
    """Reference configurations.

    ``full`` uses the production widths; ``desk`` keeps the same depths and
    dilations with narrower layers so experiments fit a laptop CPU.
    """
    if scale not in ("desk", "full"):
        raise ConfigError(f"unknown scale {scale!r}")
    w = 128 if scale == "full" else 48
    base = dict(architecture=architecture, embedding_dim=embedding_dim, head_hidden=w)
    if architecture == "TCN":
        base.update(tcn_blocks=6, tcn_channels=w, dilations=[1, 2, 4, 8, 16, 32])
    elif architecture == "GRU":
        base.update(low_layers=4, low_hidden=200 if scale == "full" else 64)
    elif architecture == "HierTCN":
        base.update(tcn_blocks=4, tcn_channels=w, dilations=[1, 2, 4, 8], high_layers=4, high_hidden=w,
                    connection="Full", aggregation="Mean")
    elif architecture == "HierGRU":
        base.update(low_layers=4, low_hidden=w, high_layers=4, high_hidden=w, connection="Full", aggregation="Mean")
    elif architecture == "HRNN":
        base.update(low_layers=4, low_hidden=w, high_layers=4, high_hidden=w, connection="Init",
                    aggregation="LastHidden")
    else:
        raise ConfigError(f"unknown architecture {architecture!r}")
    base.update(overrides)
    return ModelConfig(**base).validate()


@dataclass
class HighState:
    """High-level GRU state of one user: one vector per layer."""

    layers: list
    session_count: int = 0

    @classmethod
    def zeros(cls, config: ModelConfig) -> "HighState":
        return cls([np.zeros(config.high_hidden, config.np_dtype) for _ in range(config.high_layers)], 0)

    def copy(self) -> "HighState":
        return HighState([x.copy() for x in self.layers], self.session_count)

    @property
    def top(self) -> np.ndarray:
        return self.layers[-1]


def _prefix(grads: dict, prefix: str) -> dict:
    return {f"{prefix}{k}": v for k, v in grads.items()}


def _add(dst: dict, src: dict) -> None:
    for k, v in src.items():
        if k in dst:
            dst[k] = dst[k] + v
        else:
            dst[k] = v


class Model:
    """Trainable weights plus the forward/backward passes for one architecture."""

    def __init__(self, config: ModelConfig, params: dict | None = None, buffers: dict | None = None):
        self.config = config.validate()
        if params is None:
            params, buffers = self._init_params()
        self.params = params
        self.buffers = buffers if buffers is not None else {}
        self._check_params()

    # -- construction ---------------------------------------------------

    def _init_params(self):
        c = self.config
        dt = c.np_dtype
        rng = np.random.default_rng(c.seed)
        p, buf = {}, {}
        if c.low_kind == "tcn":
            d_in = c.low_in_dim
            for r, dil in enumerate(c.dilation_list):
                pre = f"low.b{r}."
                for j, (ci, co) in enumerate(((d_in, c.tcn_channels), (c.tcn_channels, c.tcn_channels)), 1):
                    bank = ConvFilterBank.init(rng, c.kernel_size, ci, co, dil, True, dt)
                    p[f"{pre}conv{j}.f"] = bank.f
                    p[f"{pre}conv{j}.b"] = bank.b
                    if c.batch_norm:
                        p[f"{pre}bn{j}.gamma"] = np.ones(co, dt)
                        p[f"{pre}bn{j}.beta"] = np.zeros(co, dt)
                        st = BatchNormStats.init(c.bn_steps, co, dt)
                        buf[f"{pre}bn{j}.mean"] = st.mean
                        buf[f"{pre}bn{j}.var"] = st.var
                if d_in != c.tcn_channels:
                    p[f"{pre}proj"] = uniform_init(rng, (d_in, c.tcn_channels), d_in, dt)
                d_in = c.tcn_channels
        else:
            d_in = c.low_in_dim
            for l in range(c.low_layers):
                g = GruParams.init(rng, d_in, c.low_hidden, c.gru_bias, dt)
                p[f"low.gru{l}.W"], p[f"low.gru{l}.U"] = g.W, g.U
                if g.b is not None:
                    p[f"low.gru{l}.b"] = g.b
                d_in = c.low_hidden
        if c.hierarchical:
            d_in = c.high_in_dim
            for l in range(c.high_layers):
                g = GruParams.init(rng, d_in, c.high_hidden, c.gru_bias, dt)
                p[f"high.gru{l}.W"], p[f"high.gru{l}.U"] = g.W, g.U
                if g.b is not None:
                    p[f"high.gru{l}.b"] = g.b
                d_in = c.high_hidden
        head = MlpHeadParams.init(rng, c.low_out_dim, c.head_hidden, c.embedding_dim, dt)
        p.update({"head.W1": head.W1, "head.b1": head.b1, "head.W2": head.W2, "head.b2": head.b2})
        return p, buf

    def _check_params(self):
        ref, refbuf = Model.__new__(Model), None
        ref.config = self.config
        shapes, refbuf = ref._init_params()
        if set(shapes) != set(self.params):
            raise ShapeError(f"parameter names differ from config: {sorted(set(shapes) ^ set(self.params))}")
        for k, v in shapes.items():
            if self.params[k].shape != v.shape:
                raise ShapeError(f"parameter {k} has shape {self.params[k].shape}, want {v.shape}")
        for k, v in refbuf.items():
            self.buffers.setdefault(k, v)

    def n_params(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    # -- structured views ---------------------------------------------

    def _gru_layers(self, prefix: str, n: int) -> list:
        return [GruParams(self.params[f"{prefix}{l}.W"], self.params[f"{prefix}{l}.U"],
                          self.params.get(f"{prefix}{l}.b")) for l in range(n)]

    def low_layers(self) -> list:
        return self._gru_layers("low.gru", self.config.low_layers)

    def high_layers(self) -> list:
        return self._gru_layers("high.gru", self.config.high_layers)

    def tcn_blocks(self) -> list:
        c, p = self.config, self.params
        out = []
        for r, dil in enumerate(c.dilation_list):
            pre = f"low.b{r}."
            bn = [None, None]
            if c.batch_norm:
                for j in (1, 2):
                    st = BatchNormStats(self.buffers[f"{pre}bn{j}.mean"], self.buffers[f"{pre}bn{j}.var"])
                    bn[j - 1] = (p[f"{pre}bn{j}.gamma"], p[f"{pre}bn{j}.beta"], st)
            out.append(ResidualParams(
                ConvFilterBank(p[f"{pre}conv1.f"], dil, p[f"{pre}conv1.b"]),
                ConvFilterBank(p[f"{pre}conv2.f"], dil, p[f"{pre}conv2.b"]),
                p.get(f"{pre}proj"), bn[0], bn[1],
            ))
        return out

    def head(self) -> MlpHeadParams:
        p = self.params
        return MlpHeadParams(p["head.W1"], p["head.b1"], p["head.W2"], p["head.b2"])

    # -- low level ----------------------------------------------------

    def _low_forward(self, x, mask, s0=None, train=False, rng=None):
        """Low-level network over assembled inputs [N, T, low_in]. Returns (z, finals, cache)."""
        c = self.config
        if c.low_kind == "tcn":
            idx = PackedIndex(mask)
            h = idx.pack(x)
            caches = []
            for blk in self.tcn_blocks():
                h, bc = residual_block_packed_forward(h, blk, idx, train, c.dropout, rng)
                caches.append(bc)
            return idx.unpack(h), None, (idx, caches)
        top, finals, cache = gru_stack_forward(x, self.low_layers(), s0, mask, None, c.dropout, rng, train)
        return top, finals, cache

    def _low_backward(self, dz, cache, d_finals=None):
        """Returns (dx, d s0 per layer or None, grads)."""
        grads = {}
        if self.config.low_kind == "tcn":
            idx, caches = cache
            d = idx.pack(dz)
            for r in range(len(caches) - 1, -1, -1):
                d, g = residual_block_packed_backward(d, caches[r])
                _add(grads, _prefix(g, f"low.b{r}."))
            return idx.unpack(d), None, grads
        dx, ds0, gl = gru_stack_backward(cache, d_top=dz, d_finals=d_finals)
        for l, g in enumerate(gl):
            _add(grads, _prefix(g, f"low.gru{l}."))
        return dx, ds0, grads

    def _assemble(self, x_sh, pre):
        """Attach the pre-session high state (list per layer, [N, H]) to shifted items [N, T, d]."""
        c = self.config
        if c.low_kind == "gru" and c.connection == "Init":
            return x_sh, list(pre)
        N, T, _ = x_sh.shape
        s = np.zeros((N, T, c.high_hidden), dtype=x_sh.dtype)
        if c.connection == "Full":
            s[:] = pre[-1][:, None, :]
        else:
            s[:, 0] = pre[-1]
        return np.concatenate([x_sh, s], axis=2), None

    def _pre_grads(self, dx, ds0):
        """Gradient on the pre-session state (per layer, or only the top layer)."""
        c = self.config
        d = c.embedding_dim
        if c.low_kind == "gru" and c.connection == "Init":
            return ds0
        if c.connection == "Full":
            return [None] * (c.high_layers - 1) + [dx[:, :, d:].sum(axis=1)]
        return [None] * (c.high_layers - 1) + [dx[:, 0, d:]]

    # -- batched hierarchical -----------------------------------------

    def init_batch_state(self, batch_size: int) -> list:
        c = self.config
        return [np.zeros((batch_size, c.high_hidden), c.np_dtype) for _ in range(c.high_layers)]

    def forward(self, batch, state=None, train=False, rng=None, sequential=None):
        """User embeddings for every event of ``batch``.

        Returns (u, new_state, cache). ``u`` matches ``batch.items``; rows and
        steps outside the mask are zero. ``new_state`` is the per-row high
        state to feed the next batch (None for single-level models).
        """
        if isinstance(batch, FlatBatch):
            if self.config.hierarchical:
                raise ConfigError("hierarchical models consume SessionBatch inputs")
            return self._forward_flat(batch, train, rng)
        if not self.config.hierarchical:
            raise ConfigError("single-level models consume FlatBatch inputs")
        B = batch.items.shape[0]
        state = self.init_batch_state(B) if state is None else state
        if sequential is None:
            sequential = self.config.aggregation == "LastHidden"
        if sequential:
            return self._forward_sequential(batch, state, train, rng)
        return self._forward_parallel(batch, state, train, rng)

    def backward(self, du, cache) -> dict:
        kind = cache["kind"]
        if kind == "flat":
            return self._backward_flat(du, cache)
        if kind == "parallel":
            return self._backward_parallel(du, cache)
        return self._backward_sequential(du, cache)

    def _forward_parallel(self, batch: SessionBatch, state, train, rng):
        c = self.config
        dt = c.np_dtype
        items = np.asarray(batch.items, dtype=dt)
        B, S, L, d = items.shape
        m = np.asarray(batch.mask, dtype=dt)
        sm = np.asarray(batch.session_mask, dtype=dt)
        reset = np.asarray(batch.reset, dtype=dt)
        cnt = np.maximum(m.sum(axis=2), 1)
        agg = (items * m[..., None]).sum(axis=2) / cnt[..., None]
        _, finals, hcache = gru_stack_forward(agg, self.high_layers(), [s.astype(dt) for s in state], sm, reset)
        pre_all = [np.ascontiguousarray(lc["sp"].transpose(1, 0, 2)) for lc in hcache["layers"]]  # [B, S, H]
        valid = sm > 0
        x_sh = np.zeros((int(valid.sum()), L, d), dtype=dt)
        x_sh[:, 1:] = items[valid][:, :-1]
        m_low = m[valid]
        x, s0 = self._assemble(x_sh, [pa[valid] for pa in pre_all])
        z, _, lcache = self._low_forward(x, m_low, s0, train, rng)
        uv, hc = mlp_head_forward(z, self.head())
        u = np.zeros_like(items)
        u[valid] = uv * m_low[..., None]
        new_state = [f.copy() for f in finals]
        cache = dict(kind="parallel", valid=valid, m_low=m_low, lcache=lcache, hc=hc, hcache=hcache,
                     keep=1.0 - reset, shape=(B, S))
        return u, new_state, cache

    def _backward_parallel(self, du, cache):
        valid, m_low = cache["valid"], cache["m_low"]
        B, S = cache["shape"]
        grads = {}
        dz, gh = mlp_head_backward(du[valid] * m_low[..., None], cache["hc"])
        _add(grads, _prefix(gh, "head."))
        dx, ds0, gl = self._low_backward(dz, cache["lcache"])
        _add(grads, gl)
        d_pre = self._pre_grads(dx, ds0)
        keep = cache["keep"]
        d_seqs = []
        for dp in d_pre:
            if dp is None:
                d_seqs.append(None)
                continue
            full = np.zeros((B, S, dp.shape[-1]), dtype=dp.dtype)
            full[valid] = dp
            dseq = np.zeros_like(full)
            # pre-state of slot t is the output of slot t-1 (times keep); slot 0 reads the detached carry
            dseq[:, :-1] = full[:, 1:] * keep[:, 1:, None]
            d_seqs.append(dseq)
        _, _, gh = gru_stack_backward(cache["hcache"], d_seqs=d_seqs)
        for l, g in enumerate(gh):
            _add(grads, _prefix(g, f"high.gru{l}."))
        return grads

    def _forward_sequential(self, batch: SessionBatch, state, train, rng):
        c = self.config
        dt = c.np_dtype
        items = np.asarray(batch.items, dtype=dt)
        B, S, L, d = items.shape
        m = np.asarray(batch.mask, dtype=dt)
        sm = batch.session_mask
        keep = 1.0 - np.asarray(batch.reset, dtype=dt)
        last = c.aggregation == "LastHidden"
        st = [s.astype(dt).copy() for s in state]
        u = np.zeros_like(items)
        slots = []
        for s in range(S):
            st = [x * keep[:, s, None] for x in st]
            rows = np.nonzero(sm[:, s] > 0)[0]
            if rows.size == 0:
                slots.append(None)
                continue
            its, ms = items[rows, s], m[rows, s]
            T = L + 1 if last else L
            x_sh = np.zeros((rows.size, T, d), dtype=dt)
            x_sh[:, 1:] = its[:, : T - 1]
            if last:
                m_in = np.concatenate([np.ones((rows.size, 1), dt), ms], axis=1)
            else:
                m_in = ms
            x, s0 = self._assemble(x_sh, [x[rows] for x in st])
            z, lfin, lcache = self._low_forward(x, m_in, s0, train, rng)
            uv, hc = mlp_head_forward(z[:, :L], self.head())
            u[rows, s] = uv * ms[..., None]
            if last:
                agg = lfin[-1]
            else:
                agg = (its * ms[..., None]).sum(axis=1) / np.maximum(ms.sum(axis=1), 1)[:, None]
            _, hfin, hcache = gru_stack_forward(agg[:, None, :], self.high_layers(), [x[rows] for x in st])
            st = [x.copy() for x in st]
            for l in range(c.high_layers):
                st[l][rows] = hfin[l]
            slots.append(dict(rows=rows, ms=ms, T=T, lcache=lcache, hc=hc, hcache=hcache))
        cache = dict(kind="sequential", slots=slots, keep=keep, shape=(B, S, L))
        return u, st, cache

    def _backward_sequential(self, du, cache):
        c = self.config
        B, S, L = cache["shape"]
        keep = cache["keep"]
        dt = c.np_dtype
        last = c.aggregation == "LastHidden"
        grads = {}
        d_st = [np.zeros((B, c.high_hidden), dt) for _ in range(c.high_layers)]
        for s in range(S - 1, -1, -1):
            sl = cache["slots"][s]
            if sl is not None:
                rows = sl["rows"]
                d_fin = [x[rows] for x in d_st]
                d_pre = [x.copy() for x in d_st]
                for x in d_pre:
                    x[rows] = 0
                dx_h, ds0_h, gh = gru_stack_backward(sl["hcache"], d_finals=d_fin)
                for l, g in enumerate(gh):
                    _add(grads, _prefix(g, f"high.gru{l}."))
                dz, ghd = mlp_head_backward(du[rows, s] * sl["ms"][..., None], sl["hc"])
                _add(grads, _prefix(ghd, "head."))
                d_low_fin = None
                if sl["T"] > L:
                    dz = np.concatenate([dz, np.zeros_like(dz[:, :1])], axis=1)
                if last:
                    d_low_fin = [None] * (c.low_layers - 1) + [dx_h[:, 0]]
                dx, ds0_l, gl = self._low_backward(dz, sl["lcache"], d_low_fin)
                _add(grads, gl)
                for l, g in enumerate(self._pre_grads(dx, ds0_l)):
                    d_pre[l][rows] += ds0_h[l]
                    if g is not None:
                        d_pre[l][rows] += g
                d_st = d_pre
            d_st = [x * keep[:, s, None] for x in d_st]
        return grads

    # -- batched single level -----------------------------------------

    def _forward_flat(self, batch: FlatBatch, train, rng):
        dt = self.config.np_dtype
        items = np.asarray(batch.items, dtype=dt)
        m = np.asarray(batch.mask, dtype=dt)
        B, T, d = items.shape
        x = np.zeros((B, T, d + 1), dtype=dt)
        x[:, 1:, :d] = items[:, :-1]
        x[:, :, d] = batch.session_start
        z, _, lcache = self._low_forward(x, m, None, train, rng)
        u, hc = mlp_head_forward(z, self.head())
        u = u * m[..., None]
        return u, None, dict(kind="flat", m=m, lcache=lcache, hc=hc)

    def _backward_flat(self, du, cache):
        grads = {}
        dz, gh = mlp_head_backward(du * cache["m"][..., None], cache["hc"])
        _add(grads, _prefix(gh, "head."))
        _, _, gl = self._low_backward(dz, cache["lcache"])
        _add(grads, gl)
        return grads

    # -- single user --------------------------------------------------

    def low_forward(self, items_prefix, high: HighState | None = None, return_final=False):
        """User embeddings inside one session.

        ``items_prefix`` [n, d] are the items seen so far. Returns ``n + 1``
        embeddings: row ``i`` is the prediction made after observing the
        first ``i`` items, so row 0 comes from the start token alone.
        """
        c = self.config
        if not c.hierarchical:
            raise ConfigError("low_forward applies to hierarchical models")
        dt = c.np_dtype
        items_prefix = np.asarray(items_prefix, dtype=dt).reshape(-1, c.embedding_dim)
        high = HighState.zeros(c) if high is None else high
        n = items_prefix.shape[0]
        x_sh = np.zeros((1, n + 1, c.embedding_dim), dtype=dt)
        x_sh[0, 1:] = items_prefix
        x, s0 = self._assemble(x_sh, [np.asarray(h, dtype=dt)[None] for h in high.layers])
        z, fin, _ = self._low_forward(x, np.ones((1, n + 1), dt), s0)
        u = mlp_head_forward(z, self.head())[0][0]
        if return_final:
            return u, (None if fin is None else [f[0] for f in fin])
        return u

    def session_aggregate(self, session_items, mask=None, high: HighState | None = None):
        """Session summary fed to the high level (Mean of items, or the low level's last hidden)."""
        items = np.asarray(session_items, dtype=self.config.np_dtype)
        if self.config.aggregation == "LastHidden":
            if items.shape[0] == 0:
                raise EmptySequenceError("cannot aggregate an empty session")
            _, fin = self.low_forward(items, high, return_final=True)
            return fin[-1]
        return session_aggregate(items, mask)

    def high_update(self, high: HighState, agg) -> HighState:
        dt = self.config.np_dtype
        _, fin, _ = gru_stack_forward(np.asarray(agg, dtype=dt)[None, None, :], self.high_layers(),
                                      [np.asarray(h, dtype=dt)[None] for h in high.layers])
        return HighState([f[0].copy() for f in fin], high.session_count + 1)

    def close_session(self, high: HighState, session_items) -> HighState:
        return self.high_update(high, self.session_aggregate(session_items, high=high))

    def forward_user(self, history, table) -> np.ndarray:
        """User embedding before each interaction of ``history`` ([n_events, d])."""
        c = self.config
        n = len(history)
        if n == 0:
            return np.zeros((0, c.embedding_dim), c.np_dtype)
        embs = table.lookup(history.items, c.np_dtype)
        if not c.hierarchical:
            start = np.zeros((1, n), c.np_dtype)
            start[0, history.session_offsets[:-1]] = 1
            fb = FlatBatch(embs[None], history.items[None], np.ones((1, n), c.np_dtype), start,
                           np.array([history.user_id]), np.zeros(1, np.int64), np.arange(n)[None])
            return self._forward_flat(fb, False, None)[0][0]
        out = np.zeros((n, c.embedding_dim), c.np_dtype)
        high = HighState.zeros(c)
        o = history.session_offsets
        for j in range(history.n_sessions):
            its = embs[o[j] : o[j + 1]]
            out[o[j] : o[j + 1]] = self.low_forward(its, high)[:-1]
            high = self.close_session(high, its)
        return out

    def user_state(self, history, table) -> HighState:
        """High state after every session of ``history`` has closed."""
        high = HighState.zeros(self.config)
        embs = table.lookup(history.items, self.config.np_dtype)
        o = history.session_offsets
        for j in range(history.n_sessions):
            high = self.close_session(high, embs[o[j] : o[j + 1]])
        return high

    def copy(self) -> "Model":
        return Model(self.config, {k: v.copy() for k, v in self.params.items()},
                     {k: v.copy() for k, v in self.buffers.items()})


def session_aggregate(session_items, mask=None):
    """Mean over the valid rows of ``session_items`` [L, d]."""
    x = np.asarray(session_items)
    if mask is not None:
        mk = np.asarray(mask, dtype=bool)
        x = x[mk]
    if x.shape[0] == 0:
        raise EmptySequenceError("cannot aggregate an empty session")
    return x.mean(axis=0)


def score(u, x):
    """Dot-product relevance of item(s) ``x`` for user embedding ``u``."""
    return np.asarray(x) @ np.asarray(u)


def rank_candidates(u, ids, embeddings, k=None):
    """Candidates by descending score, ties by ascending ID. Returns (ids, scores)."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size == 0:
        raise ValueError("candidate pool is empty")
    s = score(u, embeddings)
    order = np.lexsort((ids, -s))
    if k is not None:
        order = order[: max(int(k), 0)]
    return ids[order], s[order]


def param_count(config: ModelConfig) -> int:
    return Model(config).n_params()


def match_param_count(config: ModelConfig, target: int, knob: str, lo: int = 2, hi: int = 2048):
    """Set integer field ``knob`` so the parameter count is as close to ``target`` as possible."""

    def count(w):
        return param_count(ModelConfig.from_dict({**config.to_dict(), knob: w}))

    while lo < hi:
        mid = (lo + hi) // 2
        if count(mid) < target:
            lo = mid + 1
        else:
            hi = mid
    best = min((w for w in (lo - 1, lo) if w >= 1), key=lambda w: abs(count(w) - target))
    return ModelConfig.from_dict({**config.to_dict(), knob: best})
