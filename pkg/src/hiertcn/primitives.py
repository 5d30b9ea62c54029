"""Differentiable building blocks with hand-written backward passes.

Every ``*_forward`` returns ``(output, cache)`` and the matching
``*_backward`` takes the upstream gradient plus that cache. Arrays are
batch-major: sequences are ``[batch, time, channels]``. Matrices multiply
from the right (``x @ W``), so a weight is stored ``[fan_in, fan_out]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _accel


class ShapeError(ValueError):
    pass


class EmptySequenceError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class NonFiniteGradientError(FloatingPointError):
    pass


# ---------------------------------------------------------------------------
# helpers


def mm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``a @ b`` over the last axis of ``a``, flattening leading axes.

    Single-row products are padded to two rows so every call takes the same
    BLAS kernel; this keeps results bit-identical no matter how a sequence is
    chunked.
    """
    lead = a.shape[:-1]
    a2 = a.reshape(-1, a.shape[-1])
    if a2.shape[0] == 1:
        out = (np.concatenate([a2, a2]) @ b)[:1]
    else:
        out = a2 @ b
    return out.reshape(*lead, b.shape[-1])


def mm_t(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``a.T @ b`` after flattening all leading axes (weight gradients)."""
    return a.reshape(-1, a.shape[-1]).T @ b.reshape(-1, b.shape[-1])


def sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def uniform_init(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32) -> np.ndarray:
    a = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-a, a, size=shape).astype(dtype)


def dropout_mask(rng: np.random.Generator, shape, rate: float, dtype=np.float32) -> np.ndarray:
    """Inverted-dropout multiplier: kept entries are scaled by 1/(1-rate)."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return np.ones(shape, dtype=dtype)
    keep = rng.random(shape) >= rate
    return (keep / (1.0 - rate)).astype(dtype)


def recurrent_dropout_step(h_candidate, rate: float, rng: np.random.Generator, train: bool = True):
    """Apply dropout to a GRU candidate activation; identity outside training."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return h_candidate
    return h_candidate * dropout_mask(rng, h_candidate.shape, rate, h_candidate.dtype)


# ---------------------------------------------------------------------------
# GRU


@dataclass
class GruParams:
    """One GRU layer. Column blocks of ``W``/``U`` are (update, reset, candidate)."""

    W: np.ndarray  # [d_in, 3H]
    U: np.ndarray  # [H, 3H]
    b: np.ndarray | None = None  # [3H], off by default

    @classmethod
    def init(cls, rng, d_in: int, hidden: int, bias: bool = False, dtype=np.float32):
        W = uniform_init(rng, (d_in, 3 * hidden), d_in, dtype)
        U = uniform_init(rng, (hidden, 3 * hidden), hidden, dtype)
        b = np.zeros(3 * hidden, dtype=dtype) if bias else None
        return cls(W, U, b)

    @property
    def hidden(self) -> int:
        return self.U.shape[0]

    @property
    def d_in(self) -> int:
        return self.W.shape[0]

    def _block(self, m, i):
        H = self.hidden
        return m[:, i * H : (i + 1) * H]

    Wg = property(lambda self: self._block(self.W, 0))
    Wr = property(lambda self: self._block(self.W, 1))
    Wh = property(lambda self: self._block(self.W, 2))
    Ug = property(lambda self: self._block(self.U, 0))
    Ur = property(lambda self: self._block(self.U, 1))
    Uh = property(lambda self: self._block(self.U, 2))


def gru_cell_step(x, s_prev, p: GruParams, drop=None):
    """One GRU update written out gate by gate (reference implementation)."""
    x = np.asarray(x)
    s_prev = np.asarray(s_prev)
    if x.shape[-1] != p.d_in or s_prev.shape[-1] != p.hidden:
        raise ShapeError(
            f"gru_cell_step: x has {x.shape[-1]} features (want {p.d_in}), "
            f"state has {s_prev.shape[-1]} (want {p.hidden})"
        )
    H = p.hidden
    bg = br = bh = 0.0
    if p.b is not None:
        bg, br, bh = p.b[:H], p.b[H : 2 * H], p.b[2 * H :]
    g = sigmoid(x @ p.Wg + s_prev @ p.Ug + bg)
    r = sigmoid(x @ p.Wr + s_prev @ p.Ur + br)
    h = np.tanh(x @ p.Wh + (s_prev * r) @ p.Uh + bh)
    if drop is not None:
        h = h * drop
    return (1.0 - g) * h + g * s_prev


def gru_layer_forward(x, p: GruParams, s0=None, mask=None, reset=None, drop=None):
    """Run one GRU layer over ``x`` [B, T, d_in].

    ``mask`` [B, T] marks valid steps; at invalid steps the state is carried
    through unchanged. ``reset`` [B, T] zeroes the state before that step.
    ``drop`` [B, T, H] multiplies the candidate activation only.
    Returns (states [B, T, H], cache); the final state is ``states[:, -1]``.
    """
    B, T, d_in = x.shape
    if T == 0:
        raise EmptySequenceError("GRU needs at least one timestep")
    if d_in != p.d_in:
        raise ShapeError(f"GRU layer expects {p.d_in} input features, got {d_in}")
    H = p.hidden
    dt = p.W.dtype
    xw = mm(x, p.W)
    if p.b is not None:
        xw = xw + p.b
    xw = np.ascontiguousarray(xw.transpose(1, 0, 2), dtype=dt)
    s0 = np.zeros((B, H), dtype=dt) if s0 is None else np.ascontiguousarray(s0, dtype=dt)
    if s0.shape != (B, H):
        raise ShapeError(f"initial state shape {s0.shape}, want {(B, H)}")
    m = np.ones((T, B), dtype=dt) if mask is None else np.ascontiguousarray(np.asarray(mask, dtype=dt).T)
    keep = np.ones((T, B), dtype=dt) if reset is None else np.ascontiguousarray(1.0 - np.asarray(reset, dtype=dt).T)
    dr = np.ones((T, B, H), dtype=dt) if drop is None else np.ascontiguousarray(np.asarray(drop, dtype=dt).transpose(1, 0, 2))
    u_gr = np.ascontiguousarray(p.U[:, : 2 * H])
    u_h = np.ascontiguousarray(p.U[:, 2 * H :])
    out, sp, g, r, h = _accel.gru_forward(xw, u_gr, u_h, s0, m, keep, dr)
    cache = dict(x=x, p=p, sp=sp, g=g, r=r, h=h, mask=m, keep=keep, drop=dr)
    return np.ascontiguousarray(out.transpose(1, 0, 2)), cache


def gru_layer_backward(d_out, d_final, cache):
    """Returns (dx [B, T, d_in], d s0 [B, H], {"W", "U", "b"})."""
    p: GruParams = cache["p"]
    sp = cache["sp"]
    T, B, H = sp.shape
    dt = sp.dtype
    if d_out is None:
        d_out_t = np.zeros((T, B, H), dtype=dt)
    else:
        d_out_t = np.ascontiguousarray(np.asarray(d_out, dtype=dt).transpose(1, 0, 2))
    d_final = np.zeros((B, H), dtype=dt) if d_final is None else np.ascontiguousarray(d_final, dtype=dt)
    u_gr_t = np.ascontiguousarray(p.U[:, : 2 * H].T)
    u_h_t = np.ascontiguousarray(p.U[:, 2 * H :].T)
    da, ds0 = _accel.gru_backward(
        d_out_t, d_final, u_gr_t, u_h_t, sp, cache["g"], cache["r"], cache["h"],
        cache["mask"], cache["keep"], cache["drop"],
    )
    dU = np.empty_like(p.U)
    dU[:, : 2 * H] = mm_t(sp, da[:, :, : 2 * H])
    dU[:, 2 * H :] = mm_t(sp * cache["r"], da[:, :, 2 * H :])
    da_b = da.transpose(1, 0, 2)
    x = cache["x"]
    dW = mm_t(x, np.ascontiguousarray(da_b))
    dx = mm(da_b, p.W.T)
    grads = {"W": dW, "U": dU}
    if p.b is not None:
        grads["b"] = da.sum(axis=(0, 1))
    return dx, ds0, grads


def gru_stack_forward(x_seq, layers: list[GruParams], s0=None, mask=None, reset=None,
                      dropout: float = 0.0, rng=None, train: bool = False):
    """Stacked GRU. Layer ``l`` reads layer ``l-1``'s hidden sequence.

    Accepts ``[T, d_in]`` (single sequence) or ``[B, T, d_in]``. Returns
    (top-layer hidden sequence, per-layer final states, cache); the cache's
    ``"seqs"`` entry has every layer's sequence.
    """
    x_seq = np.asarray(x_seq)
    single = x_seq.ndim == 2
    if single:
        x_seq = x_seq[None]
        if s0 is not None:
            s0 = [np.asarray(s)[None] for s in s0]
    if x_seq.shape[1] == 0:
        raise EmptySequenceError("gru_stack_forward: empty sequence")
    if s0 is None:
        s0 = [None] * len(layers)
    caches, seqs = [], []
    h = x_seq
    for p, s_init in zip(layers, s0):
        drop = None
        if train and dropout > 0.0:
            drop = dropout_mask(rng, (h.shape[0], h.shape[1], p.hidden), dropout, p.W.dtype)
        h, c = gru_layer_forward(h, p, s_init, mask, reset, drop)
        caches.append(c)
        seqs.append(h)
    finals = [s[:, -1] for s in seqs]
    cache = dict(layers=caches, seqs=seqs, single=single)
    if single:
        return seqs[-1][0], [f[0] for f in finals], cache
    return seqs[-1], finals, cache


def gru_stack_backward(cache, d_top=None, d_finals=None, d_seqs=None):
    """Backward through a stack. ``d_seqs`` optionally adds grads on any layer's sequence.

    Returns (dx, [d s0 per layer], [grad dict per layer]).
    """
    caches = cache["layers"]
    n = len(caches)
    single = cache["single"]

    def _b(a):
        return None if a is None else (np.asarray(a)[None] if single else a)

    d_finals = [None] * n if d_finals is None else [_b(d) for d in d_finals]
    d_seqs = [None] * n if d_seqs is None else [_b(d) for d in d_seqs]
    d_top = _b(d_top)
    grads = [None] * n
    ds0 = [None] * n
    d_in = d_top
    for l in range(n - 1, -1, -1):
        d = d_in
        if d_seqs[l] is not None:
            d = d_seqs[l] if d is None else d + d_seqs[l]
        d_in, ds0[l], grads[l] = gru_layer_backward(d, d_finals[l], caches[l])
    if single:
        return d_in[0], [s[0] for s in ds0], grads
    return d_in, ds0, grads


# ---------------------------------------------------------------------------
# Causal dilated convolution


@dataclass
class ConvFilterBank:
    f: np.ndarray  # [k, d_in, d_out]; f[j] taps x_{t - dilation*j}
    dilation: int = 1
    b: np.ndarray | None = None

    def __post_init__(self):
        if self.f.ndim != 3 or self.f.shape[0] < 1:
            raise ShapeError("filter bank must be [k, d_in, d_out] with k >= 1")
        if int(self.dilation) < 1:
            raise ConfigError("dilation must be >= 1")

    @property
    def k(self) -> int:
        return self.f.shape[0]

    @classmethod
    def init(cls, rng, k, d_in, d_out, dilation=1, bias=True, dtype=np.float32):
        f = uniform_init(rng, (k, d_in, d_out), k * d_in, dtype)
        b = np.zeros(d_out, dtype=dtype) if bias else None
        return cls(f, dilation, b)


def conv_forward(x, f, b, dilation: int):
    N, T, c_in = x.shape
    k = f.shape[0]
    if f.shape[1] != c_in:
        raise ShapeError(f"conv expects {f.shape[1]} input channels, got {c_in}")
    pad = (k - 1) * dilation
    xp = np.concatenate([np.zeros((N, pad, c_in), dtype=x.dtype), x], axis=1) if pad else x
    cols = np.concatenate([xp[:, pad - dilation * j : pad - dilation * j + T] for j in range(k)], axis=2)
    out = mm(cols, f.reshape(k * c_in, -1))
    if b is not None:
        out = out + b
    return out, (cols, f, b, dilation, x.shape)


def conv_backward(d_out, cache):
    cols, f, b, dilation, shape = cache
    N, T, c_in = shape
    k = f.shape[0]
    df = mm_t(cols, d_out).reshape(f.shape)
    dcols = mm(d_out, f.reshape(k * c_in, -1).T)
    pad = (k - 1) * dilation
    dxp = np.zeros((N, T + pad, c_in), dtype=d_out.dtype)
    for j in range(k):
        lo = pad - dilation * j
        dxp[:, lo : lo + T] += dcols[:, :, j * c_in : (j + 1) * c_in]
    db = d_out.sum(axis=(0, 1)) if b is not None else None
    return dxp[:, pad:], df, db


def causal_dilated_conv(x_seq, bank: ConvFilterBank):
    """out_t = sum_j f_j^T x_{t - dilation*j}, reading x at t <= 0 as zero."""
    x = np.asarray(x_seq)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.shape[1] == 0:
        raise EmptySequenceError("causal_dilated_conv: empty sequence")
    out, _ = conv_forward(x, bank.f, bank.b, int(bank.dilation))
    return out[0] if single else out


# ---------------------------------------------------------------------------
# Masked per-timestep batch normalisation


@dataclass
class BatchNormStats:
    mean: np.ndarray  # [T_stats, C]
    var: np.ndarray  # [T_stats, C]
    momentum: float = 0.9
    eps: float = 1e-5

    @classmethod
    def init(cls, n_steps: int, channels: int, dtype=np.float32, momentum=0.9, eps=1e-5):
        return cls(np.zeros((n_steps, channels), dtype), np.ones((n_steps, channels), dtype), momentum, eps)


def _bn_groups(T: int, n_steps: int):
    """Statistics row per timestep and the one-hot [T, G] map onto rows."""
    g = np.minimum(np.arange(T), n_steps - 1)
    G = int(g.max()) + 1 if T else 0
    onehot = np.zeros((T, G))
    onehot[np.arange(T), g] = 1.0
    return g, onehot


def _update_running(stats: BatchNormStats, mean_g, var_g, has):
    mom = stats.momentum
    for gi in np.nonzero(has)[0]:
        stats.mean[gi] = mom * stats.mean[gi] + (1 - mom) * mean_g[gi]
        stats.var[gi] = mom * stats.var[gi] + (1 - mom) * var_g[gi]


def masked_temporal_batchnorm(x, mask, gamma, beta, stats: BatchNormStats, train: bool):
    """Batch norm with separate statistics per timestep, ignoring padded rows.

    ``x`` [B, T, C], ``mask`` [B, T]. Timesteps at or past the last row of
    ``stats`` are pooled into that row, in training and in inference. In
    training mode a row without valid entries keeps its running statistics
    and is normalised with them. Padded positions come out as zeros.
    Returns (y, cache).
    """
    B, T, C = x.shape
    dt = x.dtype
    m = np.asarray(mask, dtype=dt)[:, :, None]
    g, A = _bn_groups(T, stats.mean.shape[0])
    G = A.shape[1]
    if train:
        n_g = A.T @ m.sum(axis=0)  # [G, 1]
        has = n_g[:, 0] > 0
        safe_n = np.maximum(n_g, 1)
        mean_g = (A.T @ (x * m).sum(axis=0)) / safe_n
        var_g = (A.T @ (((x - mean_g[g]) ** 2) * m).sum(axis=0)) / safe_n
        mean_g = np.where(has[:, None], mean_g, stats.mean[:G]).astype(dt)
        var_g = np.where(has[:, None], var_g, stats.var[:G]).astype(dt)
        _update_running(stats, mean_g, var_g, has)
        mean, var = mean_g[g], var_g[g]
        aux = (A, n_g, has, g)
    else:
        mean, var = stats.mean[g], stats.var[g]
        aux = None
    inv_std = (1.0 / np.sqrt(var + stats.eps)).astype(dt)
    xhat = (x - mean) * inv_std * m
    y = (xhat * gamma + beta) * m
    return y, (xhat, inv_std, m, aux, gamma)


def masked_temporal_batchnorm_backward(dy, cache):
    """Returns (dx, dgamma, dbeta)."""
    xhat, inv_std, m, aux, gamma = cache
    dy = dy * m
    dgamma = (dy * xhat).sum(axis=(0, 1))
    dbeta = dy.sum(axis=(0, 1))
    dxhat = dy * gamma
    dx = dxhat * inv_std
    if aux is not None and aux[2].any():
        # batch-statistics correction, only where this batch supplied the stats
        A, n_g, has, g = aux
        safe_n = np.maximum(n_g, 1)
        s1 = (A.T @ dxhat.sum(axis=0)) / safe_n
        s2 = (A.T @ (dxhat * xhat).sum(axis=0)) / safe_n
        corr = inv_std * (dxhat - s1[g] - xhat * s2[g])
        dx = np.where(has[g][None, :, None], corr, dx) * m
    return dx.astype(xhat.dtype), dgamma, dbeta


# ---------------------------------------------------------------------------
# Residual block: relu(conv2(relu(conv1(x)))) + projection(x)


@dataclass
class ResidualParams:
    conv1: ConvFilterBank
    conv2: ConvFilterBank
    proj: np.ndarray | None = None  # [d_in, d_out] 1x1 conv, None means identity
    bn1: tuple | None = None  # (gamma, beta, BatchNormStats)
    bn2: tuple | None = None

    def __post_init__(self):
        if self.conv1.dilation != self.conv2.dilation:
            raise ConfigError("both convolutions in a residual block share one dilation")


def residual_block_forward(x, p: ResidualParams, mask=None, train=False, dropout=0.0, rng=None):
    cache = {}
    dil = int(p.conv1.dilation)
    a1, cache["c1"] = conv_forward(x, p.conv1.f, p.conv1.b, dil)
    if p.bn1 is not None:
        a1, cache["bn1"] = masked_temporal_batchnorm(a1, _ones_mask(x, mask), p.bn1[0], p.bn1[1], p.bn1[2], train)
    h1 = np.maximum(a1, 0)
    cache["r1"] = a1 > 0
    if train and dropout > 0:
        cache["d1"] = dropout_mask(rng, h1.shape, dropout, h1.dtype)
        h1 = h1 * cache["d1"]
    a2, cache["c2"] = conv_forward(h1, p.conv2.f, p.conv2.b, dil)
    if p.bn2 is not None:
        a2, cache["bn2"] = masked_temporal_batchnorm(a2, _ones_mask(x, mask), p.bn2[0], p.bn2[1], p.bn2[2], train)
    h2 = np.maximum(a2, 0)
    cache["r2"] = a2 > 0
    if train and dropout > 0:
        cache["d2"] = dropout_mask(rng, h2.shape, dropout, h2.dtype)
        h2 = h2 * cache["d2"]
    skip = x if p.proj is None else mm(x, p.proj)
    cache["x"] = x
    cache["p"] = p
    return h2 + skip, cache


def _ones_mask(x, mask):
    return np.ones(x.shape[:2], dtype=x.dtype) if mask is None else mask


def residual_block_backward(d_out, cache):
    """Returns (dx, grads) with grads keyed conv1.f, conv1.b, conv2.*, proj, bn*."""
    p: ResidualParams = cache["p"]
    grads = {}
    d = d_out
    if "d2" in cache:
        d = d * cache["d2"]
    d = d * cache["r2"]
    if "bn2" in cache:
        d, grads["bn2.gamma"], grads["bn2.beta"] = masked_temporal_batchnorm_backward(d, cache["bn2"])
    d, grads["conv2.f"], db2 = conv_backward(d, cache["c2"])
    if db2 is not None:
        grads["conv2.b"] = db2
    if "d1" in cache:
        d = d * cache["d1"]
    d = d * cache["r1"]
    if "bn1" in cache:
        d, grads["bn1.gamma"], grads["bn1.beta"] = masked_temporal_batchnorm_backward(d, cache["bn1"])
    dx, grads["conv1.f"], db1 = conv_backward(d, cache["c1"])
    if db1 is not None:
        grads["conv1.b"] = db1
    if p.proj is None:
        dx = dx + d_out
    else:
        grads["proj"] = mm_t(cache["x"], d_out)
        dx = dx + mm(d_out, p.proj.T)
    return dx, grads


def residual_block(x_seq, banks, proj=None):
    """Convenience wrapper: ``banks`` is (conv1, conv2)."""
    x = np.asarray(x_seq)
    single = x.ndim == 2
    if single:
        x = x[None]
    out, _ = residual_block_forward(x, ResidualParams(banks[0], banks[1], proj))
    return out[0] if single else out


def dilation_schedule(n_blocks: int, k: int = 5, rule: str = "pow2") -> list[int]:
    """``pow2`` gives 1, 2, 4, ...; ``kminus1`` gives (k-1)**(r-1)."""
    if rule == "pow2":
        return [2**r for r in range(n_blocks)]
    if rule == "kminus1":
        return [max(k - 1, 1) ** r for r in range(n_blocks)]
    raise ConfigError(f"unknown dilation rule {rule!r}")


def receptive_field(k: int, dilations) -> int:
    """Trailing steps (including the current one) seen by a stack of residual blocks."""
    return 1 + 2 * (k - 1) * int(sum(dilations))


# ---------------------------------------------------------------------------
# MLP head


@dataclass
class MlpHeadParams:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray

    def __post_init__(self):
        if self.W1.shape[1] != self.W2.shape[0]:
            raise ShapeError("MLP head inner dimensions disagree")

    @classmethod
    def init(cls, rng, d_in, hidden, d_out, dtype=np.float32):
        return cls(
            uniform_init(rng, (d_in, hidden), d_in, dtype),
            np.zeros(hidden, dtype),
            uniform_init(rng, (hidden, d_out), hidden, dtype),
            np.zeros(d_out, dtype),
        )


def mlp_head_forward(s, p: MlpHeadParams):
    if s.shape[-1] != p.W1.shape[0]:
        raise ShapeError(f"MLP head expects {p.W1.shape[0]} features, got {s.shape[-1]}")
    a = mm(s, p.W1) + p.b1
    h = np.maximum(a, 0)
    return mm(h, p.W2) + p.b2, (s, h, p)


def mlp_head_backward(du, cache):
    s, h, p = cache
    grads = {"W2": mm_t(h, du), "b2": du.reshape(-1, du.shape[-1]).sum(0)}
    dh = mm(du, p.W2.T) * (h > 0)
    grads["W1"] = mm_t(s, dh)
    grads["b1"] = dh.reshape(-1, dh.shape[-1]).sum(0)
    return mm(dh, p.W1.T), grads


def mlp_head(s, p: MlpHeadParams):
    """u = W2 ReLU(W1 s + b1) + b2."""
    return mlp_head_forward(np.asarray(s), p)[0]


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam, updating ``params`` in place.

    Raises :class:`NonFiniteGradientError` without touching anything if a
    gradient holds NaN or Inf.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient for {name!r}")
    state.t += 1
    c1 = 1.0 - beta1**state.t
    c2 = 1.0 - beta2**state.t
    for name, g in grads.items():
        p = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)
    return params, state


# ---------------------------------------------------------------------------
# Finite differences


def finite_difference_check(fn, inputs: dict, analytic: dict, eps: float = 1e-5,
                            max_coords: int | None = None, rng=None, floor: float = 1e-6) -> float:
    """Max relative error between ``analytic`` grads and central differences.

    ``fn`` maps the ``inputs`` dict to a scalar. Coordinates are perturbed in
    place and restored. With ``max_coords`` each array is sampled at that many
    random coordinates. The error per coordinate is
    ``|a - n| / max(|a|, |n|, floor)``.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    worst = 0.0
    for name, arr in inputs.items():
        if name not in analytic:
            continue
        flat = arr.reshape(-1)
        ga = np.asarray(analytic[name]).reshape(-1)
        if ga.shape != flat.shape:
            raise ShapeError(f"gradient for {name!r} has shape {ga.shape}, want {flat.shape}")
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, max_coords, replace=False)
        for i in coords:
            old = flat[i]
            flat[i] = old + eps
            fp = fn(inputs)
            flat[i] = old - eps
            fm = fn(inputs)
            flat[i] = old
            num = (fp - fm) / (2 * eps)
            err = abs(ga[i] - num) / max(abs(ga[i]), abs(num), floor)
            worst = max(worst, float(err))
    return worst


# ---------------------------------------------------------------------------
# Packed sequences
#
# Causal layers only look backwards, so a batch of prefix-masked sequences
# can be stored as its valid rows alone ([P, C], sequence-major). Each tap of
# a dilated convolution becomes a row gather; reads before the start of a
# sequence hit an extra zero row at index P.


class PackedIndex:
    def __init__(self, mask):
        mask = np.asarray(mask) > 0
        self.shape = mask.shape
        self.valid = mask
        lengths = mask.sum(axis=1)
        if np.any(mask != (np.arange(mask.shape[1])[None, :] < lengths[:, None])):
            raise ShapeError("packed sequences need prefix masks")
        self.lengths = lengths
        self.P = int(lengths.sum())
        self.tpos = np.nonzero(mask)[1].astype(np.int64)
        self._tables = {}

    def gather(self, k: int, dilation: int) -> np.ndarray:
        key = (k, dilation)
        if key not in self._tables:
            p = np.arange(self.P, dtype=np.int64)
            lag = dilation * np.arange(k, dtype=np.int64)
            src = p[:, None] - lag[None, :]
            src[self.tpos[:, None] < lag[None, :]] = self.P
            self._tables[key] = src
        return self._tables[key]

    def pack(self, x):
        return x[self.valid]

    def unpack(self, xp):
        out = np.zeros(self.shape + xp.shape[1:], dtype=xp.dtype)
        out[self.valid] = xp
        return out


def conv_packed_forward(x, f, b, idx: PackedIndex, dilation: int):
    P, c_in = x.shape
    k = f.shape[0]
    if f.shape[1] != c_in:
        raise ShapeError(f"conv expects {f.shape[1]} input channels, got {c_in}")
    g = idx.gather(k, dilation)
    xz = np.concatenate([x, np.zeros((1, c_in), dtype=x.dtype)])
    cols = xz[g].reshape(P, k * c_in)
    out = mm(cols, f.reshape(k * c_in, -1))
    if b is not None:
        out = out + b
    return out, (cols, f, b, g, x.shape)


def conv_packed_backward(d_out, cache):
    cols, f, b, g, shape = cache
    P, c_in = shape
    k = f.shape[0]
    df = (cols.T @ d_out).reshape(f.shape)
    dcols = mm(d_out, f.reshape(k * c_in, -1).T).reshape(P, k, c_in)
    dxz = np.zeros((P + 1, c_in), dtype=d_out.dtype)
    for j in range(k):
        # rows of one tap are distinct apart from the shared zero row
        dxz[g[:, j]] += dcols[:, j]
    db = d_out.sum(axis=0) if b is not None else None
    return dxz[:P], df, db


def packed_batchnorm(x, idx: PackedIndex, gamma, beta, stats: BatchNormStats, train: bool):
    """Packed form of :func:`masked_temporal_batchnorm`."""
    P, C = x.shape
    dt = x.dtype
    K = stats.mean.shape[0]
    grp = np.minimum(idx.tpos, K - 1)
    if train and P:
        G = int(grp.max()) + 1
        onehot = np.zeros((G, P), dtype=dt)
        onehot[grp, np.arange(P)] = 1
        n = onehot.sum(axis=1)[:, None]
        safe_n = np.maximum(n, 1)
        mean_g = (onehot @ x) / safe_n
        var_g = (onehot @ (x - mean_g[grp]) ** 2) / safe_n
        has = n[:, 0] > 0
        mean_g = np.where(has[:, None], mean_g, stats.mean[:G]).astype(dt)
        var_g = np.where(has[:, None], var_g, stats.var[:G]).astype(dt)
        _update_running(stats, mean_g, var_g, has)
        mean, var = mean_g[grp], var_g[grp]
        extra = (onehot, n, grp)
    else:
        mean, var = stats.mean[grp], stats.var[grp]
        extra = None
    inv_std = (1.0 / np.sqrt(var + stats.eps)).astype(dt)
    xhat = (x - mean) * inv_std
    return xhat * gamma + beta, (xhat, inv_std, extra, gamma)


def packed_batchnorm_backward(dy, cache):
    xhat, inv_std, extra, gamma = cache
    dgamma = (dy * xhat).sum(axis=0)
    dbeta = dy.sum(axis=0)
    dxhat = dy * gamma
    if extra is None:
        return dxhat * inv_std, dgamma, dbeta
    onehot, n, grp = extra
    safe_n = np.maximum(n, 1)
    s1 = (onehot @ dxhat) / safe_n
    s2 = (onehot @ (dxhat * xhat)) / safe_n
    dx = inv_std * (dxhat - s1[grp] - xhat * s2[grp])
    return dx, dgamma, dbeta


def residual_block_packed_forward(x, p: ResidualParams, idx: PackedIndex, train=False, dropout=0.0, rng=None):
    """:func:`residual_block_forward` on packed rows [P, C]."""
    cache = {}
    dil = int(p.conv1.dilation)
    a1, cache["c1"] = conv_packed_forward(x, p.conv1.f, p.conv1.b, idx, dil)
    if p.bn1 is not None:
        a1, cache["bn1"] = packed_batchnorm(a1, idx, p.bn1[0], p.bn1[1], p.bn1[2], train)
    h1 = np.maximum(a1, 0)
    cache["r1"] = a1 > 0
    if train and dropout > 0:
        cache["d1"] = dropout_mask(rng, h1.shape, dropout, h1.dtype)
        h1 = h1 * cache["d1"]
    a2, cache["c2"] = conv_packed_forward(h1, p.conv2.f, p.conv2.b, idx, dil)
    if p.bn2 is not None:
        a2, cache["bn2"] = packed_batchnorm(a2, idx, p.bn2[0], p.bn2[1], p.bn2[2], train)
    h2 = np.maximum(a2, 0)
    cache["r2"] = a2 > 0
    if train and dropout > 0:
        cache["d2"] = dropout_mask(rng, h2.shape, dropout, h2.dtype)
        h2 = h2 * cache["d2"]
    skip = x if p.proj is None else mm(x, p.proj)
    cache["x"] = x
    cache["p"] = p
    return h2 + skip, cache


def residual_block_packed_backward(d_out, cache):
    p: ResidualParams = cache["p"]
    grads = {}
    d = d_out
    if "d2" in cache:
        d = d * cache["d2"]
    d = d * cache["r2"]
    if "bn2" in cache:
        d, grads["bn2.gamma"], grads["bn2.beta"] = packed_batchnorm_backward(d, cache["bn2"])
    d, grads["conv2.f"], db2 = conv_packed_backward(d, cache["c2"])
    if db2 is not None:
        grads["conv2.b"] = db2
    if "d1" in cache:
        d = d * cache["d1"]
    d = d * cache["r1"]
    if "bn1" in cache:
        d, grads["bn1.gamma"], grads["bn1.beta"] = packed_batchnorm_backward(d, cache["bn1"])
    dx, grads["conv1.f"], db1 = conv_packed_backward(d, cache["c1"])
    if db1 is not None:
        grads["conv1.b"] = db1
    if p.proj is None:
        dx = dx + d_out
    else:
        grads["proj"] = mm_t(cache["x"], d_out)
        dx = dx + mm(d_out, p.proj.T)
    return dx, grads
