"""Training objectives over (user embedding, positive item, negative items).

Batched functions take ``u`` and ``pos`` shaped ``[..., d]``, ``neg`` shaped
``[..., M, d]`` with ``neg_mask`` ``[..., M]``, and an event ``mask``
``[...]``. They return the mean loss over valid events and the gradients
with respect to ``u``, ``pos`` and ``neg``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .primitives import ConfigError, ShapeError

KINDS = ("L2", "NCE", "BPR", "Hinge", "CrossEntropy")
DEFAULT_MARGIN = 0.5


@dataclass
class ObjectiveConfig:
    kind: str = "Hinge"
    margin: float = DEFAULT_MARGIN
    negatives: int = 10
    negative_source: str = "impressions"

    def validate(self) -> "ObjectiveConfig":
        if self.kind not in KINDS:
            raise ConfigError(f"unknown objective {self.kind!r}; choose from {KINDS}")
        if self.margin < 0:
            raise ConfigError("hinge margin must be >= 0")
        if self.negatives < 1:
            raise ConfigError("need at least one negative per positive")
        if self.negative_source not in ("impressions", "uniform"):
            raise ConfigError(f"unknown negative source {self.negative_source!r}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


def log_sigmoid(z):
    return -np.logaddexp(0.0, -z)


def _sig(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def score(u, x):
    """Unnormalised relevance ``u . x`` over the last axis."""
    return np.sum(np.asarray(u) * np.asarray(x), axis=-1)


def _prep(u, pos, neg=None, neg_mask=None, mask=None):
    u = np.asarray(u)
    pos = np.asarray(pos)
    if u.shape != pos.shape:
        raise ShapeError(f"u {u.shape} and positive {pos.shape} differ")
    lead = u.shape[:-1]
    mask = np.ones(lead, dtype=u.dtype) if mask is None else np.asarray(mask, dtype=u.dtype)
    if neg is not None:
        neg = np.asarray(neg)
        if neg.shape[:-2] != lead or neg.shape[-1] != u.shape[-1]:
            raise ShapeError(f"negatives {neg.shape} do not match u {u.shape}")
        if neg.shape[-2] < 1:
            raise ShapeError("at least one negative is required")
        neg_mask = np.ones(neg.shape[:-1], dtype=u.dtype) if neg_mask is None else np.asarray(neg_mask, dtype=u.dtype)
    n = max(float(mask.sum()), 1.0)
    return u, pos, neg, neg_mask, mask, n


def _finish(per_event, du_e, dpos_e, dneg_e, mask, n):
    w = (mask / n)[..., None]
    loss = float(np.sum(per_event * mask) / n)
    grads = {"u": du_e * w, "pos": dpos_e * w}
    if dneg_e is not None:
        grads["neg"] = dneg_e * w[..., None]
    return loss, grads


def l2_loss(u, pos, neg=None, neg_mask=None, mask=None):
    """Euclidean distance ``||pos - u||`` (not squared)."""
    u, pos, _, _, mask, n = _prep(u, pos, None, None, mask)
    diff = u - pos
    dist = np.sqrt(np.sum(diff * diff, axis=-1))
    safe = np.where(dist > 0, dist, 1.0)[..., None]
    g = np.where(dist[..., None] > 0, diff / safe, 0.0).astype(u.dtype)
    return _finish(dist, g, -g, None, mask, n)


def nce_loss(u, pos, neg, neg_mask=None, mask=None):
    u, pos, neg, nm, mask, n = _prep(u, pos, neg, neg_mask, mask)
    sp = score(u, pos)
    sn = np.einsum("...md,...d->...m", neg, u)
    per = -log_sigmoid(sp) - np.sum(log_sigmoid(-sn) * nm, axis=-1)
    a = -(1.0 - _sig(sp))  # d/d sp
    b = _sig(sn) * nm  # d/d sn
    du = a[..., None] * pos + np.einsum("...m,...md->...d", b, neg)
    return _finish(per, du, a[..., None] * u, b[..., None] * u[..., None, :], mask, n)


def bpr_loss(u, pos, neg, neg_mask=None, mask=None):
    u, pos, neg, nm, mask, n = _prep(u, pos, neg, neg_mask, mask)
    sp = score(u, pos)
    sn = np.einsum("...md,...d->...m", neg, u)
    diff = sp[..., None] - sn
    per = -np.sum(log_sigmoid(diff) * nm, axis=-1)
    c = -(1.0 - _sig(diff)) * nm  # d/d diff
    a = c.sum(axis=-1)
    du = a[..., None] * pos - np.einsum("...m,...md->...d", c, neg)
    return _finish(per, du, a[..., None] * u, -c[..., None] * u[..., None, :], mask, n)


def hinge_loss(u, pos, neg, neg_mask=None, mask=None, margin: float = DEFAULT_MARGIN):
    u, pos, neg, nm, mask, n = _prep(u, pos, neg, neg_mask, mask)
    sp = score(u, pos)
    sn = np.einsum("...md,...d->...m", neg, u)
    viol = margin + sn - sp[..., None]
    per = np.sum(np.maximum(viol, 0.0) * nm, axis=-1)
    act = ((viol > 0) * nm).astype(u.dtype)
    a = -act.sum(axis=-1)
    du = a[..., None] * pos + np.einsum("...m,...md->...d", act, neg)
    return _finish(per, du, a[..., None] * u, act[..., None] * u[..., None, :], mask, n)


def cross_entropy_loss(logits, target):
    """Softmax cross-entropy of ``logits`` [..., V] against integer ``target`` [...].

    Returns (per-event losses, d logits).
    """
    logits = np.asarray(logits)
    target = np.asarray(target)
    if target.shape != logits.shape[:-1]:
        raise ShapeError("one target index per row of logits is required")
    if np.any((target < 0) | (target >= logits.shape[-1])):
        raise ShapeError("target index outside the catalog")
    z = logits - logits.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    picked = np.take_along_axis(z, target[..., None], axis=-1)[..., 0]
    p = np.exp(z - lse[..., None])
    d = p.copy()
    np.put_along_axis(d, target[..., None], np.take_along_axis(d, target[..., None], -1) - 1.0, -1)
    return lse - picked, d


def catalog_cross_entropy(u, catalog, target, mask=None):
    """Cross-entropy with logits ``u @ catalog.T``. Returns (mean loss, {"u", "catalog"})."""
    u = np.asarray(u)
    catalog = np.asarray(catalog)
    if catalog.shape[-1] != u.shape[-1]:
        raise ShapeError("catalog dimension differs from u")
    mask = np.ones(u.shape[:-1], dtype=u.dtype) if mask is None else np.asarray(mask, dtype=u.dtype)
    n = max(float(mask.sum()), 1.0)
    safe_t = np.where(mask > 0, target, 0)
    per, dl = cross_entropy_loss(u @ catalog.T, safe_t)
    dl = dl * (mask / n)[..., None]
    loss = float(np.sum(per * mask) / n)
    return loss, {"u": (dl @ catalog).astype(u.dtype), "catalog": dl.reshape(-1, dl.shape[-1]).T @ u.reshape(-1, u.shape[-1])}


def objective_loss(cfg: ObjectiveConfig, u, pos, neg=None, neg_mask=None, mask=None,
                   catalog=None, target=None):
    """Dispatch on ``cfg.kind``; returns (mean loss, grads)."""
    kind = cfg.kind
    if kind == "L2":
        return l2_loss(u, pos, mask=mask)
    if kind == "CrossEntropy":
        if catalog is None or target is None:
            raise ConfigError("cross-entropy needs the catalog matrix and target rows")
        return catalog_cross_entropy(u, catalog, target, mask)
    if neg is None:
        raise ConfigError(f"{kind} needs negatives")
    if kind == "NCE":
        return nce_loss(u, pos, neg, neg_mask, mask)
    if kind == "BPR":
        return bpr_loss(u, pos, neg, neg_mask, mask)
    if kind == "Hinge":
        return hinge_loss(u, pos, neg, neg_mask, mask, cfg.margin)
    raise ConfigError(f"unknown objective {kind!r}")
