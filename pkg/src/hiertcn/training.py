"""Training loop, data splits and run manifests."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .batching import FlatBatcher, InputCounter, NegativeSampler, QueueBatcher
from .checkpoint import canonical_json, load_checkpoint, save_checkpoint
from .evaluation import ModelScorer, PoolStrategy, evaluate
from .models import Model, ModelConfig
from .objectives import ObjectiveConfig, objective_loss
from .primitives import AdamState, ConfigError, NonFiniteGradientError, adam_step

log = logging.getLogger(__name__)


class NumericError(FloatingPointError):
    """Training produced a non-finite loss or gradient."""


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 32
    max_epochs: int = 20
    patience: int = 3
    min_rel_improvement: float = 1e-4
    val_fraction: float = 0.1
    test_fraction: float = 0.1
    warm_train_fraction: float = 2.0 / 3.0  # share of the time span used before the test period
    mode: str = "cold"  # cold: user-disjoint split, warm: time split
    max_unroll_sessions: int = 4
    max_session_length: int = 256
    clip_norm: float | None = None
    seed: int = 0

    def validate(self) -> "TrainConfig":
        self.model.validate()
        self.objective.validate()
        for name in ("val_fraction", "test_fraction", "warm_train_fraction"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ConfigError(f"{name} must be in (0, 1), got {v}")
        if self.val_fraction + self.test_fraction >= 1.0:
            raise ConfigError("validation and test fractions leave no training users")
        if self.patience < 1 or self.max_epochs < 1 or self.batch_size < 1 or self.max_unroll_sessions < 1:
            raise ConfigError("patience, max_epochs, batch_size and max_unroll_sessions must be >= 1")
        if self.lr <= 0:
            raise ConfigError("learning rate must be positive")
        if self.mode not in ("cold", "warm"):
            raise ConfigError(f"mode must be cold or warm, got {self.mode!r}")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        d["objective"] = self.objective.to_dict()
        return d

    def to_json(self) -> str:
        return canonical_json(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown train config keys: {sorted(extra)}")
        try:
            model = ModelConfig.from_dict(d.pop("model", {}))
            obj = d.pop("objective", {})
            okeys = {f.name for f in fields(ObjectiveConfig)}
            if set(obj) - okeys:
                raise ConfigError(f"unknown objective keys: {sorted(set(obj) - okeys)}")
            return cls(model=model, objective=ObjectiveConfig(**obj), **d).validate()
        except TypeError as e:
            raise ConfigError(str(e)) from e

    @classmethod
    def from_json(cls, text: str) -> "TrainConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}") from e
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(d)

    def fingerprint(self) -> str:
        # the epoch budget is left out so a run can be resumed with a larger one
        d = self.to_dict()
        d.pop("max_epochs")
        return hashlib.sha256(canonical_json(d).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# splits


@dataclass
class Split:
    train: list
    val: list
    test: list
    val_from: list | None = None  # first scored event per validation user (warm mode)
    test_from: list | None = None
    mode: str = "cold"


def cold_split(users, val_fraction=0.1, test_fraction=0.1, seed=0) -> Split:
    """User-disjoint split: train / validation / test users."""
    users = list(users)
    order = np.random.default_rng(seed).permutation(len(users))
    n_test = int(round(test_fraction * len(users)))
    n_val = int(round(val_fraction * len(users)))
    test = [users[i] for i in order[:n_test]]
    val = [users[i] for i in order[n_test : n_test + n_val]]
    train = [users[i] for i in order[n_test + n_val :]]
    ids = [set(u.user_id for u in part) for part in (train, val, test)]
    assert not (ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2]), "cold split overlaps"
    return Split(train, val, test, mode="cold")


def warm_split(users, train_fraction=2.0 / 3.0, val_fraction=0.1) -> Split:
    """Time split over the same users.

    Events before ``c_val`` train the model, ``[c_val, c_test)`` validates and
    events from ``c_test`` on are tested. Later periods see the earlier
    events as context.
    """
    users = list(users)
    t0 = min(float(u.timestamps[0]) for u in users if len(u))
    t1 = max(float(u.timestamps[-1]) for u in users if len(u))
    c_test = t0 + train_fraction * (t1 - t0)
    c_val = t0 + train_fraction * (1.0 - val_fraction) * (t1 - t0)
    train, val, val_from, test, test_from = [], [], [], [], []
    for u in users:
        i_val = int(np.searchsorted(u.timestamps, c_val, side="left"))
        i_test = int(np.searchsorted(u.timestamps, c_test, side="left"))
        if i_val > 0:
            train.append(u.slice_events(0, i_val))
        if i_test > i_val:
            val.append(u.slice_events(0, i_test))
            val_from.append(i_val)
        if len(u) > i_test:
            test.append(u)
            test_from.append(i_test)
    if train and test:
        last_train = max(float(u.timestamps[-1]) for u in train)
        first_test = min(float(u.timestamps[i]) for u, i in zip(test, test_from))
        assert last_train < first_test, "warm split overlaps in time"
    return Split(train, val, test, val_from, test_from, mode="warm")


def make_split(cfg: TrainConfig, users) -> Split:
    if cfg.mode == "warm":
        return warm_split(users, cfg.warm_train_fraction, cfg.val_fraction)
    return cold_split(users, cfg.val_fraction, cfg.test_fraction, cfg.seed)


# ---------------------------------------------------------------------------
# epochs


def make_batcher(cfg: TrainConfig, users, table, rng, order=None, counter=None, negatives=True):
    sampler = None
    if negatives and cfg.objective.kind in ("NCE", "BPR", "Hinge"):
        sampler = NegativeSampler(table.ids, cfg.objective.negatives, cfg.objective.negative_source)
    dt = cfg.model.np_dtype
    if cfg.model.hierarchical:
        return QueueBatcher(users, table, cfg.batch_size, cfg.max_unroll_sessions, cfg.max_session_length,
                            sampler, rng, dt, counter, order)
    return FlatBatcher(users, table, cfg.batch_size, sampler, rng, dt, counter, order)


def batch_loss(cfg: TrainConfig, model: Model, batch, u, table, catalog=None, weights=None):
    """Objective over the valid events of ``batch``; the ``u`` gradient comes back padded."""
    valid = batch.mask > 0
    target = table.rows(batch.item_ids[valid]) if cfg.objective.kind == "CrossEntropy" else None
    loss, g = objective_loss(cfg.objective, u[valid], batch.items[valid], batch.negatives, batch.neg_mask,
                             weights, catalog, target)
    du = np.zeros_like(u)
    du[valid] = g["u"]
    return loss, du


def _clip(grads: dict, max_norm: float | None) -> float:
    norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if max_norm is not None and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for k in grads:
            grads[k] = grads[k] * scale
    return norm


def train_step(cfg: TrainConfig, model: Model, adam: AdamState, batch, state, rng, table, catalog=None):
    """One optimiser step. Returns (loss, new carried state)."""
    u, new_state, cache = model.forward(batch, state, train=True, rng=rng)
    loss, du = batch_loss(cfg, model, batch, u, table, catalog)
    if not math.isfinite(loss):
        raise NumericError(f"non-finite training loss {loss}")
    grads = model.backward(du, cache)
    _clip(grads, cfg.clip_norm)
    try:
        adam_step(model.params, grads, adam, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    except NonFiniteGradientError as e:
        raise NumericError(str(e)) from e
    return loss, new_state


def run_epoch(cfg: TrainConfig, model: Model, adam: AdamState, users, table, epoch: int,
              counter: InputCounter | None = None, max_steps: int | None = None) -> dict:
    rng = np.random.default_rng([cfg.seed, epoch])
    order = rng.permutation(len(users))
    batcher = make_batcher(cfg, users, table, rng, order, counter)
    catalog = table.matrix(cfg.model.np_dtype) if cfg.objective.kind == "CrossEntropy" else None
    state = None
    total, weight, steps = 0.0, 0.0, 0
    t0 = time.perf_counter()
    for batch in batcher:
        loss, state = train_step(cfg, model, adam, batch, state, rng, table, catalog)
        n = float(batch.mask.sum())
        total += loss * n
        weight += n
        steps += 1
        if max_steps is not None and steps >= max_steps:
            break
    return {"epoch": epoch, "train_loss": total / max(weight, 1.0), "steps": steps,
            "seconds": time.perf_counter() - t0}


def validation_loss(cfg: TrainConfig, model: Model, users, table, score_from=None) -> float:
    """Objective on held-out users with fixed negatives (eval mode)."""
    if not users:
        return float("nan")
    rng = np.random.default_rng([cfg.seed, 1 << 20])
    batcher = make_batcher(cfg, users, table, rng)
    catalog = table.matrix(cfg.model.np_dtype) if cfg.objective.kind == "CrossEntropy" else None
    state = None
    total, weight = 0.0, 0.0
    for batch in batcher:
        u, state, _ = model.forward(batch, state, train=False)
        w = None
        if score_from is not None:
            start = np.asarray(score_from)[batch.user_index]
            start = start[..., None] if batch.mask.ndim == 3 else start[:, None]
            w = (batch.event_index >= start)[batch.mask > 0].astype(u.dtype)
        n = float(batch.mask.sum()) if w is None else float(w.sum())
        if n == 0:
            continue
        loss, _ = batch_loss(cfg, model, batch, u, table, catalog, w)
        total += loss * n
        weight += n
    return total / max(weight, 1.0)


# ---------------------------------------------------------------------------
# full runs


@dataclass
class RunManifest:
    config_hash: str
    dataset_hash: str
    mode: str
    checkpoints: dict = field(default_factory=dict)
    epochs: list = field(default_factory=list)
    best_epoch: int = -1
    best_val_loss: float | None = None
    stopped_early: bool = False
    report: dict | None = None
    n_params: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)


@dataclass
class TrainResult:
    model: Model
    manifest: RunManifest
    split: Split


def _improved(new: float, best: float | None, rel: float) -> bool:
    if best is None:
        return True
    return new < best - rel * abs(best)


def train(cfg: TrainConfig, dataset, out_dir=None, resume=None, evaluate_test: bool = True,
          pool: PoolStrategy | None = None, max_steps_per_epoch: int | None = None) -> TrainResult:
    """Train with early stopping on the validation objective.

    With ``out_dir`` the best model goes to ``best.ckpt`` and the resumable
    state (weights, optimiser, epoch counters) to ``last.ckpt`` after each
    epoch; ``resume`` continues from such a file.
    """
    cfg.validate()
    table = dataset.table
    split = make_split(cfg, dataset.users)
    if not split.train:
        raise ConfigError("training split is empty")
    manifest = RunManifest(cfg.fingerprint(), dataset.fingerprint(), cfg.mode)
    model = Model(cfg.model)
    adam = AdamState()
    best = None
    bad = 0
    start_epoch = 0
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    if resume is not None:
        model, adam, extra = load_checkpoint(resume)
        if extra.get("config_hash") != manifest.config_hash:
            raise ConfigError("checkpoint was written under a different training config")
        start_epoch = int(extra["epoch"]) + 1
        bad = int(extra["bad_epochs"])
        manifest.epochs = list(extra.get("epochs", []))
        manifest.best_epoch = int(extra["best_epoch"])
        manifest.best_val_loss = extra.get("best_val_loss")
        best_path = Path(resume).with_name("best.ckpt")
        best = load_checkpoint(best_path)[0] if best_path.exists() else model.copy()
    manifest.n_params = model.n_params()
    for epoch in range(start_epoch, cfg.max_epochs):
        stats = run_epoch(cfg, model, adam, split.train, table, epoch, max_steps=max_steps_per_epoch)
        stats["val_loss"] = validation_loss(cfg, model, split.val, table, split.val_from)
        if not math.isfinite(stats["train_loss"]):
            raise NumericError("non-finite training loss")
        manifest.epochs.append(stats)
        log.info("epoch %d train %.5f val %.5f (%.1fs)", epoch, stats["train_loss"], stats["val_loss"], stats["seconds"])
        val = stats["val_loss"]
        if not math.isfinite(val):
            log.warning("epoch %d: validation loss is not finite; not counted as an improvement", epoch)
        if math.isfinite(val) and _improved(val, manifest.best_val_loss, cfg.min_rel_improvement):
            manifest.best_val_loss = val
            manifest.best_epoch = epoch
            best = model.copy()
            bad = 0
            if out is not None:
                save_checkpoint(out / "best.ckpt", best, extra={"epoch": epoch, "config_hash": manifest.config_hash})
        else:
            bad += 1
        if out is not None:
            save_checkpoint(out / "last.ckpt", model, adam, extra={
                "epoch": epoch, "bad_epochs": bad, "best_epoch": manifest.best_epoch,
                "best_val_loss": manifest.best_val_loss, "epochs": manifest.epochs,
                "config_hash": manifest.config_hash,
            })
        if bad >= cfg.patience:
            manifest.stopped_early = True
            break
    model = best if best is not None else model
    if out is not None:
        manifest.checkpoints = {"best": str(out / "best.ckpt"), "last": str(out / "last.ckpt")}
    if evaluate_test and split.test:
        rep = evaluate(ModelScorer(model, max_unroll_sessions=cfg.max_unroll_sessions), split.test, table,
                       pool or PoolStrategy("impressions"), split.test_from, seed=cfg.seed, mode=cfg.mode)
        manifest.report = rep.to_dict()
    if out is not None:
        (out / "manifest.json").write_text(manifest.to_json())
    return TrainResult(model, manifest, split)
