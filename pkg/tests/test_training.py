import numpy as np
import pytest

from hiertcn.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from hiertcn.data import SyntheticConfig, generate_synthetic
from hiertcn.models import ModelConfig
from hiertcn.objectives import ObjectiveConfig
from hiertcn.primitives import AdamState, ConfigError
from hiertcn.training import (
    NumericError,
    TrainConfig,
    cold_split,
    make_batcher,
    run_epoch,
    train,
    train_step,
    warm_split,
)


@pytest.fixture(scope="module")
def ds():
    return generate_synthetic(SyntheticConfig(n_users=60, n_items=150, dim=8, seed=9)).dataset


def _cfg(arch="HierTCN", kind="Hinge", **kw):
    m = dict(architecture=arch, embedding_dim=8, tcn_blocks=2, tcn_channels=8, kernel_size=3, low_layers=1,
             low_hidden=8, high_layers=1, high_hidden=8, head_hidden=8, dtype="float64", seed=2)
    if arch == "HRNN":
        m.update(connection="Init", aggregation="LastHidden")
    return TrainConfig(model=ModelConfig(**m), objective=ObjectiveConfig(kind), batch_size=8, seed=2, **kw)


def test_cold_split_disjoint(ds):
    s = cold_split(ds.users, 0.1, 0.1, seed=0)
    ids = [{u.user_id for u in part} for part in (s.train, s.val, s.test)]
    assert sum(map(len, ids)) == len(ds.users)
    assert not (ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2])
    assert len(s.test) == 6 and len(s.val) == 6


def test_warm_split_time_disjoint(ds):
    s = warm_split(ds.users)
    last_train = max(u.timestamps[-1] for u in s.train)
    first_test = min(u.timestamps[i] for u, i in zip(s.test, s.test_from))
    assert last_train < first_test
    for u, i in zip(s.val, s.val_from):
        assert 0 <= i < len(u)


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(val_fraction=0.0).validate()
    with pytest.raises(ConfigError):
        TrainConfig(val_fraction=0.5, test_fraction=0.5).validate()
    with pytest.raises(ConfigError):
        TrainConfig(patience=0).validate()
    with pytest.raises(ConfigError):
        TrainConfig(mode="hot").validate()
    c = _cfg()
    assert TrainConfig.from_dict(c.to_dict()).to_json() == c.to_json()


@pytest.mark.parametrize("arch,kind", [("HierTCN", "Hinge"), ("HierGRU", "NCE"), ("HRNN", "BPR"), ("TCN", "L2"),
                                       ("GRU", "CrossEntropy")])
def test_training_reduces_loss(ds, arch, kind):
    cfg = _cfg(arch, kind, lr=5e-3)
    from hiertcn.models import Model

    model = Model(cfg.model)
    adam = AdamState()
    first = run_epoch(cfg, model, adam, ds.users, ds.table, 0)["train_loss"]
    for e in range(1, 4):
        last = run_epoch(cfg, model, adam, ds.users, ds.table, e)["train_loss"]
    assert np.isfinite(first) and last < first


def test_non_finite_step_raises(ds):
    cfg = _cfg()
    from hiertcn.models import Model

    model = Model(cfg.model)
    model.params[sorted(model.params)[0]][...] = np.nan
    batch = next(iter(make_batcher(cfg, ds.users, ds.table, np.random.default_rng(0))))
    with np.errstate(all="ignore"), pytest.raises(NumericError):
        train_step(cfg, model, AdamState(), batch, None, np.random.default_rng(0), ds.table)


def test_train_is_deterministic(ds):
    a = train(_cfg(max_epochs=2), ds, evaluate_test=False)
    b = train(_cfg(max_epochs=2), ds, evaluate_test=False)
    assert [e["train_loss"] for e in a.manifest.epochs] == [e["train_loss"] for e in b.manifest.epochs]
    for k in a.model.params:
        assert np.array_equal(a.model.params[k], b.model.params[k])


def test_checkpoint_round_trip(ds, tmp_path):
    res = train(_cfg(max_epochs=1), ds, evaluate_test=False)
    adam = AdamState()
    adam.t = 5
    path = save_checkpoint(tmp_path / "m.ckpt", res.model, adam, extra={"note": "x"})
    model, adam2, extra = load_checkpoint(path)
    assert extra["note"] == "x" and adam2.t == 5
    assert model.config.to_json() == res.model.config.to_json()
    for k in res.model.params:
        assert np.array_equal(model.params[k], res.model.params[k])
    raw = path.read_bytes()
    (tmp_path / "bad.ckpt").write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "bad.ckpt")
    (tmp_path / "cut.ckpt").write_bytes(raw[: len(raw) // 2])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "cut.ckpt")
