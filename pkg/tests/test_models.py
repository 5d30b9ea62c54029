import numpy as np
import pytest

from hiertcn.batching import FlatBatcher, QueueBatcher
from hiertcn.data import SessionizedHistory
from hiertcn.embeddings import EmbeddingTable
from hiertcn.models import (
    HighState,
    Model,
    ModelConfig,
    match_param_count,
    param_count,
    preset,
    rank_candidates,
    score,
    session_aggregate,
)
from hiertcn.primitives import ConfigError, EmptySequenceError, ShapeError, finite_difference_check

D = 4


def small(arch, **kw):
    base = dict(architecture=arch, embedding_dim=D, tcn_blocks=2, tcn_channels=5, kernel_size=3, low_layers=2,
                low_hidden=5, high_layers=2, high_hidden=5, head_hidden=6, dtype="float64", seed=1)
    if arch == "HRNN":
        base.update(connection="Init", aggregation="LastHidden")
    base.update(kw)
    return ModelConfig(**base)


def int_table(n=40, seed=0):
    # small integers keep sums and means exact
    rng = np.random.default_rng(seed)
    return EmbeddingTable.from_arrays(np.arange(1, n + 1), rng.integers(-3, 4, (n, D)).astype(np.float32))


def history(sessions, uid=1):
    ts, items, t = [], [], 0.0
    for sess in sessions:
        for it in sess:
            ts.append(t)
            items.append(it)
            t += 30
        t += 4000
    return SessionizedHistory.from_log(uid, items, ts)


def zero_params(model, prefix=""):
    for k, v in model.params.items():
        if k.startswith(prefix):
            v[:] = 0


ALL = ["TCN", "GRU", "HierGRU", "HierTCN", "HRNN"]
HIER = ["HierGRU", "HierTCN", "HRNN"]


# ---------------------------------------------------------------- aggregation and high state


def test_session_aggregate_examples():
    x = np.array([1.5, -2.0])
    np.testing.assert_array_equal(session_aggregate(x[None]), x)
    np.testing.assert_array_equal(session_aggregate(np.eye(2)), [0.5, 0.5])
    rng = np.random.default_rng(0)
    items = rng.integers(-5, 5, (6, 3)).astype(float)
    np.testing.assert_array_equal(session_aggregate(items), session_aggregate(items[rng.permutation(6)]))
    np.testing.assert_array_equal(session_aggregate(items, mask=[1, 1, 0, 0, 0, 0]), items[:2].mean(0))
    with pytest.raises(EmptySequenceError):
        session_aggregate(np.zeros((0, 3)))


def test_high_update_zero_params_halves():
    m = Model(small("HierTCN"))
    zero_params(m, "high.")
    s = HighState([np.full(5, 2.0), np.full(5, -4.0)], 3)
    new = m.high_update(s, np.ones(D))
    np.testing.assert_allclose(new.layers[0], np.full(5, 1.0))
    np.testing.assert_allclose(new.layers[1], np.full(5, -2.0))
    assert new.session_count == 4


def test_high_update_first_session_from_zero_and_deterministic():
    m = Model(small("HierTCN"))
    agg = np.arange(D, dtype=float)
    a = m.high_update(HighState.zeros(m.config), agg)
    b = m.high_update(HighState.zeros(m.config), agg)
    assert all(np.array_equal(x, y) for x, y in zip(a.layers, b.layers))
    assert m.user_state(history([]), int_table()).session_count == 0


# ---------------------------------------------------------------- low level


@pytest.mark.parametrize("arch", HIER)
def test_low_forward_zero_params(arch):
    m = Model(small(arch))
    zero_params(m, "low.")
    zero_params(m, "head.")
    u = m.low_forward(np.ones((3, D)), HighState([np.ones(5), np.ones(5)]))
    assert not u.any()


@pytest.mark.parametrize("arch", HIER)
def test_first_prediction_ignores_first_item(arch):
    m = Model(small(arch))
    rng = np.random.default_rng(0)
    high = HighState([rng.standard_normal(5), rng.standard_normal(5)])
    a = m.low_forward(rng.standard_normal((3, D)), high)
    b = m.low_forward(rng.standard_normal((3, D)), high)
    assert np.array_equal(a[0], b[0]) and not np.array_equal(a[1], b[1])
    np.testing.assert_array_equal(m.low_forward(np.zeros((0, D)), high)[0], a[0])


@pytest.mark.parametrize("low", ["HierTCN", "HierGRU"])
def test_full_vs_init_differ(low):
    rng = np.random.default_rng(3)
    high = HighState([rng.standard_normal(5), rng.standard_normal(5)])
    x = rng.standard_normal((3, D))
    full = Model(small(low, connection="Full")).low_forward(x, high)
    init = Model(small(low, connection="Init")).low_forward(x, high)
    assert not np.allclose(full, init)


# ---------------------------------------------------------------- forward_user


@pytest.mark.parametrize("arch", ALL)
def test_single_item_history(arch):
    m = Model(small(arch))
    u = m.forward_user(history([[5]]), int_table())
    assert u.shape == (1, D)
    if m.config.hierarchical:
        np.testing.assert_array_equal(u[0], m.low_forward(np.zeros((0, D)))[0])
    assert m.forward_user(history([]), int_table()).shape == (0, D)


@pytest.mark.parametrize("arch", ["HierTCN", "HierGRU"])
def test_previous_session_order_invariance(arch):
    m = Model(small(arch))
    t = int_table()
    a = m.forward_user(history([[3, 9, 4, 7], [1, 2, 5]]), t)
    b = m.forward_user(history([[7, 4, 3, 9], [1, 2, 5]]), t)
    np.testing.assert_array_equal(a[4:], b[4:])


def test_high_state_isolation_same_mean():
    # two different sessions with bit-identical means lead to identical next-session outputs
    ids = np.arange(1, 7)
    vec = np.array([[1, 0, 2, 0], [3, 2, 0, 0], [4, 0, 0, 0], [0, 2, 2, 0], [0, 1, 1, 1], [1, 1, 0, 1]], np.float32)
    t = EmbeddingTable.from_arrays(ids, vec)
    assert np.array_equal(vec[[0, 1]].mean(0), vec[[2, 3]].mean(0))
    m = Model(small("HierTCN"))
    a = m.forward_user(history([[1, 2], [5, 6]]), t)
    b = m.forward_user(history([[3, 4], [5, 6]]), t)
    np.testing.assert_array_equal(a[2:], b[2:])


def test_phi_zero_init_equals_independent_sessions():
    m = Model(small("HierTCN", connection="Init"))
    zero_params(m, "high.")
    t = int_table()
    h = history([[1, 2, 3], [4, 5], [6, 7, 8, 9]])
    u = m.forward_user(h, t)
    o = h.session_offsets
    for j in range(h.n_sessions):
        ref = m.low_forward(t.lookup(h.items[o[j] : o[j + 1]], np.float64))[:-1]
        np.testing.assert_array_equal(u[o[j] : o[j + 1]], ref)


@pytest.mark.parametrize("arch", ALL)
def test_session_causality(arch):
    m = Model(small(arch))
    t = int_table()
    base = [[1, 2, 3, 4], [5, 6, 7], [8, 9]]
    u = m.forward_user(history(base), t)
    flat = [i for s in base for i in s]
    for pos in range(len(flat)):
        changed = [list(s) for s in base]
        k = pos
        for s in changed:
            if k < len(s):
                s[k] = 30 + k
                break
            k -= len(s)
        u2 = m.forward_user(history(changed), t)
        np.testing.assert_array_equal(u2[: pos + 1], u[: pos + 1])


# ---------------------------------------------------------------- receptive field


@pytest.mark.parametrize("dil,lookback", [([1, 2], 12), ([1, 3], 16)])
def test_low_level_lookback_sweep(dil, lookback):
    cfg = small("HierTCN", dilations=dil)
    m = Model(cfg)
    for k in list(m.params):
        if k.endswith(".b") and k.startswith("low."):
            m.params[k][:] = 0.3
    rng = np.random.default_rng(0)
    n = 30
    x = rng.standard_normal((n, D))
    base = m.low_forward(x)[n]
    reach = []
    for lag in range(1, n + 1):
        y = x.copy()
        y[n - lag] += 1.0
        reach.append(not np.array_equal(m.low_forward(y)[n], base))
    assert max(l for l, r in zip(range(1, n + 1), reach) if r) == lookback + 1
    assert cfg.receptive_field() == lookback + 1


def test_preset_receptive_fields():
    assert preset("TCN").receptive_field() == 505
    assert preset("HierTCN").receptive_field() == 121
    assert preset("GRU").receptive_field() is None


# ---------------------------------------------------------------- scoring


def test_score_examples():
    assert score(np.zeros(3), np.array([1.0, 2.0, 3.0])) == 0
    assert score(np.array([1.0, 0]), np.array([0, 5.0])) == 0
    v = np.array([0.6, 0.8])
    assert abs(score(v, v) - 1) < 1e-15


def test_rank_candidates_examples():
    ids, _ = rank_candidates(np.ones(1), [7], np.array([[0.3]]))
    assert ids.tolist() == [7]
    ids, s = rank_candidates(np.ones(1), [1, 2, 3], np.array([[0.9], [0.1], [0.5]]), k=2)
    assert ids.tolist() == [1, 3]
    ids, _ = rank_candidates(np.ones(1), [9, 4, 6], np.array([[0.5], [0.5], [0.7]]))
    assert ids.tolist() == [6, 4, 9]
    ids, _ = rank_candidates(np.ones(1), [1, 2], np.array([[1.0], [2.0]]), k=10)
    assert ids.tolist() == [2, 1]
    with pytest.raises(ValueError):
        rank_candidates(np.ones(1), [], np.zeros((0, 1)))


# ---------------------------------------------------------------- batched paths


def _users():
    rng = np.random.default_rng(5)
    return [history([rng.integers(1, 41, rng.integers(1, 5)).tolist() for _ in range(rng.integers(1, 6))], uid=i)
            for i in range(9)]


@pytest.mark.parametrize("arch", ALL)
def test_batched_forward_matches_forward_user(arch):
    m = Model(small(arch))
    t = int_table()
    users = _users()
    ref = {u.user_id: m.forward_user(u, t) for u in users}
    got = {u.user_id: np.zeros((len(u), D)) for u in users}
    if m.config.hierarchical:
        state = None
        for bt in QueueBatcher(users, t, batch_size=3, max_unroll_sessions=2, dtype=np.float64):
            u, state, _ = m.forward(bt, state)
            v = bt.mask > 0
            uid = np.broadcast_to(bt.user_ids[..., None], bt.mask.shape)[v]
            for a, e, row in zip(uid, bt.event_index[v], u[v]):
                got[a][e] = row
    else:
        for bt in FlatBatcher(users, t, batch_size=4, dtype=np.float64):
            u, _, _ = m.forward(bt)
            for b, a in enumerate(bt.user_ids):
                got[a][: len(ref[a])] = u[b, : len(ref[a])]
    for k in ref:
        np.testing.assert_allclose(got[k], ref[k], atol=1e-12)


@pytest.mark.parametrize("arch", ["HierTCN", "HierGRU"])
def test_parallel_equals_sequential(arch):
    m = Model(small(arch))
    bt = next(iter(QueueBatcher(_users(), int_table(), batch_size=3, max_unroll_sessions=3, dtype=np.float64)))
    up, sp, _ = m.forward(bt, sequential=False)
    us, ss, _ = m.forward(bt, sequential=True)
    assert np.array_equal(up, us)
    assert all(np.array_equal(a, b) for a, b in zip(sp, ss))


@pytest.mark.parametrize("arch", ALL)
@pytest.mark.parametrize("sequential", [False, True])
def test_model_backward_fd(arch, sequential):
    if sequential and not Model(small(arch)).config.hierarchical:
        pytest.skip("single-level models have one path")
    if arch == "HRNN" and not sequential:
        pytest.skip("LastHidden aggregation runs session by session")
    m = Model(small(arch))
    # zero biases put start-token activations exactly on ReLU kinks
    for k, v in m.params.items():
        if k.endswith((".b", ".b1", ".b2")):
            v[:] = np.random.default_rng(len(k)).uniform(0.05, 0.3, v.shape)
    t = int_table()
    users = _users()[:5]
    if m.config.hierarchical:
        bt = next(iter(QueueBatcher(users, t, batch_size=2, max_unroll_sessions=3, dtype=np.float64)))
        rng = np.random.default_rng(1)
        state = [rng.standard_normal((2, 5)) * 0.5 for _ in range(2)]
        bt.reset[:, 0] = [0, 1]
        run = lambda: m.forward(bt, state, sequential=sequential)
    else:
        bt = next(iter(FlatBatcher(users, t, batch_size=3, dtype=np.float64)))
        run = lambda: m.forward(bt)
    w = np.random.default_rng(2).standard_normal(bt.items.shape)
    u, _, cache = run()
    grads = m.backward(w, cache)
    f = lambda _: float((run()[0] * w).sum())
    err = finite_difference_check(f, m.params, grads, max_coords=25, rng=np.random.default_rng(0))
    assert err < 1e-4


# ---------------------------------------------------------------- config


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(architecture="LSTM").validate()
    with pytest.raises(ConfigError):
        ModelConfig(connection="Half").validate()
    with pytest.raises(ConfigError):
        ModelConfig(architecture="HierTCN", aggregation="LastHidden").validate()
    with pytest.raises(ConfigError):
        ModelConfig(architecture="TCN", tcn_blocks=2, dilations=[1, 0]).validate()
    with pytest.raises(ConfigError):
        ModelConfig(architecture="HRNN", connection="Init", aggregation="LastHidden", low_hidden=8, high_hidden=9).validate()
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"architecture": "TCN", "width": 3})
    with pytest.raises(ShapeError):
        Model(small("TCN"), params={"head.W1": np.zeros((2, 2))})


def test_full_connection_input_width():
    c = small("HierTCN", connection="Full")
    assert c.low_in_dim == D + c.high_hidden
    assert small("TCN").low_in_dim == D + 1


def test_parameter_count_parity():
    target = param_count(preset("HierTCN"))
    for arch, knob in (("TCN", "tcn_channels"), ("GRU", "low_hidden")):
        cfg = match_param_count(preset(arch), target, knob)
        assert abs(param_count(cfg) - target) / target < 0.02
