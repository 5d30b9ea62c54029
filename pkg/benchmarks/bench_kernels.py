"""Numba vs numpy timings for the accelerated kernels and one training epoch.

    python benchmarks/bench_kernels.py [--repeat 5] [--json out.json] [--no-epoch]

Each kernel is compiled (first call) before timing; reported numbers are the
best of ``--repeat`` runs in milliseconds.
"""

from __future__ import annotations

import argparse
import json
import time

import numpy as np

from hiertcn import _accel
from hiertcn.data import SyntheticConfig, generate_synthetic
from hiertcn.models import preset
from hiertcn.primitives import GruParams, gru_layer_backward, gru_layer_forward
from hiertcn.training import TrainConfig, run_epoch
from hiertcn.models import Model
from hiertcn.primitives import AdamState


def best_ms(fn, repeat):
    fn()
    out = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        out.append(time.perf_counter() - t)
    return 1e3 * min(out)


def kernels(rng):
    B, T, d, H = 32, 64, 48, 64
    x = rng.standard_normal((B, T, d)).astype(np.float32)
    p = GruParams.init(rng, d, H)
    mask = np.ones((B, T), np.float32)
    _, cache = gru_layer_forward(x, p, None, mask)
    d_out = rng.standard_normal((B, T, H)).astype(np.float32)

    n_seg, per = 2000, 10
    scores = rng.standard_normal(n_seg * per)
    offsets = np.arange(0, n_seg * per + 1, per)
    truth = rng.integers(0, per, n_seg)

    n_nodes, deg = 3000, 12
    indptr = np.arange(0, n_nodes * deg + 1, deg)
    indices = rng.integers(0, n_nodes, n_nodes * deg)
    vals = rng.standard_normal((n_nodes, 32))

    n_users, per_user = 500, 40
    uo = np.arange(0, n_users * per_user + 1, per_user)
    items = rng.integers(0, 5000, n_users * per_user)
    times = np.sort(rng.uniform(0, 1e5, (n_users, per_user)), axis=1).ravel()

    xw = rng.standard_normal((T, B, 3 * H)).astype(np.float32)
    u_gr, u_h = p.U[:, : 2 * H].copy(), p.U[:, 2 * H :].copy()
    s0 = np.zeros((B, H), np.float32)
    ones_tb = np.ones((T, B), np.float32)
    drop = np.ones((T, B, H), np.float32)
    return {
        "gru_forward recurrence (raw kernel)": lambda: _accel.gru_forward(xw, u_gr, u_h, s0, ones_tb, ones_tb, drop,
                                                                          force_numba=True),
        "gru_forward [32x64x48->64]": lambda: gru_layer_forward(x, p, None, mask),
        "gru_backward [32x64x64]": lambda: gru_layer_backward(d_out, None, cache),
        "ragged_ranks [2000x10]": lambda: _accel.ragged_ranks(scores, offsets, truth),
        "segment_mean [3000 nodes, deg 12]": lambda: _accel.segment_mean(vals, indptr, indices),
        "segment_mean_backward": lambda: _accel.segment_mean_backward(vals, indptr, indices, n_nodes),
        "window_pairs [500 users x 40]": lambda: _accel.window_pairs(uo, items, times, 600.0),
    }


def epoch_seconds(arch, ds):
    mc = preset(arch)
    cfg = TrainConfig(model=mc, seed=0)
    model = Model(mc)
    t = time.perf_counter()
    run_epoch(cfg, model, AdamState(), ds.users, ds.table, 0)
    return time.perf_counter() - t


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", help="also write results here")
    ap.add_argument("--no-epoch", action="store_true", help="skip the end-to-end epoch timings")
    args = ap.parse_args(argv)
    if not _accel.HAS_NUMBA:
        print("numba is not installed; only the numpy column is meaningful")
    rng = np.random.default_rng(0)
    rows = []
    for name, fn in kernels(rng).items():
        r = {"kernel": name}
        for b in ("numpy", "numba"):
            with _accel.use_backend(b):
                r[b] = best_ms(fn, args.repeat)
        rows.append(r)
    if not args.no_epoch:
        ds = generate_synthetic(SyntheticConfig(n_users=600, seed=0)).dataset
        for arch in ("HierTCN", "GRU"):
            r = {"kernel": f"epoch {arch} (600 users)"}
            for b in ("numpy", "numba"):
                with _accel.use_backend(b):
                    epoch_seconds(arch, ds)  # warm-up / compile
                    r[b] = 1e3 * min(epoch_seconds(arch, ds) for _ in range(2))
            rows.append(r)
    w = max(len(r["kernel"]) for r in rows)
    print(f"{'kernel':<{w}}  {'numpy ms':>10}  {'numba ms':>10}  {'speedup':>8}")
    for r in rows:
        print(f"{r['kernel']:<{w}}  {r['numpy']:>10.2f}  {r['numba']:>10.2f}  {r['numpy'] / r['numba']:>7.1f}x")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
