"""``htcn`` command line: generate, embed, train, eval, recommend, serve.

Exit codes: 0 success, 2 configuration error, 3 numeric failure, 4 data error.
``HTCN_DATA_DIR`` is the default for ``--dataset`` (and for ``generate --out``).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, canonical_json, load_checkpoint
from .data import (
    EMBEDDINGS_FILE,
    DataError,
    SessionizedHistory,
    SyntheticConfig,
    generate_synthetic,
    load_dataset,
    read_interaction_log,
)
from .embeddings import EmbeddingFormatError, MissingItemError
from .evaluation import (
    MaxItemScorer,
    ModelScorer,
    MVScorer,
    OracleScorer,
    PoolStrategy,
    RandomScorer,
    evaluate,
)
from .models import rank_candidates
from .primitives import ConfigError, NonFiniteGradientError
from .training import NumericError, TrainConfig, make_split, train

log = logging.getLogger("hiertcn")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_DATA = 0, 2, 3, 4


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _read_json(path, what: str) -> dict:
    try:
        d = json.loads(Path(path).read_text())
    except OSError as e:
        raise CliError(EXIT_CONFIG, f"cannot read {what} {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise CliError(EXIT_CONFIG, f"{what} {path} is not valid JSON: {e}") from e
    if not isinstance(d, dict):
        raise CliError(EXIT_CONFIG, f"{what} {path} must hold a JSON object")
    return d


def _dataset_dir(args) -> Path:
    d = args.dataset or os.environ.get("HTCN_DATA_DIR")
    if not d:
        raise CliError(EXIT_CONFIG, "no dataset given: pass --dataset or set HTCN_DATA_DIR")
    return Path(d)


def _load_dataset(args, need_table=True):
    ds = load_dataset(_dataset_dir(args))
    if need_table and ds.table is None:
        raise CliError(EXIT_DATA, f"{_dataset_dir(args)} has no {EMBEDDINGS_FILE}; run `htcn embed` first")
    return ds


def _train_config(args) -> TrainConfig:
    cfg = TrainConfig.from_dict(_read_json(args.config, "train config")) if args.config else TrainConfig()
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.model.seed = args.seed
    if getattr(args, "mode", None):
        cfg.mode = args.mode
    return cfg.validate()


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args) -> int:
    raw = _read_json(args.config, "synthetic config") if args.config else {}
    if args.seed is not None:
        raw["seed"] = args.seed
    try:
        cfg = SyntheticConfig.from_json(json.dumps(raw))
    except (TypeError, ValueError) as e:
        raise CliError(EXIT_CONFIG, f"bad synthetic config: {e}") from e
    out = Path(args.out or os.environ.get("HTCN_DATA_DIR") or "")
    if not str(out):
        raise CliError(EXIT_CONFIG, "no output directory: pass --out or set HTCN_DATA_DIR")
    syn = generate_synthetic(cfg)
    syn.write(out)
    n = len(syn.dataset.users)
    print(json.dumps({"out": str(out), "users": n, "events": syn.dataset.n_events,
                      "sessions_per_user": sum(u.n_sessions for u in syn.dataset.users) / max(n, 1)}))
    return EXIT_OK


def cmd_embed(args) -> int:
    from .graph import build_item_graph, embedding_table, train_gcn

    ds = _load_dataset(args, need_table=False)
    seed = 0 if args.seed is None else args.seed
    graph = build_item_graph(ds.users, args.window, feature_dim=args.feature_dim, seed=seed)
    res = train_gcn(graph, dim=args.dim, steps=args.steps, seed=seed)
    out = Path(args.out) if args.out else _dataset_dir(args) / EMBEDDINGS_FILE
    embedding_table(graph, res.embeddings).save(out)
    print(json.dumps({"out": str(out), "nodes": graph.n_nodes, "edges": graph.n_edges,
                      "loss_first": res.losses[0], "loss_last": res.losses[-1]}))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _train_config(args)
    if args.max_epochs is not None:
        cfg.max_epochs = args.max_epochs
    ds = _load_dataset(args)
    if ds.table.dim != cfg.model.embedding_dim:
        raise CliError(EXIT_CONFIG, f"model embedding_dim {cfg.model.embedding_dim} != table dim {ds.table.dim}")
    out = Path(args.out or "run")
    res = train(cfg, ds, out, resume=args.resume, pool=_pool(args))
    _write(out / "config.json", cfg.to_json())
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "train_loss", "val_loss", "seconds"])
    for i, e in enumerate(res.manifest.epochs):
        w.writerow([i, e["train_loss"], e["val_loss"], e["seconds"]])
    _write(out / "curves.csv", buf.getvalue())
    summary = {"out": str(out), "best_epoch": res.manifest.best_epoch, "epochs": len(res.manifest.epochs)}
    if res.manifest.report:
        summary["metrics"] = res.manifest.report["metrics"]
    print(json.dumps(summary))
    return EXIT_OK


def _pool(args) -> PoolStrategy:
    return PoolStrategy(getattr(args, "pool", "impressions") or "impressions", getattr(args, "pool_size", 100) or 100)


def cmd_eval(args) -> int:
    ds = _load_dataset(args)
    users, score_from = ds.users, None
    if args.config or args.mode:
        cfg = _train_config(args)
        split = make_split(cfg, ds.users)
        users, score_from = split.test, split.test_from
        mode, max_unroll = cfg.mode, cfg.max_unroll_sessions
    else:
        mode, max_unroll = "cold", 4
    if args.scorer == "model":
        if not args.checkpoint:
            raise CliError(EXIT_CONFIG, "--checkpoint is required for the model scorer")
        model = load_checkpoint(args.checkpoint)[0]
        scorer = ModelScorer(model, max_unroll_sessions=max_unroll)
    else:
        scorer = {"mv": MVScorer, "maxitem": MaxItemScorer, "random": RandomScorer,
                  "oracle": OracleScorer}[args.scorer]()
    seed = 0 if args.seed is None else args.seed
    rep = evaluate(scorer, users, ds.table, _pool(args), score_from, seed=seed, mode=mode)
    if args.out:
        out = Path(args.out)
        _write(out / "report.json", rep.to_json())
        _write(out / "report.csv", rep.to_csv())
    print(rep.to_table() if args.table else rep.to_json())
    return EXIT_OK


def next_event_embedding(model, history: SessionizedHistory, table, now: float | None = None) -> np.ndarray:
    """User embedding for the interaction after ``history`` (at time ``now``, default the last one)."""
    if len(history) == 0:
        ts = np.array([0.0 if now is None else float(now)])
        h = SessionizedHistory.from_log(history.user_id, table.ids[:1], ts)
        return model.forward_user(h, table)[-1]
    last = float(history.timestamps[-1])
    now = last if now is None else float(now)
    if now < last:
        raise DataError(f"--now {now} is before the last interaction {last}")
    h = SessionizedHistory.from_log(history.user_id, np.append(history.items, history.items[-1]),
                                    np.append(history.timestamps, now))
    return model.forward_user(h, table)[-1]


def cmd_recommend(args) -> int:
    model = load_checkpoint(args.checkpoint)[0]
    ds = _load_dataset(args)
    users = read_interaction_log(args.history)
    if args.user is not None:
        users = [u for u in users if u.user_id == args.user]
        if not users:
            raise CliError(EXIT_DATA, f"user {args.user} not in {args.history}")
    elif len(users) != 1:
        raise CliError(EXIT_CONFIG, f"{args.history} holds {len(users)} users; pick one with --user")
    hist = users[0]
    missing = hist.items[~ds.table.contains(hist.items)]
    if missing.size:
        raise CliError(EXIT_DATA, f"history references unknown item(s) {missing[:5].tolist()}")
    cand = np.asarray(args.candidates, dtype=np.int64) if args.candidates else ds.table.ids
    if cand.size and not ds.table.contains(cand).all():
        raise CliError(EXIT_DATA, "candidate list references unknown items")
    u = next_event_embedding(model, hist, ds.table, args.now)
    ids, scores = rank_candidates(u, cand, ds.table.lookup(cand, model.config.np_dtype), args.k)
    print(json.dumps({"user_id": hist.user_id, "item_ids": ids.tolist(), "scores": [float(s) for s in scores]}))
    return EXIT_OK


def cmd_serve(args) -> int:
    from .serving import RecommenderService, UserStateCache, serve

    model = load_checkpoint(args.checkpoint)[0]
    ds = _load_dataset(args)
    cache = None
    if args.snapshot and Path(args.snapshot).exists():
        cache = UserStateCache.load(args.snapshot, model.config)
    svc = RecommenderService(model, ds.table, cache=cache)
    serve(svc, args.host, args.port, args.snapshot)
    return EXIT_OK


def cmd_defaults(args) -> int:
    if args.kind == "train":
        print(TrainConfig().to_json())
    else:
        print(canonical_json(json.loads(SyntheticConfig().to_json())))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="htcn", description="Hierarchical session-based recommendation models.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True, dataset=True, checkpoint=False, out=True, mode=False):
        if config:
            sp.add_argument("--config", help="JSON config file")
        if dataset:
            sp.add_argument("--dataset", help="dataset directory (default $HTCN_DATA_DIR)")
        if checkpoint:
            sp.add_argument("--checkpoint", help="model checkpoint file")
        if out:
            sp.add_argument("--out", help="output path")
        sp.add_argument("--seed", type=int, default=None, help="override the config seed")
        if mode:
            sp.add_argument("--mode", choices=("cold", "warm"), default=None,
                            help="cold: user-disjoint split, warm: time split")

    def pool(sp):
        sp.add_argument("--pool", choices=("impressions", "full-catalog", "uniform-sample"), default="impressions")
        sp.add_argument("--pool-size", type=int, default=100, help="size of uniform-sample pools")

    sp = sub.add_parser("generate", help="write a synthetic dataset")
    common(sp, dataset=False)
    sp.set_defaults(fn=cmd_generate)

    sp = sub.add_parser("embed", help="train graph-convolution item embeddings from the interaction log")
    common(sp, config=False)
    sp.add_argument("--window", type=float, default=600.0, help="co-interaction window in seconds")
    sp.add_argument("--dim", type=int, default=32)
    sp.add_argument("--feature-dim", type=int, default=32)
    sp.add_argument("--steps", type=int, default=500)
    sp.set_defaults(fn=cmd_embed)

    sp = sub.add_parser("train", help="train a model with early stopping")
    common(sp, mode=True)
    sp.add_argument("--resume", help="continue from a last.ckpt file")
    sp.add_argument("--max-epochs", type=int, default=None)
    pool(sp)
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint or a rule-based baseline")
    common(sp, checkpoint=True, mode=True)
    sp.add_argument("--scorer", choices=("model", "mv", "maxitem", "random", "oracle"), default="model")
    sp.add_argument("--table", action="store_true", help="print a text table instead of JSON")
    pool(sp)
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("recommend", help="top-k items for the next interaction of one user")
    common(sp, config=False, checkpoint=True, out=False)
    sp.add_argument("--history", required=True, help="interaction log holding the user's history")
    sp.add_argument("--user", type=int, default=None)
    sp.add_argument("--k", type=int, default=10)
    sp.add_argument("--now", type=float, default=None, help="time of the next interaction")
    sp.add_argument("--candidates", type=int, nargs="*", help="candidate item IDs (default: whole catalog)")
    sp.set_defaults(fn=cmd_recommend)

    sp = sub.add_parser("serve", help="run the HTTP recommendation service")
    common(sp, config=False, checkpoint=True, out=False)
    sp.add_argument("--host", default="127.0.0.1")
    sp.add_argument("--port", type=int, default=8080)
    sp.add_argument("--snapshot", help="user-state snapshot, loaded on start and written on shutdown")
    sp.set_defaults(fn=cmd_serve)

    sp = sub.add_parser("defaults", help="print a default config")
    sp.add_argument("kind", choices=("train", "synthetic"))
    sp.set_defaults(fn=cmd_defaults)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    for name in ("checkpoint",):
        if getattr(args, name, None) is not None and not Path(getattr(args, name)).exists():
            print(f"error: {name} {getattr(args, name)} does not exist", file=sys.stderr)
            return EXIT_DATA
    try:
        return args.fn(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, NonFiniteGradientError, FloatingPointError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, MissingItemError, EmbeddingFormatError, CheckpointError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
