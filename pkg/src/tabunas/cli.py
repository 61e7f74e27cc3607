"""Command-line surface: search runs, scoring, grading, exports.

Exit codes: 0 success, 2 configuration/usage error, 3 runtime failure.
Worker-pool size resolves flag > TABUNAS_WORKERS > config value.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import replace

from . import net_graph, zerocost
from .ats import build_parent_pool, PoolError
from .evaluator import TrainConfig, make_evaluator
from .objective import ObjectiveConfig
from .runconfig import (
    ConfigError,
    DEFAULT_ALPHAS,
    RunConfig,
    build_driver,
    load_run_config_file,
    make_scorer,
    resume_driver,
    sweep_alpha,
)
from .search_space import (
    SpaceConfig,
    SpaceConfigError,
    SpecParseError,
    MutationFailed,
    TaskHead,
    deserialize,
    mutate_modify,
    mutate_swap,
    serialize,
    space_size_from_m,
    spec_hash_hex,
)
from .tasks import ToyTaskConfig

_CONFIG_ERRORS = (ConfigError, SpaceConfigError, SpecParseError, ValueError)


def _read_spec(path: str):
    try:
        with open(path) as fh:
            return deserialize(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read spec {path}: {exc}")


def _space_for_spec(spec, config_path: str | None) -> SpaceConfig:
    if config_path:
        run_cfg = load_run_config_file(config_path)
        return run_cfg.space
    return SpaceConfig(in_channels=spec.in_channels, task_head=spec.task_head)


def _workers(args, cfg_value: int) -> int:
    if getattr(args, "workers", None) is not None:
        return args.workers
    env = os.environ.get("TABUNAS_WORKERS")
    if env:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"TABUNAS_WORKERS={env!r} is not an integer")
    return cfg_value


# --- subcommands --------------------------------------------------------------


def cmd_space_size(args) -> int:
    if args.m is not None:
        m = args.m
    else:
        cfg = load_run_config_file(args.config) if args.config else RunConfig()
        m = cfg.space.sub_space_size
    total, log10 = space_size_from_m(m, args.s)
    print(f"m={m}")
    print(f"scales={args.s}")
    print(f"size={total}")
    print(f"log10={log10:.4f}")
    return 0


def _noise_probe_from_args(args):
    return zerocost.noise_probe(args.probe_size, args.channels, args.res,
                                args.res, seed=args.probe_seed)


def _score_one(spec, probe, init_seed):
    cfg = SpaceConfig(in_channels=spec.in_channels, task_head=spec.task_head)
    report = zerocost.score_network(spec, cfg, probe, init_seed)
    return report


def cmd_score(args) -> int:
    paths = list(args.batch) if args.batch else [args.spec]
    if not paths or paths == [None]:
        raise ConfigError("provide --spec FILE or --batch FILE [FILE ...]")
    rows = []
    for path in paths:
        spec = _read_spec(path)
        probe = _noise_probe_from_args(args)
        report = _score_one(spec, probe, args.init_seed)
        rows.append({
            "hash": spec_hash_hex(spec),
            "score": report.score,
            "n_units": report.n_units,
            "degenerate": int(report.degenerate),
        })
    if args.out:
        with open(args.out, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["hash", "score", "n_units", "degenerate"])
            writer.writeheader()
            writer.writerows(rows)
        print(f"wrote {len(rows)} rows to {args.out}")
    else:
        for row in rows:
            print(
                f"hash={row['hash']} score={row['score']} "
                f"n_units={row['n_units']} degenerate={row['degenerate']}"
            )
    return 0


def cmd_eval(args) -> int:
    spec = _read_spec(args.spec)
    task_cfg = ToyTaskConfig(
        kind=args.task, resolution=args.res, num_classes=args.classes,
        sr_factor=args.sr_factor, train_size=args.train_size,
        val_size=args.val_size, seed=args.task_seed,
    )
    train_cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size,
                            base_lr=args.lr, augment=not args.no_augment,
                            seed=args.train_seed)
    obj_cfg = ObjectiveConfig(alpha=args.alpha, target_params=args.target_params)
    evaluator = make_evaluator("toy-trainer", task_cfg, train_cfg, obj_cfg)
    result = evaluator(spec)
    print(json.dumps({
        "hash": spec_hash_hex(spec),
        "accuracy": result.accuracy,
        "params": result.params,
        "grade": result.grade,
        "diverged": result.diverged,
        "metrics": result.metrics,
    }, sort_keys=True))
    return 0


def cmd_mutate(args) -> int:
    spec = _read_spec(args.spec)
    cfg = _space_for_spec(spec, args.config)
    if args.op == "swap":
        child = mutate_swap(spec, args.seed, cfg)
    else:
        child = mutate_modify(spec, cfg, args.seed)
    text = serialize(child)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
        print(f"hash={spec_hash_hex(child)} -> {args.out}")
    else:
        sys.stdout.write(text)
    return 0


def cmd_rank(args) -> int:
    cfg = load_run_config_file(args.config) if args.config else RunConfig()
    scorer = make_scorer(cfg)
    pool = build_parent_pool(cfg.space, args.pool, args.seed or cfg.search.seed, scorer)
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["rank", "hash", "score", "params"])
        for rank, entry in enumerate(pool):
            writer.writerow([rank, entry.hash, entry.score, entry.params])
    print(f"wrote {len(pool)} rows to {args.out}")
    return 0


def _write_report(report, out_dir: str):
    payload = {
        "best": None,
        "parents": [],
    }
    if report.best is not None:
        payload["best"] = {
            "hash": report.best.best_hash,
            "grade": report.best.best_grade,
            "accuracy": report.best.best_accuracy,
            "params": report.best.best_params,
            "spec": serialize(report.best.best_spec),
        }
    for res in report.results:
        payload["parents"].append({
            "parent": res.parent_index,
            "hash": res.best_hash,
            "grade": res.best_grade,
            "accuracy": res.best_accuracy,
            "params": res.best_params,
            "iterations": res.iterations,
            "aborted": res.aborted,
            "spec": serialize(res.best_spec),
        })
    with open(os.path.join(out_dir, "report.json"), "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)


def cmd_search(args) -> int:
    os.makedirs(args.out_dir, exist_ok=True)
    log_path = os.path.join(args.out_dir, "run.ndjson")
    ckpt_dir = os.path.join(args.out_dir, "checkpoints")
    if args.resume:
        driver = resume_driver(args.resume, log_path, ckpt_dir)
    else:
        cfg = load_run_config_file(args.config) if args.config else RunConfig()
        workers = _workers(args, cfg.search.workers)
        if workers != cfg.search.workers:
            cfg = replace(cfg, search=replace(cfg.search, workers=workers))
        driver = build_driver(cfg, log_path, ckpt_dir)
    report = driver.run()
    _write_report(report, args.out_dir)
    if report.best is not None:
        print(
            f"best hash={report.best.best_hash} grade={report.best.best_grade:.4f} "
            f"params={report.best.best_params}"
        )
    else:
        print("no parent run completed")
    return 0


EXPORT_COLUMNS = [
    "parent", "iteration", "n_children", "trained_hash", "trained_grade",
    "adopted", "swapped_to", "barren", "current_hash", "current_grade",
    "best_hash", "best_grade", "no_improve",
]


def cmd_export(args) -> int:
    rows = []
    try:
        with open(args.log) as fh:
            for line in fh:
                if not line.strip():
                    continue
                record = json.loads(line)
                if record.get("type") != "iteration":
                    continue
                rows.append([
                    record["parent"], record["iter"], len(record["children"]),
                    record["trained"], record["trained_grade"],
                    int(record["adopted"]), record["swapped_to"],
                    int(record["barren"]), record["current"],
                    record["current_grade"], record["best"],
                    record["best_grade"], record["no_improve"],
                ])
    except OSError as exc:
        raise ConfigError(f"cannot read log {args.log}: {exc}")
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(EXPORT_COLUMNS)
        writer.writerows(rows)
    print(f"wrote {len(rows)} rows to {args.out}")
    return 0


def cmd_alpha_grid(args) -> int:
    cfg = load_run_config_file(args.config) if args.config else RunConfig()
    if args.subsample:
        cfg = replace(cfg, task=replace(cfg.task, train_size=args.subsample))
    alphas = DEFAULT_ALPHAS
    if args.alphas:
        try:
            alphas = tuple(float(a) for a in args.alphas.split(","))
        except ValueError:
            raise ConfigError(f"bad --alphas value {args.alphas!r}")
    log_dir = args.log_dir or os.path.join(os.path.dirname(args.out) or ".", "alpha_logs")
    rows = sweep_alpha(cfg, alphas, log_dir)
    with open(args.out, "w", newline="") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=["task", "alpha", "best_accuracy", "best_params", "best_grade"]
        )
        writer.writeheader()
        writer.writerows(rows)
    print(f"wrote {len(rows)} rows to {args.out}")
    return 0


# --- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tabunas",
        description="Score-assisted tabu search over dense-prediction backbones",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("space-size", help="exact search-space size")
    p.add_argument("--m", type=int, default=None, help="per-block choice count")
    p.add_argument("--s", type=int, required=True, help="number of scales")
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_space_size)

    p = sub.add_parser("score", help="training-free score of spec file(s)")
    p.add_argument("--spec", default=None)
    p.add_argument("--batch", nargs="+", default=None)
    p.add_argument("--out", default=None, help="CSV output (batch mode)")
    p.add_argument("--probe-size", type=int, default=16)
    p.add_argument("--res", type=int, default=32)
    p.add_argument("--channels", type=int, default=3)
    p.add_argument("--probe-seed", type=int, default=0)
    p.add_argument("--init-seed", type=int, default=0)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("eval", help="train and grade one spec on a toy task")
    p.add_argument("--spec", required=True)
    p.add_argument("--task", choices=["regress", "classify", "superres"], required=True)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--res", type=int, default=32)
    p.add_argument("--classes", type=int, default=6)
    p.add_argument("--sr-factor", type=int, default=2)
    p.add_argument("--train-size", type=int, default=200)
    p.add_argument("--val-size", type=int, default=50)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=7e-4)
    p.add_argument("--alpha", type=float, default=0.6)
    p.add_argument("--target-params", type=int, default=50_000)
    p.add_argument("--task-seed", type=int, default=0)
    p.add_argument("--train-seed", type=int, default=0)
    p.add_argument("--no-augment", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("mutate", help="apply one mutation to a spec file")
    p.add_argument("--spec", required=True)
    p.add_argument("--op", choices=["swap", "modify"], required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_mutate)

    p = sub.add_parser("rank", help="build and rank a random pool")
    p.add_argument("--pool", type=int, required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_rank)

    p = sub.add_parser("search", help="run the full architecture search")
    p.add_argument("--config", default=None)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--resume", default=None, help="checkpoint file to resume from")
    p.add_argument("--workers", type=int, default=None)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("export", help="event log to per-iteration CSV")
    p.add_argument("--log", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("alpha-grid", help="balance-coefficient grid search")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--alphas", default=None, help="comma-separated list")
    p.add_argument("--subsample", type=int, default=None,
                   help="override task train_size")
    p.add_argument("--log-dir", default=None)
    p.set_defaults(func=cmd_alpha_grid)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except _CONFIG_ERRORS as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except MutationFailed as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except PoolError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except Exception as exc:  # runtime failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
