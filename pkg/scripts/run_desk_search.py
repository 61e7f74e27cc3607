#!/usr/bin/env python3
"""Full desk-scale search run with training-backed grading.

Writes run.ndjson, checkpoints and report.json under --out-dir.
Takes roughly an hour at the default dials on a laptop CPU.
"""
import argparse
import json
import pathlib
import sys

sys.path.insert(0, str(pathlib.Path(__file__).resolve().parents[1] / "src"))

from tabunas.runconfig import build_driver, load_run_config

DESK_CONFIG = {
    "task": {"kind": "regress", "resolution": 32, "train_size": 200,
             "val_size": 50, "seed": 7},
    "space": {"scale_range": [1, 3], "layers_range": [1, 3],
              "channel_ladder": [8, 16, 24, 32, 48],
              "param_cap": 300_000},
    "search": {"pool_size": 2000, "n_parents": 6, "n_children": 24,
               "max_iter": 100, "patience": 10, "seed": 11},
    "objective": {"alpha": 0.6, "target_params": 50_000},
    "train": {"epochs": 20, "batch_size": 16, "base_lr": 7e-4},
    "probe": {"size": 16, "source": "task"},
    "evaluator_kind": "toy-trainer",
}


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out-dir", default="desk_search_out")
    parser.add_argument("--pool", type=int, default=None)
    parser.add_argument("--iters", type=int, default=None)
    args = parser.parse_args()

    data = json.loads(json.dumps(DESK_CONFIG))
    if args.pool:
        data["search"]["pool_size"] = args.pool
    if args.iters:
        data["search"]["max_iter"] = args.iters
    cfg = load_run_config(data)

    out = pathlib.Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    driver = build_driver(cfg, str(out / "run.ndjson"), str(out / "checkpoints"))
    report = driver.run()
    print(f"parents finished: {len(report.results)}")
    if report.best:
        print(f"best grade {report.best.best_grade:.4f} "
              f"accuracy {report.best.best_accuracy:.4f} "
              f"params {report.best.best_params}")


if __name__ == "__main__":
    main()
