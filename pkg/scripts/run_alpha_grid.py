#!/usr/bin/env python3
"""Balance-coefficient grid search on a subsampled toy task.

One search per alpha in {0.0, 0.4, 0.5, 0.6, 1.0}, shared seeds, CSV out.
"""
import argparse
import csv
import json
import pathlib
import sys

sys.path.insert(0, str(pathlib.Path(__file__).resolve().parents[1] / "src"))

from tabunas.runconfig import DEFAULT_ALPHAS, load_run_config, sweep_alpha

GRID_CONFIG = {
    "task": {"kind": "regress", "resolution": 16, "train_size": 64,
             "val_size": 24, "seed": 3},
    "space": {"scale_range": [1, 2], "layers_range": [1, 2],
              "channel_ladder": [8, 16, 24, 32], "param_cap": 80_000},
    "search": {"pool_size": 120, "n_parents": 2, "n_children": 8,
               "max_iter": 8, "patience": 4, "seed": 17},
    "objective": {"alpha": 0.6, "target_params": 25_000},
    "train": {"epochs": 10, "batch_size": 16, "base_lr": 7e-3},
    "probe": {"size": 12, "source": "task"},
    "evaluator_kind": "toy-trainer",
}


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="alpha_grid.csv")
    parser.add_argument("--log-dir", default="alpha_grid_logs")
    parser.add_argument("--subsample", type=int, default=None)
    args = parser.parse_args()

    data = json.loads(json.dumps(GRID_CONFIG))
    if args.subsample:
        data["task"]["train_size"] = args.subsample
    cfg = load_run_config(data)
    rows = sweep_alpha(cfg, DEFAULT_ALPHAS, args.log_dir)
    with open(args.out, "w", newline="") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=["task", "alpha", "best_accuracy", "best_params", "best_grade"])
        writer.writeheader()
        writer.writerows(rows)
    for row in rows:
        print(row)


if __name__ == "__main__":
    main()
