#!/usr/bin/env python3
"""Training-free score vs trained accuracy on the dense-regression toy task.

Trains a batch of random genotypes and reports the Spearman rank
correlation between their scores and validation d1, per seed and averaged.
"""
import argparse
import pathlib
import sys

sys.path.insert(0, str(pathlib.Path(__file__).resolve().parents[1] / "src"))

import numpy as np

from tabunas.evaluator import ToyEvaluator, TrainConfig
from tabunas.objective import ObjectiveConfig
from tabunas.search_space import ComputeBudget, SpaceConfig, random_spec
from tabunas.tasks import ToyTaskConfig, gen_task
from tabunas.utils import derive_seed, spearman
from tabunas.zerocost import ProbeBatch, score_network


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--specs", type=int, default=30)
    parser.add_argument("--runs", type=int, default=3)
    parser.add_argument("--epochs", type=int, default=12)
    args = parser.parse_args()

    task = ToyTaskConfig(kind="regress", resolution=16, train_size=48,
                         val_size=24, seed=3)
    cfg = SpaceConfig(scale_range=(1, 2), layers_range=(1, 2),
                      channel_ladder=(8, 16, 24, 32),
                      budget=ComputeBudget(per_block_cost_cap=1200,
                                           param_cap=80_000))
    obj = ObjectiveConfig()
    train, _ = gen_task(task)
    probe = ProbeBatch(data=train.inputs[:16].copy(), source="task")

    rhos = []
    for run in range(args.runs):
        evaluator = ToyEvaluator(
            task, TrainConfig(epochs=args.epochs, batch_size=16,
                              base_lr=7e-3, seed=run), obj)
        scores, accs = [], []
        for i in range(args.specs):
            spec = random_spec(cfg, derive_seed("ranksig", run, i))
            report = score_network(spec, cfg, probe, derive_seed("init", run))
            result = evaluator(spec)
            scores.append(report.score)
            accs.append(result.metrics.get("d1", 0.0))
        rho = spearman(scores, accs)
        rhos.append(rho)
        print(f"run {run}: spearman(score, d1) = {rho:.3f}")
    print(f"mean over {args.runs} runs: {float(np.mean(rhos)):.3f}")


if __name__ == "__main__":
    main()
