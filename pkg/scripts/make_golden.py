#!/usr/bin/env python3
"""Regenerate tests/data/score_golden.csv (50 spec scores, fixed seeds)."""
import csv
import pathlib
import sys

sys.path.insert(0, str(pathlib.Path(__file__).resolve().parents[1] / "src"))

from tabunas.search_space import SpaceConfig, random_spec, spec_hash_hex
from tabunas.zerocost import noise_probe, score_network


def main():
    cfg = SpaceConfig(scale_range=(1, 2), layers_range=(1, 2),
                      channel_ladder=(8, 16, 24))
    probe = noise_probe(8, 3, 16, 16, seed=1234)
    out = pathlib.Path(__file__).resolve().parents[1] / "tests" / "data" / "score_golden.csv"
    with out.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["seed", "hash", "score", "n_units"])
        for seed in range(50):
            spec = random_spec(cfg, seed)
            report = score_network(spec, cfg, probe, init_seed=99)
            writer.writerow([seed, spec_hash_hex(spec), repr(report.score), report.n_units])
    print(f"wrote {out}")


if __name__ == "__main__":
    main()
