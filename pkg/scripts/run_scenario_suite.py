#!/usr/bin/env python3
"""Scenario comparison on a synthetic patch-raster world (one 5% minority
class): exact per-bag priors, global priors at two bag sizes, and the
equal-split baseline evaluated through k-means. Ends with the comparison
table and a class map per run.

Usage: python scripts/run_scenario_suite.py [--out DIR] [--seed N]
"""

import argparse
import json
import sys
from pathlib import Path

from llpco.cli import main as llpco_main

DATA = {
    "kind": "raster",
    "classes": 4,
    "height": 144,
    "width": 144,
    "fields": 24,
    "proportions": [0.40, 0.32, 0.23, 0.05],
    "signature_gap": 2.0,
    "texture_sigma": 1.0,
    "field_jitter": 0.8,
    "channels": 3,
    "seed": 0,
}
MODEL = {"hidden_dims": [128], "embed_dim": 32}
TRAIN = {
    "epochs": 40,
    "samples_per_epoch": 4096,
    "warmup_epochs": 3,
    "seed": 0,
    "augment": {"rotate90": True, "mirror": True},
}

RUNS = [
    ("siii_bag64", "SIII", 64, "prototypes"),
    ("siv_bag128", "SIV", 128, "prototypes"),
    ("siv_bag1024", "SIV", 1024, "prototypes"),
    ("baseline_bag1024", "SwAV-baseline", 1024, "kmeans"),
]


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="runs/raster")
    parser.add_argument("--seed", type=int, default=None)
    args = parser.parse_args()
    root = Path(args.out)
    root.mkdir(parents=True, exist_ok=True)
    seed_args = ["--seed", str(args.seed)] if args.seed is not None else []

    data_dir = root / "data"
    gen_path = root / "generate.json"
    gen_path.write_text(json.dumps({"data": DATA, "io": {"out": str(data_dir)}}, indent=2))
    if llpco_main(["generate", "--config", str(gen_path), *seed_args]):
        return 1

    metrics_files = []
    for name, scenario, bag, assigner in RUNS:
        run_dir = root / name
        cfg = {
            "scenario": {"name": scenario},
            "model": MODEL,
            "train": {**TRAIN, "bag_size": bag},
            "eval": {"knn_k": 25, "assigner": assigner},
            "io": {
                "out": str(run_dir),
                "dataset": str(data_dir / "world.llpd"),
                "checkpoint": str(run_dir / "checkpoint.llpc"),
            },
        }
        cfg_path = root / f"{name}.json"
        cfg_path.write_text(json.dumps(cfg, indent=2))
        print(f"== {name} ({scenario}, bag {bag}) ==")
        if llpco_main(["train", "--config", str(cfg_path), *seed_args]):
            return 1
        if llpco_main(["eval", "--config", str(cfg_path), *seed_args]):
            return 1
        metrics_files.append(str(run_dir / "metrics.json"))

    print("== comparison ==")
    return llpco_main(["report", *metrics_files, "--out", str(root)])


if __name__ == "__main__":
    sys.exit(main())
