#!/usr/bin/env python3
"""End-to-end desk-scale experiment: generate, train, evaluate, predict.

Produces a self-contained run directory:

    python scripts/run_desk_experiment.py --out runs/desk --seed 1234
"""

import argparse
import sys

from trispan.cli import main as cli


def run(argv):
    code = cli(argv)
    if code != 0:
        sys.exit(code)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/desk")
    ap.add_argument("--seed", type=int, default=1234)
    ap.add_argument("--epochs", type=int, default=10)
    ap.add_argument("--d", type=int, default=24)
    ap.add_argument("--hidden", type=int, default=32)
    args = ap.parse_args()

    data = f"{args.out}/data"
    model_dir = f"{args.out}/model"
    run(["gen", "--out", data, "--seed", str(args.seed), "--max-depth", "3"])
    run([
        "train", "--train", f"{data}/train.jsonl", "--dev", f"{data}/dev.jsonl",
        "--out", model_dir, "--seed", str(args.seed), "--epochs", str(args.epochs),
        "--d", str(args.d), "--hidden", str(args.hidden), "--emb-dim", str(args.hidden),
    ])
    run([
        "predict", "--checkpoint", f"{model_dir}/model.npz",
        "--corpus", f"{data}/test.jsonl", "--out", f"{args.out}/test_predictions.jsonl",
    ])
    run([
        "eval", "--gold", f"{data}/test.jsonl",
        "--pred", f"{args.out}/test_predictions.jsonl", "--out", args.out,
    ])


if __name__ == "__main__":
    main()
