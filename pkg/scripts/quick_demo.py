#!/usr/bin/env python3
"""Two-minute tour: tiny training run, one explained image, one harness pass.

Use run_full_study.py for the real numbers; this just shows the moving
parts and the output layout without the wait.
"""
import argparse
import os
import sys

from patchlens.cli import main as cli


def run(argv: list[str]) -> None:
    print("$ patchlens " + " ".join(argv), flush=True)
    rc = cli(argv)
    if rc != 0:
        sys.exit(rc)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="demo_out")
    args = ap.parse_args()

    train_dir = os.path.join(args.out, "train")
    run(["train", "--synthetic", "120", "--epochs", "3", "--seed", "0",
         "--out", train_dir])

    dataset = os.path.join(train_dir, "dataset")
    with open(os.path.join(dataset, "labels.tsv")) as fh:
        for line in fh:
            name, label, split, mask = line.rstrip("\n").split("\t")
            if label == "1" and mask != "-":
                break
    run(["explain",
         "--weights", os.path.join(train_dir, "checkpoints", "epoch_003.nnwc"),
         "--manifest", os.path.join(train_dir, "checkpoints", "network.manifest"),
         "--image", os.path.join(dataset, name + ".ppm"),
         "--mask", os.path.join(dataset, mask),
         "--metric", "all", "--n", "20", "--out", os.path.join(args.out, "explain")])

    run(["evaluate", "--checkpoints", os.path.join(train_dir, "checkpoints"),
         "--data", dataset, "--metrics", "act-out-corr,act-precision",
         "--out", os.path.join(args.out, "harness")])

    print(f"demo complete; see {args.out}/explain and {args.out}/harness")


if __name__ == "__main__":
    main()
