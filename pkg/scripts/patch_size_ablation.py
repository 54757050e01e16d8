"""Train the same small set with 16px and 8px patches and write a report for each."""

import argparse

from mvc.experiments import patch_size_ablation

parser = argparse.ArgumentParser(description=__doc__)
parser.add_argument("--out", default="runs/ablation")
parser.add_argument("--seed", type=int, default=0)
parser.add_argument("--count", type=int, default=16)
parser.add_argument("--epochs", type=int, default=2)
args = parser.parse_args()

for run in patch_size_ablation(args.out, seed=args.seed, count=args.count, epochs=args.epochs):
    print(f"{run.name}: N={run.patch_count} {run.seconds:.1f}s train metrics {run.train}")
