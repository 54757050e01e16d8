"""Memorize a 64-image synthetic set with a tiny backbone and report train metrics."""

import argparse
import json
from dataclasses import asdict

from mvc.experiments import overfit_run

parser = argparse.ArgumentParser(description=__doc__)
parser.add_argument("--out", default="runs/overfit")
parser.add_argument("--seed", type=int, default=0)
parser.add_argument("--epochs", type=int, default=200)
args = parser.parse_args()

_, summary = overfit_run(args.out, seed=args.seed, epochs=args.epochs)
print(json.dumps(asdict(summary), indent=2, sort_keys=True))
