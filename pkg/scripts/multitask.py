"""Compare full and image-only training on held-out synthetic data over several seeds."""

import argparse
import json

from mvc.experiments import multitask_comparison

parser = argparse.ArgumentParser(description=__doc__)
parser.add_argument("--out", default="runs/multitask")
parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
parser.add_argument("--count", type=int, default=512)
parser.add_argument("--epochs", type=int, default=15)
parser.add_argument("--image-size", type=int, default=64)
parser.add_argument("--patch-size", type=int, default=8)
args = parser.parse_args()

result = multitask_comparison(args.out, seeds=tuple(args.seeds), count=args.count, epochs=args.epochs,
                              image_size=args.image_size, patch_size=args.patch_size)
for run in result["runs"]:
    print(f"seed {run['seed']} {run['mode']:>5}: test accuracy {run['test']['accuracy']:.3f}")
means = result["mean_test_accuracy"]
print(json.dumps(means, sort_keys=True))
print(f"full - image = {100 * (means['full'] - means['image']):+.1f} points")
