"""Fisher norm of trained MNIST networks against the dropout rate.

Run: python3 demos/fisher_vs_dropout_rate.py [trials]

A short version of the full sweep (`geodrop sweep`, or criterion 7 of the
acceptance suite): 784-100-10 relu networks on the bundled MNIST subset,
trained with per-minibatch unit dropout, then measured with every unit
active. With two trials per rate it takes about a minute on one core.
"""

import sys
from pathlib import Path

from geodrop.data import load_mnist
from geodrop.experiment import SweepConfig, run_sweep, summarize, sweep_shape

mnist = Path(__file__).resolve().parents[1] / "data" / "mnist"
train = load_mnist(mnist / "train-images-idx3-ubyte.gz", mnist / "train-labels-idx1-ubyte.gz", limit=5000)
test = load_mnist(mnist / "t10k-images-idx3-ubyte.gz", mnist / "t10k-labels-idx1-ubyte.gz", limit=1000)
trials = int(sys.argv[1]) if len(sys.argv) > 1 else 2

cfg = SweepConfig(rates=(0.0, 0.2, 0.3, 0.6), trials=trials)
summary = summarize(run_sweep(train, test, cfg))
for e in summary:
    bar = "#" * int(40 * e["fim_norm_mean"] / max(s["fim_norm_mean"] for s in summary))
    print(f"p={e['rate']:.1f}  {e['fim_norm_mean']:.4f} +/- {e['fim_norm_std']:.4f}  "
          f"acc {e['test_accuracy_mean']:.3f}  {bar}")
print("lowest mean Fisher norm at p =", sweep_shape(summary)["argmin_rate"])
