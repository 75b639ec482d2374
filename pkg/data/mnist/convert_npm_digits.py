"""Rebuild the bundled MNIST IDX files from the npm ``mnist`` package (v1.1.0).

That package ships 10,000 MNIST digits as per-class JSON arrays of
784 floats in [0, 1], rounded to three decimals. We map them back to
uint8 with round(255 * v), shuffle with a fixed seed and split
8000 / 2000 into train / test IDX files.

Usage:
    npm pack mnist@1.1.0 && tar xzf mnist-1.1.0.tgz
    python convert_npm_digits.py package/src/digits
"""

import json
import sys
from pathlib import Path

import numpy as np

from geodrop.data import write_idx

N_TRAIN = 8000


def main(digits_dir):
    digits_dir = Path(digits_dir)
    images, labels = [], []
    for d in range(10):
        flat = np.asarray(json.loads((digits_dir / f"{d}.json").read_text())["data"])
        imgs = flat.reshape(-1, 28, 28)
        images.append(np.rint(imgs * 255.0).clip(0, 255).astype(np.uint8))
        labels.append(np.full(imgs.shape[0], d, dtype=np.uint8))
    images = np.concatenate(images)
    labels = np.concatenate(labels)
    order = np.random.default_rng(20240601).permutation(labels.size)
    images, labels = images[order], labels[order]

    out = Path(__file__).parent
    write_idx(out / "train-images-idx3-ubyte.gz", images[:N_TRAIN])
    write_idx(out / "train-labels-idx1-ubyte.gz", labels[:N_TRAIN])
    write_idx(out / "t10k-images-idx3-ubyte.gz", images[N_TRAIN:])
    write_idx(out / "t10k-labels-idx1-ubyte.gz", labels[N_TRAIN:])
    print(f"wrote {N_TRAIN} train / {labels.size - N_TRAIN} test examples to {out}")


if __name__ == "__main__":
    main(sys.argv[1])
