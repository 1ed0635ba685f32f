"""Rebuild the bundled MNIST subset from mlxtend's ``mnist_5k.csv.gz``.

The CSV holds 5,000 MNIST digits (500 per class, 784 pixel columns followed by
the label). Rows are shuffled with a fixed seed and split 4,000 / 1,000 into
gzipped IDX files under ``src/fedmvr/data/mnist5k``.

    python scripts/build_mnist_subset.py path/to/mnist_5k.csv.gz
"""

import argparse
from pathlib import Path

import numpy as np

from fedmvr.datagen import write_idx

OUT = Path(__file__).resolve().parents[1] / "src" / "fedmvr" / "data" / "mnist5k"


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("csv")
    parser.add_argument("--n-test", type=int, default=1000)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    table = np.loadtxt(args.csv, delimiter=",", dtype=np.int64)
    images = table[:, :-1].astype(np.uint8).reshape(-1, 28, 28)
    labels = table[:, -1].astype(np.uint8)
    order = np.random.default_rng(args.seed).permutation(len(labels))
    images, labels = images[order], labels[order]

    OUT.mkdir(parents=True, exist_ok=True)
    n_train = len(labels) - args.n_test
    write_idx(images[:n_train], labels[:n_train],
              OUT / "train-images-idx3-ubyte.gz", OUT / "train-labels-idx1-ubyte.gz")
    write_idx(images[n_train:], labels[n_train:],
              OUT / "t10k-images-idx3-ubyte.gz", OUT / "t10k-labels-idx1-ubyte.gz")
    print(f"wrote {n_train} train / {args.n_test} test images to {OUT}")


if __name__ == "__main__":
    main()
