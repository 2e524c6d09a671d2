#!/usr/bin/env python3
"""Write a seeded MNIST subset as IDX files.

Input is the 5000-row MNIST sample shipped with mlxtend
(mlxtend/data/data/mnist_5k.csv.gz: 784 pixel columns then the label).

    python3 scripts/mnist_subset.py mnist_5k.csv.gz data/mnist-subset
"""
import gzip
import struct
import sys
from pathlib import Path

import numpy as np


def write_idx(path, array, magic):
    with open(path, "wb") as f:
        f.write(struct.pack(">I", magic))
        for d in array.shape:
            f.write(struct.pack(">I", d))
        f.write(array.astype(np.uint8).tobytes())


def main(src, out, n_train=2000, n_test=1000, seed=0):
    table = np.genfromtxt(gzip.open(src), delimiter=",")
    images = table[:, :-1].reshape(-1, 28, 28)
    labels = table[:, -1].astype(int)
    perm = np.random.default_rng(seed).permutation(len(labels))
    train, test = perm[:n_train], perm[n_train:n_train + n_test]
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    write_idx(out / "train-images-idx3-ubyte", images[train], 0x803)
    write_idx(out / "train-labels-idx1-ubyte", labels[train], 0x801)
    write_idx(out / "test-images-idx3-ubyte", images[test], 0x803)
    write_idx(out / "test-labels-idx1-ubyte", labels[test], 0x801)


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
