"""Write a small real-MNIST sample as IDX files.

The full MNIST files are not always available offline.  The ``mlxtend``
wheel ships 5000 genuine MNIST digits (500 per class); this module splits
them into disjoint train/test halves and writes them under the standard
MNIST file names so every loader and CLI path works unchanged.
"""
import gzip
import os
from importlib import resources

import numpy as np

from .data import mnist_paths, write_idx

PER_CLASS_TRAIN = 250


def mlxtend_mnist():
    """``(images uint8 N x 28 x 28, labels)`` from the mlxtend sample, or None."""
    try:
        ref = resources.files("mlxtend.data").joinpath("data", "mnist_5k.csv.gz")
        with ref.open("rb") as fh:
            raw = gzip.decompress(fh.read())
    except (ModuleNotFoundError, FileNotFoundError):
        return None
    table = np.loadtxt(raw.decode("ascii").splitlines(), delimiter=",", dtype=np.int64)
    return table[:, :-1].reshape(-1, 28, 28).astype(np.uint8), table[:, -1]


def write_mnist_sample(out_dir, per_class_train=PER_CLASS_TRAIN):
    """Write train/test IDX files into ``out_dir``; returns it, or None if mlxtend is absent."""
    loaded = mlxtend_mnist()
    if loaded is None:
        return None
    images, labels = loaded
    rank = np.zeros(len(labels), dtype=np.int64)
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        rank[idx] = np.arange(len(idx))
    train = rank < per_class_train
    os.makedirs(out_dir, exist_ok=True)
    write_idx(*mnist_paths(out_dir, "train"), images[train], labels[train])
    write_idx(*mnist_paths(out_dir, "test"), images[~train], labels[~train])
    return out_dir
