"""MNIST (IDX) and CIFAR-10 (binary batch) loaders, normalization, subsampling."""
import gzip
import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import BadMagic, CountMismatch, LabelOutOfRange, TruncatedFile, ZeroVariance

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_SIDE = 32
CIFAR_RECORD = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE
DATA_DIR_ENV = "DCGP_DATA_DIR"

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
CIFAR_FILES = {
    "train": [f"data_batch_{i}.bin" for i in range(1, 6)],
    "test": ["test_batch.bin"],
}


@dataclass
class LabeledDataset:
    images: np.ndarray  # N x H x W x C, float64
    labels: np.ndarray  # N, int64
    num_classes: int

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise CountMismatch(f"{len(self.images)} images vs {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise LabelOutOfRange(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx):
        return LabeledDataset(self.images[idx], self.labels[idx], self.num_classes)


def _read(path):
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rb") as fh:
        return fh.read()


def _resolve(path):
    if not os.path.exists(path) and os.path.exists(f"{path}.gz"):
        return f"{path}.gz"
    return path


def _parse_idx(blob, magic, name):
    if len(blob) < 8:
        raise TruncatedFile(f"{name}: header truncated")
    got, count = struct.unpack(">II", blob[:8])
    if got != magic:
        raise BadMagic(f"{name}: magic 0x{got:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(blob) < header:
        raise TruncatedFile(f"{name}: header truncated")
    dims = struct.unpack(f">{ndim}I", blob[4:header])
    size = int(np.prod(dims))
    if len(blob) < header + size:
        raise TruncatedFile(f"{name}: expected {size} data bytes, found {len(blob) - header}")
    return np.frombuffer(blob, dtype=np.uint8, count=size, offset=header).reshape(dims)


def load_mnist(images_path, labels_path):
    """Parse an IDX image/label pair; pixels scaled to [0, 1], shape ``N x 28 x 28 x 1``."""
    images = _parse_idx(_read(_resolve(images_path)), IDX_IMAGES_MAGIC, images_path)
    labels = _parse_idx(_read(_resolve(labels_path)), IDX_LABELS_MAGIC, labels_path)
    if len(images) != len(labels):
        raise CountMismatch(f"{len(images)} images vs {len(labels)} labels")
    x = images.astype(np.float64)[..., None] / 255.0
    return LabeledDataset(x, labels.astype(np.int64), 10)


def write_idx(images_path, labels_path, images, labels):
    """Write uint8 images (``N x H x W``) and labels in IDX format."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, h, w = images.shape
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)))
        fh.write(labels.tobytes())


def load_cifar10(paths):
    """Concatenate CIFAR-10 binary batches into an ``N x 32 x 32 x 3`` dataset in [0, 1]."""
    if isinstance(paths, (str, os.PathLike)):
        paths = [paths]
    xs, ys = [], []
    for path in paths:
        blob = _read(_resolve(path))
        if len(blob) % CIFAR_RECORD:
            raise TruncatedFile(f"{path}: {len(blob)} bytes is not a whole number of records")
        rec = np.frombuffer(blob, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        labels = rec[:, 0].astype(np.int64)
        if labels.size and labels.max() >= 10:
            raise LabelOutOfRange(f"{path}: label {labels.max()} out of range")
        planes = rec[:, 1:].reshape(-1, 3, CIFAR_SIDE, CIFAR_SIDE)
        xs.append(planes.transpose(0, 2, 3, 1))
        ys.append(labels)
    x = np.concatenate(xs).astype(np.float64) / 255.0
    return LabeledDataset(x, np.concatenate(ys), 10)


def write_cifar10(path, images, labels):
    """Write ``N x 32 x 32 x 3`` uint8 images as one CIFAR-10 binary batch."""
    images = np.asarray(images, dtype=np.uint8)
    planar = images.transpose(0, 3, 1, 2).reshape(len(images), -1)
    rec = np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], planar], axis=1)
    with open(path, "wb") as fh:
        fh.write(rec.tobytes())


def channel_stats(ds):
    x = ds.images.reshape(-1, ds.images.shape[-1])
    return x.mean(axis=0), x.std(axis=0)


def normalize(ds, stats=None):
    """Per-channel standardization; ``stats`` default to those of ``ds`` itself.

    Returns ``(normalized dataset, (mean, std))``.
    """
    mean, std = channel_stats(ds) if stats is None else (np.asarray(stats[0]), np.asarray(stats[1]))
    if np.any(std <= 0):
        raise ZeroVariance(f"channel(s) {np.flatnonzero(std <= 0).tolist()} have zero variance")
    return LabeledDataset((ds.images - mean) / std, ds.labels, ds.num_classes), (mean, std)


def take_first(ds, n):
    return ds.subset(np.arange(min(n, len(ds))))


def take_balanced(ds, n, seed=None):
    """``n // num_classes`` examples per class (first occurrences unless ``seed`` shuffles)."""
    per = n // ds.num_classes
    order = np.arange(len(ds)) if seed is None else np.random.default_rng(seed).permutation(len(ds))
    picks = []
    for c in range(ds.num_classes):
        idx = order[ds.labels[order] == c][:per]
        if len(idx) < per:
            raise ValueError(f"class {c} has only {len(idx)} examples, need {per}")
        picks.append(idx)
    return ds.subset(np.sort(np.concatenate(picks)))


def data_root(default=None):
    return os.environ.get(DATA_DIR_ENV, default or os.path.join(os.path.expanduser("~"), "dcgp-data"))


def mnist_paths(root, split):
    img, lab = MNIST_FILES[split]
    return os.path.join(root, img), os.path.join(root, lab)


def cifar_paths(root, split):
    return [os.path.join(root, f) for f in CIFAR_FILES[split]]


def find_dataset_dir(name, root=None):
    """Directory holding ``name``'s files under ``root`` (``root/name`` or ``root`` itself)."""
    root = data_root(root)
    for cand in (os.path.join(root, name), os.path.join(root, "cifar-10-batches-bin"), root):
        probe = mnist_paths(cand, "train")[0] if name == "mnist" else cifar_paths(cand, "test")[0]
        if os.path.exists(probe) or os.path.exists(probe + ".gz"):
            return cand
    return None


def load_split(name, split, root=None):
    d = find_dataset_dir(name, root)
    if d is None:
        raise FileNotFoundError(f"no {name} files under {data_root(root)}")
    if name == "mnist":
        return load_mnist(*mnist_paths(d, split))
    if name == "cifar10":
        return load_cifar10(cifar_paths(d, split))
    raise ValueError(f"unknown dataset {name!r}")
