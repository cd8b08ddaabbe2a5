"""Dataset loading: MNIST IDX files, 2-D synthetic sets, and sklearn's 8x8 digits."""
from __future__ import annotations

import gzip
import os
import struct
from pathlib import Path
from typing import Optional

import numpy as np

from .diffnet import Batch
from .rng import stream

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


class IDXFormatError(ValueError):
    def __init__(self, path, msg: str):
        super().__init__(f"{path}: {msg}")
        self.path = str(path)


def _read(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as f:
        return f.read()


def _parse_idx(path, raw: bytes, magic: int, n_dims: int, limit: Optional[int]) -> np.ndarray:
    header = 4 + 4 * n_dims
    if len(raw) < header:
        raise IDXFormatError(path, "truncated header")
    (got,) = struct.unpack(">I", raw[:4])
    if got != magic:
        raise IDXFormatError(path, f"bad magic 0x{got:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(">" + "I" * n_dims, raw[4:header])
    count = dims[0]
    item = int(np.prod(dims[1:])) if n_dims > 1 else 1
    if len(raw) - header != count * item:
        raise IDXFormatError(path, f"payload has {len(raw) - header} bytes, header promises {count * item}")
    n = count if limit is None else min(count, limit)
    data = np.frombuffer(raw, dtype=np.uint8, count=n * item, offset=header)
    return data.reshape((n,) + tuple(dims[1:]))


def load_mnist_idx(images_path, labels_path, limit: Optional[int] = None) -> Batch:
    """Decode an IDX image/label pair (optionally gzipped) into a Batch.

    Pixels are divided by 255 and each image is flattened row-major.
    """
    images = _parse_idx(images_path, _read(images_path), IDX_IMAGES_MAGIC, 3, limit)
    labels = _parse_idx(labels_path, _read(labels_path), IDX_LABELS_MAGIC, 1, limit)
    if images.shape[0] != labels.shape[0]:
        raise IDXFormatError(labels_path, f"{labels.shape[0]} labels for {images.shape[0]} images")
    x = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return Batch(x, labels.astype(np.int64))


def write_idx(path, array: np.ndarray):
    """Write a uint8 array as IDX (images if 3-D, labels if 1-D)."""
    array = np.asarray(array, dtype=np.uint8)
    magic = {3: IDX_IMAGES_MAGIC, 1: IDX_LABELS_MAGIC}[array.ndim]
    with open(path, "wb") as f:
        f.write(struct.pack(">I" + "I" * array.ndim, magic, *array.shape))
        f.write(array.tobytes())


def find_mnist(root) -> Optional[dict[str, Path]]:
    """Paths of the four canonical files under ``root`` (plain or .gz), or None."""
    if root is None:
        return None
    root = Path(root)
    out = {}
    for key, stem in MNIST_FILES.items():
        for cand in (root / stem, root / (stem + ".gz"), root / stem.replace("-idx", ".idx")):
            if cand.exists():
                out[key] = cand
                break
        else:
            return None
    return out


def mnist_splits(root, n_train: int, n_val: int, n_test: int) -> tuple[Batch, Batch, Batch]:
    """Train and validation come from the training file in file order; test from t10k."""
    files = find_mnist(root)
    if files is None:
        raise FileNotFoundError(f"MNIST IDX files not found under {root!s}")
    train = load_mnist_idx(files["train_images"], files["train_labels"], n_train + n_val)
    if len(train) < n_train + n_val:
        raise ValueError(f"training file has {len(train)} samples, need {n_train + n_val}")
    test = load_mnist_idx(files["test_images"], files["test_labels"], n_test)
    return train.subset(slice(0, n_train)), train.subset(slice(n_train, n_train + n_val)), test


def mnist_dir_from_env() -> Optional[str]:
    return os.environ.get("ADVREX_MNIST_DIR")


def synthetic_dataset(kind: str, n: int, noise: float, seed: int) -> Batch:
    """Two-class 2-D data rescaled into [0, 1]^2.

    ``gaussians``: two isotropic blobs at (-1, 0) and (1, 0) with std ``noise``.
    ``moons``: the classic interleaved half circles with Gaussian jitter.
    """
    if n < 2:
        raise ValueError("n must be >= 2")
    if kind not in ("gaussians", "moons"):
        raise ValueError(f"unknown synthetic kind {kind!r}")
    rng = stream(seed, "synthetic-data")
    y = np.arange(n) % 2
    if kind == "gaussians":
        centers = np.where(y[:, None] == 0, [-1.0, 0.0], [1.0, 0.0])
        x = centers + noise * rng.standard_normal((n, 2))
        lo, hi = np.array([-2.0, -1.0]), np.array([2.0, 1.0])
    else:
        t = rng.uniform(0.0, np.pi, n)
        x = np.where(y[:, None] == 0,
                     np.stack([np.cos(t), np.sin(t)], axis=1),
                     np.stack([1.0 - np.cos(t), 0.5 - np.sin(t)], axis=1))
        x = x + noise * rng.standard_normal((n, 2))
        lo, hi = np.array([-1.5, -1.0]), np.array([2.5, 1.5])
    # fixed affine map, then clip the rare far-tail points
    x = np.clip((x - lo) / (hi - lo), 0.0, 1.0)
    return Batch(x, y)


def digits_splits(n_train: int, n_val: int, n_test: int, seed: int) -> tuple[Batch, Batch, Batch]:
    """sklearn's bundled 8x8 handwritten digits, scaled to [0, 1] and split after a seeded shuffle."""
    from sklearn.datasets import load_digits

    d = load_digits()
    x = d.data.astype(np.float64) / 16.0
    y = d.target.astype(np.int64)
    if n_train + n_val + n_test > len(y):
        raise ValueError(f"digits has {len(y)} samples, asked for {n_train + n_val + n_test}")
    order = stream(seed, "subset").permutation(len(y))
    parts, start = [], 0
    for size in (n_train, n_val, n_test):
        idx = order[start:start + size]
        parts.append(Batch(x[idx], y[idx]))
        start += size
    return tuple(parts)
