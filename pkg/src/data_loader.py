import gzip
import os
import struct
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from errors import ConfigError, FormatError
from prng import Xoshiro256

IDX_DTYPES = {
    0x08: np.dtype("u1"),
    0x09: np.dtype("i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}


@dataclass
class Dataset:
    inputs: np.ndarray  # [n, feature_dim]
    labels: np.ndarray  # [n]
    num_classes: int

    def __len__(self):
        return int(self.labels.shape[0])

    @property
    def feature_dim(self) -> int:
        return int(self.inputs.shape[1])

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.inputs[idx], self.labels[idx], self.num_classes)


def synth_dataset(
    num_classes: int,
    per_class: int,
    feature_dim: int,
    spread: float,
    seed: int,
    separation: float = 3.0,
) -> Dataset:
    """Gaussian clusters around random unit directions scaled by `separation`; class-major order"""
    if spread < 0:
        raise ConfigError(f"cluster spread must be >= 0, got {spread}", key="spread")
    rng = Xoshiro256(seed)
    inputs = []
    labels = []
    for c in range(num_classes):
        direction = rng.normal((feature_dim,))
        direction *= separation / max(np.sqrt((direction * direction).sum()), 1e-12)
        noise = rng.normal((per_class, feature_dim), spread) if spread > 0 else np.zeros((per_class, feature_dim))
        inputs.append(direction[None, :] + noise)
        labels.append(np.full(per_class, c, dtype=np.int64))
    if num_classes == 0:
        return Dataset(np.zeros((0, feature_dim)), np.zeros(0, dtype=np.int64), 0)
    return Dataset(np.concatenate(inputs), np.concatenate(labels), num_classes)


def _read_bytes(path: str) -> bytes:
    opener = gzip.open if path.endswith(".gz") else open
    with opener(path, "rb") as f:
        return f.read()


def read_idx(path: str) -> np.ndarray:
    """Raw array from an IDX container (big-endian magic, uint32 dims, payload)"""
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise FormatError(f"{path}: truncated magic number", offset=len(raw))
    zero1, zero2, type_code, ndim = struct.unpack(">BBBB", raw[:4])
    if zero1 != 0 or zero2 != 0 or type_code not in IDX_DTYPES:
        raise FormatError(f"{path}: bad magic 0x{raw[:4].hex()}", offset=0)
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise FormatError(f"{path}: truncated dimension table", offset=len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header_end])
    dtype = IDX_DTYPES[type_code]
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    payload = len(raw) - header_end
    if payload != expected:
        raise FormatError(f"{path}: payload has {payload} bytes but dims {list(dims)} need {expected}", offset=header_end)
    return np.frombuffer(raw, dtype=dtype, offset=header_end).reshape(dims)


def idx_load(images_path: str, labels_path: str) -> Dataset:
    """MNIST-style image/label pair; byte pixels are scaled to [0, 1]"""
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.shape[0] != labels.reshape(-1).shape[0]:
        raise FormatError(f"{images.shape[0]} images but {labels.size} labels", offset=4)
    inputs = images.reshape(images.shape[0], -1).astype(np.float64)
    if images.dtype == np.uint8:
        inputs /= 255.0
    labels = labels.reshape(-1).astype(np.int64)
    num_classes = int(labels.max()) + 1 if labels.size else 0
    return Dataset(inputs, labels, num_classes)


def split_holdout(dataset: Dataset, test_ratio: float, rng: Xoshiro256) -> Tuple[Dataset, Dataset]:
    """Per class, floor(test_ratio * n) samples go to the test split"""
    if not 0.0 <= test_ratio < 1.0:
        raise ConfigError(f"must lie in [0, 1), got {test_ratio}", key="test_ratio")
    test_idx = []
    for c in range(dataset.num_classes):
        members = [int(i) for i in np.flatnonzero(dataset.labels == c)]
        rng.shuffle(members)
        test_idx.extend(members[: int(len(members) * test_ratio)])
    is_test = np.zeros(len(dataset), dtype=bool)
    is_test[test_idx] = True
    return dataset.subset(np.flatnonzero(~is_test)), dataset.subset(np.flatnonzero(is_test))


def load_dataset(cfg, seed: int, verbose: bool = True) -> Dataset:
    """Builds the dataset named by cfg.dataset ('synthetic' or 'idx')"""
    if cfg.dataset == "synthetic":
        if verbose:
            print(f"📊 Generating synthetic clusters: {cfg.num_classes} classes x {cfg.samples_per_class} samples")
        return synth_dataset(cfg.num_classes, cfg.samples_per_class, cfg.encoder.feature_dim,
                             cfg.spread, seed, cfg.separation)
    if cfg.dataset == "idx":
        for key in ("idx_images", "idx_labels"):
            if not os.path.exists(getattr(cfg, key)):
                raise ConfigError(f"file not found: {getattr(cfg, key)}", key=key)
        if verbose:
            print(f"📊 Loading IDX data from {cfg.idx_images}")
        dataset = idx_load(cfg.idx_images, cfg.idx_labels)
        if dataset.num_classes > cfg.num_classes:
            raise ConfigError(f"data has {dataset.num_classes} classes but num_classes = {cfg.num_classes}", key="num_classes")
        dataset.num_classes = cfg.num_classes
        return dataset
    raise ConfigError(f"unknown dataset '{cfg.dataset}'. Supported: synthetic, idx", key="dataset")
