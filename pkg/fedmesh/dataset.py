"""
This module loads MNIST/FashionMNIST from local IDX files, generates synthetic
Gaussian-cluster data, and splits data into a held-out test set and per-node
IID shards. Feature values are always scaled into [0, 1].
"""

import gzip
import logging
import os
import struct
from dataclasses import dataclass

import numpy as np

from . import constants
from .errors import DatasetError, IdxFormatError, TruncationError
from .scenario import DataSource

logger = logging.getLogger(__name__)

IDX_UNSIGNED_BYTE = 0x08


@dataclass(frozen=True, eq=False)
class Dataset:
    """
    Attributes:
        features (np.ndarray): float64 matrix, n_samples x n_features, in [0, 1].
        labels (np.ndarray): int64 vector with values in [0, n_classes).
        n_classes (int): Number of classes.
    """

    features: np.ndarray
    labels: np.ndarray
    n_classes: int

    def __post_init__(self):
        if self.features.ndim != 2:
            raise DatasetError("features must be a 2-D matrix")
        if self.features.shape[0] != self.labels.shape[0]:
            raise DatasetError(
                f"{self.features.shape[0]} feature rows but {self.labels.shape[0]} labels"
            )
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise DatasetError(f"labels must lie in [0, {self.n_classes})")
        self.features.setflags(write=False)
        self.labels.setflags(write=False)

    def __len__(self):
        return int(self.labels.shape[0])

    @property
    def n_features(self):
        return int(self.features.shape[1])

    def subset(self, indices):
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(
            features=self.features[indices],
            labels=self.labels[indices],
            n_classes=self.n_classes,
        )

    def label_histogram(self):
        return np.bincount(self.labels, minlength=self.n_classes)


@dataclass(frozen=True)
class Partition:
    """Per-node lists of training-sample indices."""

    shards: tuple
    seed: int

    def sizes(self):
        return [len(shard) for shard in self.shards]


def parse_idx(buffer):
    """
    Decodes one IDX buffer. A 1-dimensional file is a label vector (int64);
    anything with more dimensions is an image tensor, returned flattened per
    sample as float64 scaled by 1/255.
    """
    buffer = bytes(buffer)
    if len(buffer) < 4:
        raise TruncationError("IDX buffer shorter than its 4-byte magic")
    if buffer[0] != 0 or buffer[1] != 0:
        raise IdxFormatError(f"bad IDX magic {buffer[:4].hex()}")
    type_code, n_dims = buffer[2], buffer[3]
    if type_code != IDX_UNSIGNED_BYTE:
        raise IdxFormatError(f"unsupported IDX element type 0x{type_code:02x}")
    if n_dims < 1:
        raise IdxFormatError("IDX file declares no dimensions")
    header_end = 4 + 4 * n_dims
    if len(buffer) < header_end:
        raise TruncationError(f"IDX header declares {n_dims} dims but the buffer ends early")
    dims = struct.unpack(f">{n_dims}I", buffer[4:header_end])
    expected = int(np.prod(dims, dtype=np.int64))
    payload = buffer[header_end:]
    if len(payload) < expected:
        raise TruncationError(
            f"IDX payload has {len(payload)} bytes, dimensions {dims} need {expected}"
        )
    values = np.frombuffer(payload, dtype=np.uint8, count=expected)
    if n_dims == 1:
        return values.astype(np.int64)
    per_sample = int(np.prod(dims[1:], dtype=np.int64))
    return values.reshape(dims[0], per_sample).astype(np.float64) / 255.0


def _read_idx_file(data_dir, name):
    path = os.path.join(data_dir, name)
    if os.path.exists(path):
        with open(path, "rb") as handle:
            return parse_idx(handle.read())
    if os.path.exists(path + ".gz"):
        with gzip.open(path + ".gz", "rb") as handle:
            return parse_idx(handle.read())
    raise DatasetError(f"missing IDX file {path}")


def load_idx_dataset(data_dir):
    """Loads the four standard MNIST-layout files; returns (train, test)."""
    files = constants.MNIST_FILES
    train_images = _read_idx_file(data_dir, files["train_images"])
    train_labels = _read_idx_file(data_dir, files["train_labels"])
    test_images = _read_idx_file(data_dir, files["test_images"])
    test_labels = _read_idx_file(data_dir, files["test_labels"])
    n_classes = int(max(train_labels.max(), test_labels.max())) + 1
    n_classes = max(n_classes, constants.IMAGE_CLASSES)
    train = Dataset(train_images, train_labels, n_classes)
    test = Dataset(test_images, test_labels, n_classes)
    logger.info(
        "loaded idx dataset dir=%s train=%d test=%d features=%d",
        data_dir,
        len(train),
        len(test),
        train.n_features,
    )
    return train, test


def gen_synthetic(spec, seed):
    """
    Balanced Gaussian class clusters: one center per class drawn uniformly in
    [0,1]^d, samples = center + N(0, stddev^2), clipped to [0, 1].
    """
    if spec.n_classes < 2:
        raise DatasetError("synthetic data needs at least 2 classes")
    if spec.n_features < 1:
        raise DatasetError("synthetic data needs at least 1 feature")
    rng = np.random.default_rng(seed)
    centers = rng.uniform(0.0, 1.0, size=(spec.n_classes, spec.n_features))
    labels = np.arange(spec.n_samples, dtype=np.int64) % spec.n_classes
    noise = rng.normal(0.0, spec.cluster_stddev, size=(spec.n_samples, spec.n_features))
    features = np.clip(centers[labels] + noise, 0.0, 1.0)
    return Dataset(features=features, labels=labels, n_classes=spec.n_classes)


def partition_iid(n_train, n_nodes, seed):
    """
    Seeded uniform shuffle of 0..n_train-1 split into n_nodes contiguous
    chunks whose sizes differ by at most one.
    """
    if n_nodes < 1:
        raise DatasetError("cannot partition across zero nodes")
    if n_train < n_nodes:
        raise DatasetError(f"{n_train} samples cannot fill {n_nodes} shards")
    order = np.random.default_rng(seed).permutation(n_train)
    shards = tuple(tuple(int(i) for i in chunk) for chunk in np.array_split(order, n_nodes))
    return Partition(shards=shards, seed=seed)


def _test_quotas(counts, n_test):
    """Per-class test counts summing to n_test, at least one sample per side where possible."""
    fraction = n_test / counts.sum()
    exact = counts * fraction
    quotas = np.floor(exact).astype(np.int64)
    low = np.where(counts >= 2, 1, 0)
    high = np.where(counts >= 2, counts - 1, counts)
    quotas = np.clip(quotas, low, high)
    remainder = exact - np.floor(exact)

    diff = n_test - int(quotas.sum())
    while diff != 0:
        changed = False
        if diff > 0:
            order = sorted(range(len(counts)), key=lambda c: (-remainder[c], c))
            for c in order:
                if diff and quotas[c] < high[c]:
                    quotas[c] += 1
                    diff -= 1
                    changed = True
        else:
            order = sorted(range(len(counts)), key=lambda c: (remainder[c], c))
            for c in order:
                if diff and quotas[c] > low[c]:
                    quotas[c] -= 1
                    diff += 1
                    changed = True
        if not changed:
            break
    return quotas


def split_train_test(dataset, test_fraction, seed):
    """
    Seeded stratified split. Every class with at least two samples appears
    on both sides; the test side has round(test_fraction * n) samples.
    """
    if not 0.0 < test_fraction < 1.0:
        raise DatasetError(f"test_fraction must be in (0, 1), got {test_fraction}")
    n = len(dataset)
    if n == 0:
        raise DatasetError("cannot split an empty dataset")
    if n < 2:
        raise DatasetError("need at least two samples to split")
    rng = np.random.default_rng(seed)
    n_test = min(max(int(round(test_fraction * n)), 1), n - 1)
    counts = dataset.label_histogram()
    quotas = _test_quotas(counts, n_test)

    test_indices = []
    train_indices = []
    for label in range(dataset.n_classes):
        members = np.flatnonzero(dataset.labels == label)
        members = members[rng.permutation(len(members))]
        test_indices.append(members[: quotas[label]])
        train_indices.append(members[quotas[label]:])
    test_indices = np.concatenate(test_indices)
    train_indices = np.concatenate(train_indices)
    test_indices = test_indices[rng.permutation(len(test_indices))]
    train_indices = train_indices[rng.permutation(len(train_indices))]
    return dataset.subset(train_indices), dataset.subset(test_indices)


def load_scenario_data(cfg):
    """
    Train/test data for a scenario. Image datasets use their own test files;
    synthetic data is generated from the master seed and split.
    """
    spec = cfg.dataset
    if spec.source is DataSource.SYNTHETIC:
        full = gen_synthetic(spec.synthetic, cfg.master_seed)
        return split_train_test(full, spec.test_fraction, cfg.master_seed)
    return load_idx_dataset(spec.data_dir)


def save_dataset(dataset, path):
    np.savez_compressed(
        path, features=dataset.features, labels=dataset.labels, n_classes=dataset.n_classes
    )


def load_dataset(path):
    with np.load(path) as archive:
        return Dataset(
            features=np.array(archive["features"], dtype=np.float64),
            labels=np.array(archive["labels"], dtype=np.int64),
            n_classes=int(archive["n_classes"]),
        )


def inspect_idx_dir(data_dir):
    """
    Summarizes an MNIST-layout directory. Returns (summary, problems) where
    problems maps a file name to its diagnostic.
    """
    summary = {}
    problems = {}
    for key, name in constants.MNIST_FILES.items():
        try:
            summary[key] = _read_idx_file(data_dir, name)
        except (DatasetError, TruncationError, OSError) as exc:
            problems[name] = str(exc)
    return summary, problems
