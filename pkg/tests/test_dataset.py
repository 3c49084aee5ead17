import gzip
import os
import struct

import numpy as np
import pytest
from pydantic import ValidationError

from fedmesh.dataset import (
    Dataset,
    gen_synthetic,
    inspect_idx_dir,
    load_dataset,
    load_idx_dataset,
    parse_idx,
    partition_iid,
    save_dataset,
    split_train_test,
)
from fedmesh.errors import DatasetError, IdxFormatError, TruncationError
from fedmesh.scenario import SyntheticSpec


def idx_bytes(dims, payload):
    header = bytes([0, 0, 0x08, len(dims)]) + struct.pack(f">{len(dims)}I", *dims)
    return header + bytes(payload)


def test_parse_idx_label_vector():
    labels = parse_idx(bytes.fromhex("00000801") + struct.pack(">I", 3) + bytes([1, 2, 3]))
    assert labels.dtype == np.int64
    assert labels.tolist() == [1, 2, 3]


def test_parse_idx_image_is_flattened_and_scaled():
    images = parse_idx(idx_bytes((1, 2, 2), [0x00, 0xFF, 0x00, 0xFF]))
    assert images.shape == (1, 4)
    assert images[0].tolist() == [0.0, 1.0, 0.0, 1.0]


def test_parse_idx_truncated_payload():
    with pytest.raises(TruncationError):
        parse_idx(idx_bytes((2, 2, 2), [1, 2, 3, 4, 5]))


def test_parse_idx_truncated_header():
    with pytest.raises(TruncationError):
        parse_idx(bytes([0, 0, 8, 3, 0, 0]))


@pytest.mark.parametrize("magic", ["01000801", "00000d01"])
def test_parse_idx_bad_magic(magic):
    with pytest.raises(IdxFormatError):
        parse_idx(bytes.fromhex(magic) + struct.pack(">I", 1) + b"\x01")


def test_load_idx_dataset_reads_gzipped_files(tmp_path):
    rng = np.random.default_rng(0)
    files = {
        "train-images-idx3-ubyte": idx_bytes((6, 2, 2), rng.integers(0, 256, 24)),
        "train-labels-idx1-ubyte": idx_bytes((6,), [0, 1, 2, 3, 4, 9]),
        "t10k-images-idx3-ubyte": idx_bytes((2, 2, 2), rng.integers(0, 256, 8)),
        "t10k-labels-idx1-ubyte": idx_bytes((2,), [5, 6]),
    }
    for name, data in files.items():
        with gzip.open(os.path.join(tmp_path, name + ".gz"), "wb") as handle:
            handle.write(data)
    train, test = load_idx_dataset(str(tmp_path))
    assert (len(train), len(test)) == (6, 2)
    assert train.n_features == 4
    assert train.n_classes == 10
    assert train.features.max() <= 1.0


def test_inspect_empty_dir_reports_every_file(tmp_path):
    summary, problems = inspect_idx_dir(str(tmp_path))
    assert summary == {}
    assert len(problems) == 4


def test_gen_synthetic_is_separable_by_nearest_centroid():
    spec = SyntheticSpec(n_samples=1000, n_features=10, n_classes=2, cluster_stddev=0.01)
    data = gen_synthetic(spec, seed=7)
    centroids = np.stack([data.features[data.labels == c].mean(axis=0) for c in range(2)])
    distances = ((data.features[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    accuracy = float((distances.argmin(axis=1) == data.labels).mean())
    assert accuracy >= 0.99


def test_gen_synthetic_zero_stddev_collapses_to_centers():
    spec = SyntheticSpec(n_samples=30, n_features=5, n_classes=3, cluster_stddev=0.0)
    data = gen_synthetic(spec, seed=11)
    for c in range(3):
        members = data.features[data.labels == c]
        assert np.all(members == members[0])


def test_gen_synthetic_is_deterministic_and_balanced():
    spec = SyntheticSpec(n_samples=400, n_features=20, n_classes=4, cluster_stddev=0.05)
    first = gen_synthetic(spec, seed=3)
    second = gen_synthetic(spec, seed=3)
    assert np.array_equal(first.features, second.features)
    assert np.array_equal(first.labels, second.labels)
    assert first.label_histogram().tolist() == [100, 100, 100, 100]
    assert first.features.min() >= 0.0 and first.features.max() <= 1.0


def test_synthetic_spec_needs_two_classes():
    with pytest.raises(ValidationError):
        SyntheticSpec(n_samples=10, n_features=2, n_classes=1, cluster_stddev=0.1)
    unchecked = SyntheticSpec.model_construct(n_samples=10, n_features=2, n_classes=1, cluster_stddev=0.1)
    with pytest.raises(DatasetError):
        gen_synthetic(unchecked, 0)


def test_partition_mnist_scale_into_four_equal_shards():
    partition = partition_iid(60000, 4, seed=5)
    assert partition.sizes() == [15000] * 4
    combined = [i for shard in partition.shards for i in shard]
    assert sorted(combined) == list(range(60000))


def test_partition_near_equal_split():
    assert sorted(partition_iid(5, 2, seed=1).sizes(), reverse=True) == [3, 2]


def test_partition_is_deterministic():
    assert partition_iid(100, 3, seed=9).shards == partition_iid(100, 3, seed=9).shards
    assert partition_iid(100, 3, seed=9).shards != partition_iid(100, 3, seed=10).shards


def test_partition_zero_nodes():
    with pytest.raises(DatasetError):
        partition_iid(10, 0, seed=0)


def test_partition_label_histograms_are_close_to_global():
    spec = SyntheticSpec(n_samples=4000, n_features=4, n_classes=4, cluster_stddev=0.1)
    data = gen_synthetic(spec, seed=2)
    partition = partition_iid(len(data), 4, seed=2)
    for shard in partition.shards:
        shares = data.subset(shard).label_histogram() / len(shard)
        assert np.all(np.abs(shares - 0.25) < 0.05)


def test_split_train_test_sizes(tiny_dataset):
    features = np.tile(tiny_dataset.features, (3, 1))[:100]
    labels = np.arange(100, dtype=np.int64) % 3
    data = Dataset(features=features, labels=labels, n_classes=3)
    train, test = split_train_test(data, 0.2, seed=4)
    assert (len(train), len(test)) == (80, 20)
    assert set(test.labels.tolist()) == {0, 1, 2}
    assert set(train.labels.tolist()) == {0, 1, 2}


def test_split_train_test_rejects_empty():
    empty = Dataset(features=np.zeros((0, 3)), labels=np.zeros(0, dtype=np.int64), n_classes=2)
    with pytest.raises(DatasetError):
        split_train_test(empty, 0.2, seed=0)


def test_saved_dataset_loads_back_equal(tmp_path, tiny_dataset):
    path = os.path.join(tmp_path, "tiny.npz")
    save_dataset(tiny_dataset, path)
    loaded = load_dataset(path)
    assert np.array_equal(loaded.features, tiny_dataset.features)
    assert np.array_equal(loaded.labels, tiny_dataset.labels)
    assert loaded.n_classes == 3


def test_dataset_rejects_out_of_range_labels():
    with pytest.raises(DatasetError):
        Dataset(features=np.zeros((2, 2)), labels=np.array([0, 5]), n_classes=2)
