import copy
import os
import socket

import numpy as np
import pytest

from fedmesh.dataset import Dataset
from fedmesh.scenario import ModelSpec, scenario_from_dict

MNIST_DIR = os.environ.get("FEDMESH_MNIST_DIR", "")


def participants(n, base=7100):
    return [
        {
            "node_id": k,
            "host": "127.0.0.1",
            "config_port": base + k,
            "peer_port": base + 100 + k,
            "metrics_endpoint": "http://127.0.0.1:7000",
        }
        for k in range(n)
    ]


def synthetic_document(
    kind="fully",
    n=4,
    n_samples=800,
    n_features=20,
    n_classes=4,
    stddev=0.05,
    rounds=3,
    seed=1,
    **overrides,
):
    document = {
        "scenario_name": f"{kind}_test",
        "participants": participants(n),
        "topology": {"kind": kind, "seed": seed},
        "dataset": {
            "source": "synthetic",
            "synthetic": {
                "n_samples": n_samples,
                "n_features": n_features,
                "n_classes": n_classes,
                "cluster_stddev": stddev,
            },
        },
        "model": {"input_dim": n_features, "hidden_dims": [32], "output_dim": n_classes},
        "rounds": rounds,
        "learning_rate": 0.1,
        "batch_size": 32,
        "metric_interval_ms": 200,
        "master_seed": seed,
        "neighbor_timeout_s": 30,
        "connect_timeout_s": 15,
    }
    document.update(overrides)
    return document


@pytest.fixture
def scenario_document():
    """A valid 4-node fully connected synthetic scenario as a plain dict."""
    return copy.deepcopy(synthetic_document())


@pytest.fixture
def synthetic_scenario():
    return scenario_from_dict(synthetic_document())


@pytest.fixture
def make_scenario():
    def build(**kwargs):
        return scenario_from_dict(synthetic_document(**kwargs))

    return build


@pytest.fixture
def small_arch():
    return ModelSpec(input_dim=10, hidden_dims=(4,), output_dim=3)


@pytest.fixture
def tiny_dataset():
    rng = np.random.default_rng(3)
    features = rng.uniform(0.0, 1.0, size=(40, 10))
    labels = np.arange(40, dtype=np.int64) % 3
    return Dataset(features=features, labels=labels, n_classes=3)


@pytest.fixture
def free_port():
    with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as sock:
        sock.bind(("127.0.0.1", 0))
        return sock.getsockname()[1]


@pytest.fixture
def mnist_dir():
    required = ["train-images-idx3-ubyte", "train-labels-idx1-ubyte"]
    present = MNIST_DIR and all(
        os.path.exists(os.path.join(MNIST_DIR, name))
        or os.path.exists(os.path.join(MNIST_DIR, name + ".gz"))
        for name in required
    )
    if not present:
        pytest.skip("MNIST IDX files not available (set FEDMESH_MNIST_DIR)")
    return MNIST_DIR
