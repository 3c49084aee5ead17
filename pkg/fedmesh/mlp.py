"""
A self-contained multi-layer perceptron on numpy: ReLU hidden layers, softmax
output, mean cross-entropy loss, backpropagation, minibatch SGD, macro-F1
evaluation, and the canonical byte layout of its parameters.

Parameters live in one flat float64 vector, layer-major: W1 (fan_in x fan_out,
row-major), b1, W2, b2, ...
"""

import hashlib
import json
import struct
import time
from dataclasses import dataclass

import numpy as np

from .errors import (
    DatasetError,
    IncompatibleArchitectureError,
    ShapeMismatchError,
    TruncationError,
)

PARAM_HEADER = struct.Struct("<QI")


def arch_digest(arch):
    """64-bit digest of an architecture, stable across processes."""
    canonical = json.dumps(arch.to_dict(), sort_keys=True, separators=(",", ":"))
    digest = hashlib.blake2b(canonical.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


@dataclass(frozen=True, eq=False)
class ModelParams:
    """
    Immutable parameter snapshot.

    Attributes:
        arch (ModelSpec): The architecture the values belong to.
        values (np.ndarray): Read-only flat float64 vector.
    """

    arch: object
    values: np.ndarray

    def __post_init__(self):
        expected = self.arch.param_count()
        if self.values.shape != (expected,):
            raise ShapeMismatchError(
                f"architecture needs {expected} values, got shape {self.values.shape}"
            )
        self.values.setflags(write=False)

    @property
    def arch_digest(self):
        return arch_digest(self.arch)

    def layers(self):
        """List of (W, b) views in layer order."""
        out = []
        offset = 0
        for fan_in, fan_out in self.arch.layer_shapes():
            weights = self.values[offset : offset + fan_in * fan_out].reshape(fan_in, fan_out)
            offset += fan_in * fan_out
            bias = self.values[offset : offset + fan_out]
            offset += fan_out
            out.append((weights, bias))
        return out

    def with_values(self, values):
        return ModelParams(arch=self.arch, values=np.ascontiguousarray(values, dtype=np.float64))

    def digest(self):
        """SHA-256 hex digest of the serialized parameters."""
        return hashlib.sha256(serialize_params(self)).hexdigest()


@dataclass(frozen=True)
class TrainReport:
    mean_loss: float
    samples_seen: int
    epoch_wall_ms: float


def init_model(arch, seed):
    """Weights uniform in +-sqrt(6 / fan_in), biases zero."""
    rng = np.random.default_rng(seed)
    chunks = []
    for fan_in, fan_out in arch.layer_shapes():
        bound = np.sqrt(6.0 / fan_in)
        chunks.append(rng.uniform(-bound, bound, size=fan_in * fan_out))
        chunks.append(np.zeros(fan_out))
    return ModelParams(arch=arch, values=np.concatenate(chunks))


def _check_batch(params, batch):
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[1] != params.arch.input_dim:
        raise ShapeMismatchError(
            f"batch shape {batch.shape} does not match input_dim {params.arch.input_dim}"
        )
    return batch


def _softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)


def _forward_pass(params, batch):
    """Pre-activations and activations of every layer; the last entry is logits."""
    activations = [batch]
    pre_activations = []
    layers = params.layers()
    current = batch
    for index, (weights, bias) in enumerate(layers):
        z = current @ weights + bias
        pre_activations.append(z)
        current = z if index == len(layers) - 1 else np.maximum(z, 0.0)
        activations.append(current)
    return pre_activations, activations


def forward(params, batch):
    """Class probabilities, one row per sample."""
    batch = _check_batch(params, batch)
    pre_activations, _ = _forward_pass(params, batch)
    return _softmax(pre_activations[-1])


def _check_labels(params, batch, labels):
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim != 1 or labels.shape[0] != batch.shape[0]:
        raise ShapeMismatchError(f"{batch.shape[0]} samples but labels of shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= params.arch.output_dim):
        raise ShapeMismatchError(f"labels must lie in [0, {params.arch.output_dim})")
    return labels


def loss(params, batch, labels):
    """Mean cross-entropy of the batch."""
    batch = _check_batch(params, batch)
    labels = _check_labels(params, batch, labels)
    logits = _forward_pass(params, batch)[0][-1]
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    return float(-log_probs[np.arange(len(labels)), labels].mean())


def gradient(params, batch, labels):
    """Gradient of the mean cross-entropy, in the flat parameter layout."""
    batch = _check_batch(params, batch)
    labels = _check_labels(params, batch, labels)
    pre_activations, activations = _forward_pass(params, batch)
    layers = params.layers()

    delta = _softmax(pre_activations[-1])
    delta[np.arange(len(labels)), labels] -= 1.0
    delta /= len(labels)

    grads = [None] * len(layers)
    for index in range(len(layers) - 1, -1, -1):
        weights, _ = layers[index]
        grads[index] = (activations[index].T @ delta, delta.sum(axis=0))
        if index > 0:
            delta = (delta @ weights.T) * (pre_activations[index - 1] > 0)

    flat = []
    for grad_w, grad_b in grads:
        flat.append(grad_w.ravel())
        flat.append(grad_b)
    return np.concatenate(flat)


def train_epochs(params, shard, epochs, lr, batch_size, seed):
    """
    Minibatch SGD over `shard` for `epochs` epochs with a seeded shuffle per
    epoch; the last short batch is included. Returns the new parameters and
    a TrainReport whose mean_loss is the sample-weighted mean of the batch
    losses seen before each step.
    """
    if len(shard) == 0:
        raise DatasetError("cannot train on an empty shard")
    rng = np.random.default_rng(seed)
    values = np.array(params.values, dtype=np.float64)
    current = params
    loss_total = 0.0
    started = time.perf_counter()
    n = len(shard)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            batch = shard.features[idx]
            labels = shard.labels[idx]
            loss_total += loss(current, batch, labels) * len(idx)
            values = values - lr * gradient(current, batch, labels)
            current = params.with_values(values)
    wall_ms = (time.perf_counter() - started) * 1000.0
    report = TrainReport(
        mean_loss=loss_total / (n * epochs),
        samples_seen=n * epochs,
        epoch_wall_ms=wall_ms / max(epochs, 1),
    )
    return current, report


def predict(params, features):
    """Argmax class per sample; ties resolve to the lowest class index."""
    return np.argmax(forward(params, features), axis=1)


def f1_scores(labels, predictions, n_classes):
    """Per-class F1 = 2TP / (2TP + FP + FN), 0 where undefined, and its macro mean."""
    labels = np.asarray(labels, dtype=np.int64)
    predictions = np.asarray(predictions, dtype=np.int64)
    true_positive = np.bincount(labels[labels == predictions], minlength=n_classes)
    predicted = np.bincount(predictions, minlength=n_classes)
    actual = np.bincount(labels, minlength=n_classes)
    denominator = predicted + actual
    per_class = np.zeros(n_classes)
    defined = denominator > 0
    per_class[defined] = 2.0 * true_positive[defined] / denominator[defined]
    return float(per_class.mean()), per_class


def evaluate(params, test):
    """Macro-F1 and per-class F1 on a labelled dataset."""
    if len(test) == 0:
        raise DatasetError("cannot evaluate on an empty test set")
    predictions = predict(params, test.features)
    return f1_scores(test.labels, predictions, params.arch.output_dim)


def serialize_params(params):
    """arch_digest (u64) | count (u32) | float64 values, all little-endian."""
    values = np.ascontiguousarray(params.values, dtype="<f8")
    return PARAM_HEADER.pack(params.arch_digest, values.size) + values.tobytes()


def payload_size(arch):
    return PARAM_HEADER.size + 8 * arch.param_count()


def deserialize_params(data, arch):
    """Inverse of serialize_params; `arch` is the architecture the receiver expects."""
    data = bytes(data)
    if len(data) < PARAM_HEADER.size:
        raise TruncationError(f"parameter payload of {len(data)} bytes has no header")
    digest, count = PARAM_HEADER.unpack_from(data)
    if digest != arch_digest(arch):
        raise IncompatibleArchitectureError(
            f"payload digest {digest:016x} does not match expected {arch_digest(arch):016x}"
        )
    body = data[PARAM_HEADER.size :]
    if len(body) != 8 * count or count != arch.param_count():
        raise TruncationError(
            f"payload declares {count} values in {len(body)} bytes; "
            f"architecture needs {arch.param_count()}"
        )
    values = np.frombuffer(body, dtype="<f8").astype(np.float64)
    return ModelParams(arch=arch, values=values)
