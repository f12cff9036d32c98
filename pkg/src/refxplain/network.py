"""Dense feed-forward ReLU regression networks.

Networks are plain containers of numpy arrays.  Everything that reads a
network (forward, gradients, metrics) is a pure function of it; training
returns a new network and never mutates its argument.
"""
from __future__ import annotations

import copy
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .errors import ConfigError, DivergenceError, InputShapeError, UndefinedMetricError

log = logging.getLogger(__name__)

RELU = "relu"
IDENTITY = "identity"
FREEZE_MODES = ("none", "top_biases", "all_weights_adjust_biases", "feature_extractor")
NET_FORMAT = "refxplain-net/1"


@dataclass
class DenseLayer:
    weights: np.ndarray  # (out, in)
    biases: np.ndarray  # (out,)
    activation: str = RELU

    def __post_init__(self):
        self.weights = np.array(self.weights, dtype=float, ndmin=2)
        self.biases = np.array(self.biases, dtype=float).reshape(-1)
        if self.activation not in (RELU, IDENTITY):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.biases.shape[0] != self.weights.shape[0]:
            raise InputShapeError(
                f"bias length {self.biases.shape[0]} != weight rows {self.weights.shape[0]}"
            )

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]


@dataclass
class ActivationTrace:
    """Per-layer pre-activations ``z`` and post-activations ``a``.

    ``activations[0]`` is the input itself, so ``activations`` has one more
    entry than ``preactivations``.
    """

    preactivations: list[np.ndarray]
    activations: list[np.ndarray]

    @property
    def y(self) -> float:
        return float(self.preactivations[-1][0])

    @property
    def hidden(self) -> np.ndarray:
        """Post-activations of the last hidden layer."""
        return self.activations[-2]


@dataclass
class DenseNetwork:
    layers: list[DenseLayer]
    output_unit: str = ""
    metadata: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if not self.layers:
            raise InputShapeError("a network needs at least one layer")
        for k, (lower, upper) in enumerate(zip(self.layers, self.layers[1:])):
            if lower.out_dim != upper.in_dim:
                raise InputShapeError(
                    f"layer {k} has {lower.out_dim} outputs but layer {k + 1} expects {upper.in_dim}"
                )
        top = self.layers[-1]
        if top.out_dim != 1:
            raise InputShapeError(
                f"only single-output regression networks are supported (got {top.out_dim} outputs)"
            )
        if top.activation != IDENTITY:
            raise InputShapeError("the output layer must be linear (identity activation)")
        for k, layer in enumerate(self.layers[:-1]):
            if layer.activation != RELU:
                raise InputShapeError(f"hidden layer {k} must use ReLU")
        for k, layer in enumerate(self.layers):
            if not (np.all(np.isfinite(layer.weights)) and np.all(np.isfinite(layer.biases))):
                raise ValueError(f"layer {k} contains non-finite parameters")

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def hidden_dims(self) -> list[int]:
        return [layer.out_dim for layer in self.layers[:-1]]

    def copy(self) -> DenseNetwork:
        return copy.deepcopy(self)

    def _check_input(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.shape[-1] != self.input_dim:
            raise InputShapeError(f"expected {self.input_dim} input features, got {X.shape[-1]}")
        return X

    def predict(self, X) -> np.ndarray:
        """Batched prediction: ``(n, d) -> (n,)``; a single vector gives a 0-d array."""
        X = self._check_input(X)
        a = X
        for layer in self.layers:
            z = a @ layer.weights.T + layer.biases
            a = np.maximum(z, 0.0) if layer.activation == RELU else z
        return a[..., 0]

    __call__ = predict

    def gradient(self, X) -> np.ndarray:
        """Input gradient of the output for a batch ``(n, d)`` (or one vector)."""
        X = self._check_input(X)
        single = X.ndim == 1
        A = np.atleast_2d(X)
        masks = []
        for layer in self.layers[:-1]:
            z = A @ layer.weights.T + layer.biases
            mask = z > 0.0
            masks.append(mask)
            A = np.where(mask, z, 0.0)
        delta = np.broadcast_to(self.layers[-1].weights, (A.shape[0], self.layers[-1].in_dim))
        for layer, mask in zip(reversed(self.layers[:-1]), reversed(masks)):
            delta = (delta * mask) @ layer.weights
        return delta[0] if single else delta


def forward(net: DenseNetwork, x) -> ActivationTrace:
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise InputShapeError("forward expects a single feature vector")
    if not np.all(np.isfinite(x)):
        raise InputShapeError("input contains non-finite values")
    x = net._check_input(x)
    zs, acts = [], [x]
    a = x
    for layer in net.layers:
        z = layer.weights @ a + layer.biases
        a = np.maximum(z, 0.0) if layer.activation == RELU else z
        zs.append(z)
        acts.append(a)
    return ActivationTrace(zs, acts)


def backprop_gradient(net: DenseNetwork, x) -> np.ndarray:
    """dy/dx with the ReLU subgradient taken as 0 at z == 0."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise InputShapeError("backprop_gradient expects a single feature vector")
    return net.gradient(x)


def init_network(
    input_dim: int,
    hidden: tuple[int, ...] | list[int] = (256,),
    seed: int = 0,
    output_unit: str = "",
) -> DenseNetwork:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    dims = [input_dim, *hidden, 1]
    layers = []
    for k, (fan_in, fan_out) in enumerate(zip(dims, dims[1:])):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        W = rng.uniform(-limit, limit, size=(fan_out, fan_in))
        act = IDENTITY if k == len(dims) - 2 else RELU
        layers.append(DenseLayer(W, np.zeros(fan_out), act))
    return DenseNetwork(layers, output_unit=output_unit)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-2
    epochs: int = 500
    batch_size: int = 32
    seed: int = 0
    freeze: str = "none"

    def validate(self, n: int | None = None) -> None:
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if int(self.epochs) != self.epochs or self.epochs < 1:
            raise ConfigError("epochs must be a positive integer")
        if self.batch_size < 1 or (n is not None and self.batch_size > n):
            raise ConfigError(f"batch_size must lie in [1, {n}]")
        if self.freeze not in FREEZE_MODES:
            raise ConfigError(f"freeze must be one of {FREEZE_MODES}")


def _trainable_masks(net: DenseNetwork, freeze: str) -> list[tuple[bool, bool]]:
    """(train weights, train biases) per layer."""
    n = len(net.layers)
    if freeze == "none":
        return [(True, True)] * n
    if freeze == "top_biases":
        return [(True, True)] * (n - 1) + [(True, False)]
    if freeze == "all_weights_adjust_biases":
        return [(False, True)] * n
    if freeze == "feature_extractor":
        return [(False, False)] * (n - 1) + [(True, True)]
    raise ConfigError(f"unknown freeze mode {freeze!r}")


def mse(net: DenseNetwork, X: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean((net.predict(X) - y) ** 2))


def r_squared_arrays(pred: np.ndarray, y: np.ndarray) -> float:
    y = np.asarray(y, dtype=float)
    if y.size == 0:
        raise UndefinedMetricError("R² of an empty dataset is undefined")
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0.0:
        raise UndefinedMetricError("R² is undefined for constant targets")
    return 1.0 - float(np.sum((y - pred) ** 2)) / ss_tot


def r_squared(net: DenseNetwork, data) -> float:
    return r_squared_arrays(net.predict(data.features), data.targets)


def sgd_fit(
    net: DenseNetwork,
    X: np.ndarray,
    y: np.ndarray,
    cfg: TrainConfig,
    sample_weight: np.ndarray | None = None,
    stop_mse: float | None = None,
) -> tuple[DenseNetwork, list[float]]:
    """Minibatch SGD on the (optionally masked) squared error.

    Rows with zero ``sample_weight`` are dropped up front, which is how the
    band indicator of retraining is applied.  Training stops early once an
    epoch's mean loss is at most ``stop_mse``.  Returns a trained copy and the
    per-epoch mean training loss.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if sample_weight is not None:
        keep = np.asarray(sample_weight) > 0
        X, y = X[keep], y[keep]
    n = X.shape[0]
    cfg.validate(n)
    net = net.copy()
    rng = np.random.default_rng(cfg.seed)
    masks = _trainable_masks(net, cfg.freeze)
    Ws = [layer.weights for layer in net.layers]
    bs = [layer.biases for layer in net.layers]
    n_hidden = len(net.layers) - 1
    lr = cfg.learning_rate
    history = []
    # divergence surfaces as DivergenceError below, not as numpy warnings
    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(int(cfg.epochs)):
            order = rng.permutation(n)
            total = 0.0
            for start in range(0, n, cfg.batch_size):
                idx = order[start : start + cfg.batch_size]
                A = X[idx]
                acts = [A]
                for k in range(n_hidden):
                    A = np.maximum(A @ Ws[k].T + bs[k], 0.0)
                    acts.append(A)
                out = A @ Ws[-1][0] + bs[-1][0]
                err = out - y[idx]
                total += float(err @ err)
                delta = (2.0 / len(idx)) * err[:, None]
                for k in range(n_hidden, -1, -1):
                    below = acts[k]
                    grad_W = delta.T @ below
                    grad_b = delta.sum(axis=0)
                    if k > 0:
                        delta = (delta @ Ws[k]) * (below > 0.0)
                    train_w, train_b = masks[k]
                    if train_w:
                        Ws[k] -= lr * grad_W
                    if train_b:
                        bs[k] -= lr * grad_b
            loss = total / n
            if not np.isfinite(loss):
                raise DivergenceError(epoch + 1)
            history.append(loss)
            if stop_mse is not None and loss <= stop_mse:
                break
    return net, history


def train(net: DenseNetwork, data, cfg: TrainConfig) -> tuple[DenseNetwork, dict[str, Any]]:
    trained, history = sgd_fit(net, data.features, data.targets, cfg)
    metrics = {
        "train_mse": mse(trained, data.features, data.targets),
        "r2": r_squared(trained, data),
        "epochs": int(cfg.epochs),
        "loss_history": history,
    }
    log.info("trained %d epochs: mse=%.6g r2=%.4f", cfg.epochs, metrics["train_mse"], metrics["r2"])
    return trained, metrics


def build_max_network() -> DenseNetwork:
    """max(x1, x2) on the nonnegative quadrant as three ReLU units.

    Hidden units compute (x1+x2)+, (x1-x2)+ and (x2-x1)+; the output
    averages them with weight 1/2 each.
    """
    hidden = DenseLayer(np.array([[1.0, 1.0], [1.0, -1.0], [-1.0, 1.0]]), np.zeros(3), RELU)
    top = DenseLayer(np.array([[0.5, 0.5, 0.5]]), np.zeros(1), IDENTITY)
    return DenseNetwork([hidden, top], output_unit="monetary units")


def rescale_to_original_units(net: DenseNetwork, scaling, unit: str | None = None) -> DenseNetwork:
    """Fold the inverse of a [0, 1] target scaling into the output layer."""
    scale = float(scaling.t_max - scaling.t_min)
    offset = float(scaling.t_min)
    if scale == 0.0:
        raise ConfigError("target scaling has zero range")
    out = net.copy()
    top = out.layers[-1]
    top.weights = top.weights * scale
    top.biases = top.biases * scale + offset
    if unit is not None:
        out.output_unit = unit
    return out


def strip_biases(net: DenseNetwork) -> DenseNetwork:
    out = net.copy()
    for layer in out.layers:
        layer.biases = np.zeros_like(layer.biases)
    return out


def random_network(
    input_dim: int,
    hidden: tuple[int, ...] | list[int],
    rng: np.random.Generator,
    bias_scale: float = 0.5,
) -> DenseNetwork:
    """Gaussian random network; used by self-checks and tests."""
    dims = [input_dim, *hidden, 1]
    layers = []
    for k, (fan_in, fan_out) in enumerate(zip(dims, dims[1:])):
        W = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_out, fan_in))
        b = rng.normal(0.0, bias_scale, size=fan_out) if bias_scale else np.zeros(fan_out)
        act = IDENTITY if k == len(dims) - 2 else RELU
        layers.append(DenseLayer(W, b, act))
    return DenseNetwork(layers)


# -- serialization -----------------------------------------------------------


def network_to_dict(net: DenseNetwork) -> dict[str, Any]:
    return {
        "format": NET_FORMAT,
        "output_unit": net.output_unit,
        "layers": [
            {
                "in_dim": layer.in_dim,
                "out_dim": layer.out_dim,
                "activation": layer.activation,
                "weights": layer.weights.tolist(),
                "biases": layer.biases.tolist(),
            }
            for layer in net.layers
        ],
        "metadata": net.metadata,
    }


def network_from_dict(doc: dict[str, Any]) -> DenseNetwork:
    if doc.get("format") != NET_FORMAT:
        raise ValueError(f"unsupported network format {doc.get('format')!r}, expected {NET_FORMAT!r}")
    layers = []
    for layer_doc in doc["layers"]:
        W = np.array(layer_doc["weights"], dtype=float).reshape(layer_doc["out_dim"], layer_doc["in_dim"])
        layers.append(DenseLayer(W, np.array(layer_doc["biases"], dtype=float), layer_doc["activation"]))
    return DenseNetwork(layers, output_unit=doc.get("output_unit", ""), metadata=doc.get("metadata", {}))


def save_network(net: DenseNetwork, path) -> None:
    Path(path).write_text(json.dumps(network_to_dict(net), indent=1) + "\n", encoding="utf-8")


def load_network(path) -> DenseNetwork:
    return network_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
