"""From-scratch 1D convolutional regressor.

Maps a fixed-voltage incremental-capacity segment to the fifteen
feature-point charge increments.  Everything is plain numpy: valid
stride-1 convolutions, max pooling, dense layers with rectified-linear
activations on the hidden layers, and a linear output head.  The
convolutional layers output raw dot products; the pooling and dense
stages carry the nonlinearity.

Training uses Adam on mean squared error in scaled space.  Inputs and
targets are min-max scaled to [-1, 1] with statistics taken from the
training split only.

Serialization format (``save_model``): a JSON document with keys
``format`` (the literal ``"batsort-cnn-v1"``), ``architecture`` (either
``{"cnn": {...CnnConfig fields...}}`` or ``{"dense": {"n_inputs": int,
"hidden": [int...], "n_outputs": int}}``), ``scaler`` (arrays ``x_min``,
``x_max``, ``y_min``, ``y_max``), and ``params``, a list of
``{"name": str, "shape": [int...], "data": [float...]}`` entries in layer
order with row-major flattening.  Floats are written with full repr
precision, so a load reproduces the saved model bit for bit.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NumericalFailure, SchemaError

OUTPUT_WIDTH = 15

MODEL_FORMAT = "batsort-cnn-v1"


class ShapeInfeasibleError(ValueError):
    """The layer arithmetic ran out of samples somewhere in the stack."""


class TrainingDivergedError(NumericalFailure):
    """Loss became non-finite during training."""


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


_RANGES = {
    "conv_blocks": (1, 5),
    "filter_count": (1, 128),
    "filter_size": (2, 32),
    "pool_size": (2, 8),
    "pool_stride": (1, 5),
    "dense_layers": (1, 5),
    "dense_neurons": (8, 64),
}


@dataclass(frozen=True)
class CnnConfig:
    """Architecture and input-segment hyperparameters.

    The integer fields share one value across all blocks of their kind,
    and v1/v2 bound the input voltage segment sampled at 1 mV.
    """

    conv_blocks: int = 2
    filter_count: int = 13
    filter_size: int = 26
    pool_size: int = 3
    pool_stride: int = 1
    dense_layers: int = 1
    dense_neurons: int = 45
    learning_rate: float = 1e-3
    v1: float = 3.60
    v2: float = 3.90

    def __post_init__(self) -> None:
        for name, (lo, hi) in _RANGES.items():
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or isinstance(value, bool):
                raise ValueError(f"{name} must be an integer")
            if not lo <= value <= hi:
                raise ValueError(f"{name}={value} outside [{lo}, {hi}]")
        if not 2e-4 <= self.learning_rate <= 1e-2:
            raise ValueError(f"learning_rate={self.learning_rate} outside [2e-4, 1e-2]")
        if not (3.5 <= self.v1 < self.v2 <= 4.0):
            raise ValueError("need 3.5 <= v1 < v2 <= 4.0")

    @property
    def input_length(self) -> int:
        return int(round((self.v2 - self.v1) / 0.001)) + 1


def layer_lengths(config: CnnConfig) -> list[int]:
    """Sequence lengths after each conv/pool stage, input first.

    Raises ShapeInfeasibleError as soon as a stage would produce fewer
    than one sample.
    """
    lengths = [config.input_length]
    n = config.input_length
    for block in range(config.conv_blocks):
        n = n - config.filter_size + 1
        if n < 1:
            raise ShapeInfeasibleError(
                f"conv block {block + 1}: {lengths[-1]} samples < filter size "
                f"{config.filter_size}"
            )
        lengths.append(n)
        n = (n - config.pool_size) // config.pool_stride + 1
        if n < 1:
            raise ShapeInfeasibleError(
                f"pool in block {block + 1}: {lengths[-1]} samples < pool size "
                f"{config.pool_size}"
            )
        lengths.append(n)
    return lengths


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


class _Conv1d:
    def __init__(self, in_channels: int, out_channels: int, kernel: int, rng) -> None:
        limit = math.sqrt(6.0 / (in_channels * kernel))
        self.weight = rng.uniform(-limit, limit, size=(out_channels, in_channels, kernel))
        self.bias = np.zeros(out_channels)
        self.grad_weight = np.zeros_like(self.weight)
        self.grad_bias = np.zeros_like(self.bias)
        self.kernel = kernel

    def forward(self, x: np.ndarray) -> np.ndarray:
        # x: (batch, channels, length)
        self._windows = sliding_window_view(x, self.kernel, axis=2)
        out = np.tensordot(self._windows, self.weight, axes=([1, 3], [1, 2]))
        return out.transpose(0, 2, 1) + self.bias[None, :, None]

    def backward(self, grad: np.ndarray) -> np.ndarray:
        self.grad_weight += np.tensordot(grad, self._windows, axes=([0, 2], [0, 2]))
        self.grad_bias += grad.sum(axis=(0, 2))
        pad = self.kernel - 1
        padded = np.pad(grad, ((0, 0), (0, 0), (pad, pad)))
        windows = sliding_window_view(padded, self.kernel, axis=2)
        flipped = self.weight[:, :, ::-1]
        dx = np.tensordot(windows, flipped, axes=([1, 3], [0, 2]))
        return np.ascontiguousarray(dx.transpose(0, 2, 1))

    def parameters(self):
        return [("weight", self.weight, self.grad_weight), ("bias", self.bias, self.grad_bias)]


class _MaxPool1d:
    def __init__(self, size: int, stride: int) -> None:
        self.size = size
        self.stride = stride

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._in_shape = x.shape
        windows = sliding_window_view(x, self.size, axis=2)[:, :, :: self.stride, :]
        self._argmax = windows.argmax(axis=-1)
        return np.take_along_axis(windows, self._argmax[..., None], axis=-1)[..., 0]

    def backward(self, grad: np.ndarray) -> np.ndarray:
        batch, channels, length = self._in_shape
        n_out = grad.shape[2]
        dx = np.zeros((batch * channels, length))
        cols = (np.arange(n_out) * self.stride)[None, :] + self._argmax.reshape(-1, n_out)
        rows = np.repeat(np.arange(batch * channels), n_out)
        np.add.at(dx, (rows, cols.ravel()), grad.reshape(-1))
        return dx.reshape(self._in_shape)

    def parameters(self):
        return []


class _Flatten:
    def forward(self, x: np.ndarray) -> np.ndarray:
        self._in_shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad: np.ndarray) -> np.ndarray:
        return grad.reshape(self._in_shape)

    def parameters(self):
        return []


class _Dense:
    def __init__(self, n_in: int, n_out: int, relu: bool, rng) -> None:
        limit = math.sqrt(6.0 / n_in)
        self.weight = rng.uniform(-limit, limit, size=(n_in, n_out))
        self.bias = np.zeros(n_out)
        self.grad_weight = np.zeros_like(self.weight)
        self.grad_bias = np.zeros_like(self.bias)
        self.relu = relu

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._x = x
        z = x @ self.weight + self.bias
        if self.relu:
            self._active = z > 0.0
            return np.where(self._active, z, 0.0)
        return z

    def backward(self, grad: np.ndarray) -> np.ndarray:
        if self.relu:
            grad = grad * self._active
        self.grad_weight += self._x.T @ grad
        self.grad_bias += grad.sum(axis=0)
        return grad @ self.weight.T

    def parameters(self):
        return [("weight", self.weight, self.grad_weight), ("bias", self.bias, self.grad_bias)]


class Network:
    """An ordered layer stack with manual forward/backward passes."""

    def __init__(self, layers, n_inputs: int, n_outputs: int, takes_channels: bool,
                 config: CnnConfig | None = None, dense_spec: tuple | None = None) -> None:
        self.layers = layers
        self.n_inputs = n_inputs
        self.n_outputs = n_outputs
        self.takes_channels = takes_channels
        self.config = config
        self.dense_spec = dense_spec

    def forward(self, x: np.ndarray) -> np.ndarray:
        if self.takes_channels:
            x = x[:, None, :]
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, grad: np.ndarray) -> None:
        for layer in reversed(self.layers):
            grad = layer.backward(grad)

    def zero_grad(self) -> None:
        for _, _, g in self.parameters():
            g[...] = 0.0

    def parameters(self):
        out = []
        for i, layer in enumerate(self.layers):
            for name, p, g in layer.parameters():
                out.append((f"layer{i}.{name}", p, g))
        return out

    def parameter_count(self) -> int:
        return sum(p.size for _, p, _ in self.parameters())


def build_network(config: CnnConfig, seed: int) -> Network:
    """Deterministic CNN construction from a config and a seed."""
    lengths = layer_lengths(config)
    rng = np.random.default_rng(seed)
    layers = []
    channels = 1
    for _ in range(config.conv_blocks):
        layers.append(_Conv1d(channels, config.filter_count, config.filter_size, rng))
        channels = config.filter_count
        layers.append(_MaxPool1d(config.pool_size, config.pool_stride))
    layers.append(_Flatten())
    width = channels * lengths[-1]
    for _ in range(config.dense_layers):
        layers.append(_Dense(width, config.dense_neurons, relu=True, rng=rng))
        width = config.dense_neurons
    layers.append(_Dense(width, OUTPUT_WIDTH, relu=False, rng=rng))
    return Network(layers, config.input_length, OUTPUT_WIDTH, takes_channels=True,
                   config=config)


def build_dense_network(n_inputs: int, hidden, n_outputs: int, seed: int) -> Network:
    """Plain fully connected stack, used by the capacity-only baseline."""
    if n_inputs < 1 or n_outputs < 1 or any(h < 1 for h in hidden):
        raise ValueError("layer widths must be positive")
    rng = np.random.default_rng(seed)
    layers = []
    width = n_inputs
    for h in hidden:
        layers.append(_Dense(width, int(h), relu=True, rng=rng))
        width = int(h)
    layers.append(_Dense(width, n_outputs, relu=False, rng=rng))
    return Network(layers, n_inputs, n_outputs, takes_channels=False,
                   dense_spec=(n_inputs, tuple(int(h) for h in hidden), n_outputs))


# ---------------------------------------------------------------------------
# scaling
# ---------------------------------------------------------------------------


@dataclass
class Scaler:
    """Per-feature min-max statistics for inputs and targets."""

    x_min: np.ndarray
    x_max: np.ndarray
    y_min: np.ndarray
    y_max: np.ndarray

    @staticmethod
    def _span(lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
        span = hi - lo
        eps = np.finfo(float).eps
        return np.where(span == 0.0, np.maximum(np.abs(lo), 1.0) * eps, span)

    def scale_inputs(self, x: np.ndarray) -> np.ndarray:
        return -1.0 + 2.0 * (np.asarray(x, dtype=float) - self.x_min) / self._span(self.x_min, self.x_max)

    def unscale_inputs(self, xs: np.ndarray) -> np.ndarray:
        return self.x_min + (np.asarray(xs, dtype=float) + 1.0) * self._span(self.x_min, self.x_max) / 2.0

    def scale_targets(self, y: np.ndarray) -> np.ndarray:
        return -1.0 + 2.0 * (np.asarray(y, dtype=float) - self.y_min) / self._span(self.y_min, self.y_max)

    def unscale_targets(self, ys: np.ndarray) -> np.ndarray:
        return self.y_min + (np.asarray(ys, dtype=float) + 1.0) * self._span(self.y_min, self.y_max) / 2.0


def fit_scaler(inputs: np.ndarray, targets: np.ndarray) -> Scaler:
    x = np.asarray(inputs, dtype=float)
    y = np.asarray(targets, dtype=float)
    if x.size == 0 or y.size == 0:
        raise ValueError("cannot fit a scaler on an empty dataset")
    return Scaler(
        x_min=x.min(axis=0), x_max=x.max(axis=0),
        y_min=y.min(axis=0), y_max=y.max(axis=0),
    )


# ---------------------------------------------------------------------------
# optimizer and training
# ---------------------------------------------------------------------------


class Adam:
    """Standard Adam with bias correction, updating parameters in place."""

    def __init__(self, network: Network, learning_rate: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
        self.network = network
        self.lr = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = [np.zeros_like(p) for _, p, _ in network.parameters()]
        self._v = [np.zeros_like(p) for _, p, _ in network.parameters()]

    def step(self) -> None:
        self.t += 1
        for (_, p, g), m, v in zip(self.network.parameters(), self._m, self._v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            m_hat = m / (1.0 - self.beta1 ** self.t)
            v_hat = v / (1.0 - self.beta2 ** self.t)
            p -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class TrainReport:
    train_loss: list
    val_loss: list
    val_rmse_mAh: float
    epochs: int
    best_epoch: int
    seed: int
    scaler: Scaler = field(repr=False)


def train(
    network: Network,
    inputs,
    targets,
    val_fraction: float = 0.10,
    learning_rate: float | None = None,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    max_epochs: int = 2000,
    batch_size: int = 32,
    patience: int = 50,
    seed: int = 0,
    restore_best: bool = True,
) -> TrainReport:
    """Adam on scaled mean squared error with early stopping.

    A random val_fraction of the samples is held out; the min-max scaler
    is fitted on the remaining training split only.  When validation loss
    has not improved for `patience` epochs, training stops and, unless
    restore_best is false, the parameters from the best validation epoch
    are restored.
    """
    x = np.asarray(inputs, dtype=float)
    y = np.asarray(targets, dtype=float)
    if x.ndim != 2 or y.ndim != 2 or len(x) != len(y):
        raise ValueError("inputs and targets must be matching 2-D arrays")
    if len(x) < 10:
        raise ValueError("need at least 10 samples")
    if x.shape[1] != network.n_inputs or y.shape[1] != network.n_outputs:
        raise ValueError("dataset width does not match the network")
    if not 0.0 < val_fraction < 1.0:
        raise ValueError("val_fraction must be in (0, 1)")
    if learning_rate is None:
        if network.config is None:
            raise ValueError("no config on the network; pass learning_rate")
        learning_rate = network.config.learning_rate

    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(x))
    n_val = max(1, int(round(val_fraction * len(x))))
    val_idx, train_idx = perm[:n_val], perm[n_val:]
    scaler = fit_scaler(x[train_idx], y[train_idx])
    xs = scaler.scale_inputs(x)
    ys = scaler.scale_targets(y)

    optimizer = Adam(network, learning_rate, beta1, beta2, eps)
    train_losses: list[float] = []
    val_losses: list[float] = []
    best_val = math.inf
    best_epoch = 0
    best_state = [p.copy() for _, p, _ in network.parameters()]
    since_best = 0

    for epoch in range(1, max_epochs + 1):
        order = rng.permutation(len(train_idx))
        total = 0.0
        for start in range(0, len(order), batch_size):
            rows = train_idx[order[start : start + batch_size]]
            out = network.forward(xs[rows])
            diff = out - ys[rows]
            loss = float(np.mean(diff * diff))
            if not math.isfinite(loss):
                raise TrainingDivergedError(f"non-finite training loss at epoch {epoch}")
            network.zero_grad()
            network.backward(2.0 * diff / diff.size)
            optimizer.step()
            total += loss * len(rows)
        train_losses.append(total / len(train_idx))

        out_val = network.forward(xs[val_idx])
        diff_val = out_val - ys[val_idx]
        vloss = float(np.mean(diff_val * diff_val))
        if not math.isfinite(vloss):
            raise TrainingDivergedError(f"non-finite validation loss at epoch {epoch}")
        val_losses.append(vloss)

        if vloss < best_val:
            best_val = vloss
            best_epoch = epoch
            best_state = [p.copy() for _, p, _ in network.parameters()]
            since_best = 0
        else:
            since_best += 1
            if since_best >= patience:
                break

    if restore_best:
        for (_, p, _), saved in zip(network.parameters(), best_state):
            p[...] = saved

    preds = scaler.unscale_targets(network.forward(xs[val_idx]))
    final_rmse = rmse(preds, y[val_idx])
    return TrainReport(
        train_loss=train_losses,
        val_loss=val_losses,
        val_rmse_mAh=final_rmse,
        epochs=len(train_losses),
        best_epoch=best_epoch,
        seed=seed,
        scaler=scaler,
    )


def predict(network: Network, scaler: Scaler, segment) -> np.ndarray:
    """De-scaled network output for one segment or a batch of them."""
    x = np.asarray(segment, dtype=float)
    single = x.ndim == 1
    batch = x[None, :] if single else x
    if batch.ndim != 2 or batch.shape[1] != network.n_inputs:
        raise ValueError(
            f"segment length {batch.shape[-1]} does not match network input "
            f"length {network.n_inputs}"
        )
    out = scaler.unscale_targets(network.forward(scaler.scale_inputs(batch)))
    return out[0] if single else out


def rmse(predicted, reference) -> float:
    a = np.asarray(predicted, dtype=float)
    b = np.asarray(reference, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.sqrt(np.mean((a - b) ** 2)))


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def save_model(path, network: Network, scaler: Scaler) -> None:
    """Write network plus scaler as the JSON container described above."""
    if network.config is not None:
        architecture = {"cnn": {k: getattr(network.config, k) for k in (
            "conv_blocks", "filter_count", "filter_size", "pool_size", "pool_stride",
            "dense_layers", "dense_neurons", "learning_rate", "v1", "v2")}}
    elif network.dense_spec is not None:
        n_in, hidden, n_out = network.dense_spec
        architecture = {"dense": {"n_inputs": n_in, "hidden": list(hidden), "n_outputs": n_out}}
    else:
        raise ValueError("network carries no rebuildable architecture description")
    doc = {
        "format": MODEL_FORMAT,
        "architecture": architecture,
        "scaler": {
            "x_min": scaler.x_min.tolist(), "x_max": scaler.x_max.tolist(),
            "y_min": scaler.y_min.tolist(), "y_max": scaler.y_max.tolist(),
        },
        "params": [
            {"name": name, "shape": list(p.shape), "data": p.ravel().tolist()}
            for name, p, _ in network.parameters()
        ],
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True))


def load_model(path) -> tuple[Network, Scaler]:
    """Rebuild a saved network; inverse of :func:`save_model`."""
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as err:
        raise SchemaError(f"cannot read model file {path}: {err}") from err
    if not isinstance(doc, dict) or doc.get("format") != MODEL_FORMAT:
        raise SchemaError(f"{path}: not a {MODEL_FORMAT} model file")
    try:
        arch = doc["architecture"]
        if "cnn" in arch:
            network = build_network(CnnConfig(**arch["cnn"]), seed=0)
        else:
            d = arch["dense"]
            network = build_dense_network(d["n_inputs"], d["hidden"], d["n_outputs"], seed=0)
        params = network.parameters()
        if len(params) != len(doc["params"]):
            raise SchemaError(f"{path}: expected {len(params)} tensors, file has {len(doc['params'])}")
        for (name, p, _), entry in zip(params, doc["params"]):
            if entry["name"] != name or list(p.shape) != list(entry["shape"]):
                raise SchemaError(f"{path}: tensor {entry['name']} does not match {name} {p.shape}")
            p[...] = np.asarray(entry["data"], dtype=float).reshape(p.shape)
        sc = doc["scaler"]
        scaler = Scaler(
            x_min=np.asarray(sc["x_min"], dtype=float),
            x_max=np.asarray(sc["x_max"], dtype=float),
            y_min=np.asarray(sc["y_min"], dtype=float),
            y_max=np.asarray(sc["y_max"], dtype=float),
        )
    except (KeyError, TypeError, ValueError) as err:
        raise SchemaError(f"{path}: malformed model document: {err}") from err
    return network, scaler
