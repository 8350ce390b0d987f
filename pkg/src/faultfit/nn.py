"""Dense feed-forward networks with hand-written backprop and Adam."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np

ACTIVATIONS = ("relu", "sigmoid", "identity")
CHECKPOINT_VERSION = 1


def _activate(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "sigmoid":
        # tanh form is stable for large |z|
        return 0.5 * (1.0 + np.tanh(0.5 * z))
    return z


def _activation_grad(name: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    if name == "relu":
        return (z > 0).astype(z.dtype)
    if name == "sigmoid":
        return a * (1.0 - a)
    return np.ones_like(z)


@dataclass
class DenseLayer:
    weights: np.ndarray  # (out_dim, in_dim)
    biases: np.ndarray  # (out_dim,)
    activation: str = "relu"
    frozen: bool = False

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.biases = np.asarray(self.biases, dtype=np.float64)
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weights.ndim != 2 or self.biases.shape != (self.weights.shape[0],):
            raise ValueError(
                f"weights {self.weights.shape} and biases {self.biases.shape} disagree"
            )

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def parameter_count(self) -> int:
        return self.weights.size + self.biases.size


@dataclass(frozen=True)
class ParamCoord:
    """Address of one scalar parameter. ``col`` is ignored for biases."""

    layer: int
    kind: Literal["weight", "bias"]
    row: int
    col: int = 0


class DenseNetwork:
    """Linear chain of dense layers."""

    def __init__(self, layers: list[DenseLayer]):
        if not layers:
            raise ValueError("network needs at least one layer")
        for k in range(1, len(layers)):
            if layers[k].in_dim != layers[k - 1].out_dim:
                raise ValueError(
                    f"layer {k} expects {layers[k].in_dim} inputs, "
                    f"layer {k - 1} produces {layers[k - 1].out_dim}"
                )
        self.layers = layers
        # bumped on every parameter write; forward caches remember it
        self.version = 0

    @classmethod
    def build(cls, widths: list[int], rng: np.random.Generator,
              hidden_activation: str = "relu",
              output_activation: str = "sigmoid") -> DenseNetwork:
        """Glorot-uniform weights, zero biases."""
        if len(widths) < 2 or min(widths) < 1:
            raise ValueError(f"invalid layer widths {widths}")
        layers = []
        n = len(widths) - 1
        for k, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            layers.append(DenseLayer(
                rng.uniform(-limit, limit, size=(fan_out, fan_in)),
                np.zeros(fan_out),
                output_activation if k == n - 1 else hidden_activation,
            ))
        return cls(layers)

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def widths(self) -> list[int]:
        return [self.in_dim] + [layer.out_dim for layer in self.layers]

    @property
    def parameter_count(self) -> int:
        return sum(layer.parameter_count for layer in self.layers)

    def copy(self) -> DenseNetwork:
        return DenseNetwork([
            DenseLayer(l.weights.copy(), l.biases.copy(), l.activation, l.frozen)
            for l in self.layers
        ])

    def parameter_vector(self) -> np.ndarray:
        """Flat copy of every parameter, layer by layer, weights before biases."""
        return np.concatenate(
            [np.concatenate([l.weights.ravel(), l.biases]) for l in self.layers]
        )

    def coord_at(self, index: int) -> ParamCoord:
        """Map a flat index in ``[0, parameter_count)`` to a coordinate."""
        if not 0 <= index < self.parameter_count:
            raise IndexError(f"parameter index {index} out of range")
        for k, layer in enumerate(self.layers):
            if index < layer.weights.size:
                row, col = divmod(index, layer.in_dim)
                return ParamCoord(k, "weight", row, col)
            index -= layer.weights.size
            if index < layer.biases.size:
                return ParamCoord(k, "bias", index)
            index -= layer.biases.size
        raise AssertionError("unreachable")

    def layer_coord_at(self, layer_index: int, index: int) -> ParamCoord:
        """Map a flat index within one layer to a coordinate."""
        layer = self.layers[layer_index]
        if not 0 <= index < layer.parameter_count:
            raise IndexError(f"parameter index {index} out of range for layer {layer_index}")
        if index < layer.weights.size:
            row, col = divmod(index, layer.in_dim)
            return ParamCoord(layer_index, "weight", row, col)
        return ParamCoord(layer_index, "bias", index - layer.weights.size)

    def _check(self, c: ParamCoord) -> DenseLayer:
        if not 0 <= c.layer < len(self.layers):
            raise IndexError(f"no layer {c.layer} in {c}")
        layer = self.layers[c.layer]
        if c.kind == "weight":
            if not (0 <= c.row < layer.out_dim and 0 <= c.col < layer.in_dim):
                raise IndexError(f"{c} outside weights {layer.weights.shape}")
        elif c.kind == "bias":
            if not 0 <= c.row < layer.out_dim:
                raise IndexError(f"{c} outside biases ({layer.out_dim},)")
        else:
            raise IndexError(f"unknown parameter kind {c.kind!r}")
        return layer

    def get_param(self, c: ParamCoord) -> float:
        layer = self._check(c)
        if c.kind == "weight":
            return float(layer.weights[c.row, c.col])
        return float(layer.biases[c.row])

    def set_param(self, c: ParamCoord, value: float) -> None:
        # writes ignore ``frozen``: freezing gates optimizer updates only
        layer = self._check(c)
        if c.kind == "weight":
            layer.weights[c.row, c.col] = value
        else:
            layer.biases[c.row] = value
        self.version += 1


@dataclass
class ForwardCache:
    inputs: list[np.ndarray]
    preacts: list[np.ndarray]
    outputs: list[np.ndarray]
    network_id: int
    version: int


@dataclass
class LayerGrad:
    weights: np.ndarray
    biases: np.ndarray
    frozen: bool = False


class StaleCacheError(RuntimeError):
    pass


def forward(net: DenseNetwork, batch: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != net.in_dim:
        raise ValueError(f"batch shape {x.shape} does not match input dim {net.in_dim}")
    inputs, preacts, outputs = [], [], []
    for layer in net.layers:
        inputs.append(x)
        z = x @ layer.weights.T + layer.biases
        x = _activate(layer.activation, z)
        preacts.append(z)
        outputs.append(x)
    return x, ForwardCache(inputs, preacts, outputs, id(net), net.version)


def predict(net: DenseNetwork, batch: np.ndarray) -> np.ndarray:
    return forward(net, batch)[0]


def mse_loss(y: np.ndarray, target: np.ndarray) -> float:
    y = np.asarray(y, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if y.shape != target.shape:
        raise ValueError(f"shape mismatch {y.shape} vs {target.shape}")
    return float(np.mean((y - target) ** 2))


def mse_grad(y: np.ndarray, target: np.ndarray) -> np.ndarray:
    """d(mse_loss)/dy."""
    return 2.0 * (y - target) / y.size


def backward(net: DenseNetwork, cache: ForwardCache, loss_grad: np.ndarray) -> list[LayerGrad]:
    if cache.network_id != id(net) or cache.version != net.version:
        raise StaleCacheError("forward cache does not match the current network state")
    delta = np.asarray(loss_grad, dtype=np.float64)
    if delta.shape != cache.outputs[-1].shape:
        raise ValueError(f"loss gradient shape {delta.shape} != output {cache.outputs[-1].shape}")
    grads: list[LayerGrad] = [None] * len(net.layers)  # type: ignore[list-item]
    for k in reversed(range(len(net.layers))):
        layer = net.layers[k]
        delta = delta * _activation_grad(layer.activation, cache.preacts[k], cache.outputs[k])
        grads[k] = LayerGrad(delta.T @ cache.inputs[k], delta.sum(axis=0), layer.frozen)
        if k:
            delta = delta @ layer.weights
    return grads


@dataclass
class _Moments:
    m_w: np.ndarray
    v_w: np.ndarray
    m_b: np.ndarray
    v_b: np.ndarray
    t: int = 0


@dataclass
class Adam:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    state: list[_Moments] = field(default_factory=list)

    def _ensure_state(self, net: DenseNetwork) -> None:
        if not self.state:
            self.state = [
                _Moments(np.zeros_like(l.weights), np.zeros_like(l.weights),
                         np.zeros_like(l.biases), np.zeros_like(l.biases))
                for l in net.layers
            ]

    def _step(self, param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray,
              t: int) -> None:
        m *= self.beta1
        m += (1.0 - self.beta1) * grad
        v *= self.beta2
        v += (1.0 - self.beta2) * (grad * grad)
        m_hat = m / (1.0 - self.beta1 ** t)
        v_hat = v / (1.0 - self.beta2 ** t)
        param -= self.learning_rate * m_hat / (np.sqrt(v_hat) + self.epsilon)


def apply_update(net: DenseNetwork, grads: list[LayerGrad], optimizer: Adam) -> DenseNetwork:
    """One Adam step on every unfrozen layer.

    Each layer keeps its own step count, so a frozen layer's optimizer state
    is left exactly as it was.
    """
    if len(grads) != len(net.layers):
        raise ValueError(f"{len(grads)} gradients for {len(net.layers)} layers")
    optimizer._ensure_state(net)
    for layer, g, s in zip(net.layers, grads, optimizer.state):
        if layer.frozen:
            continue
        if g.weights.shape != layer.weights.shape or g.biases.shape != layer.biases.shape:
            raise ValueError("gradient shapes do not match parameters")
        s.t += 1
        optimizer._step(layer.weights, g.weights, s.m_w, s.v_w, s.t)
        optimizer._step(layer.biases, g.biases, s.m_b, s.v_b, s.t)
    net.version += 1
    return net


def train_step(net: DenseNetwork, x: np.ndarray, y: np.ndarray, optimizer: Adam) -> float:
    """Forward, MSE, backward and update on one batch. Returns the batch loss."""
    out, cache = forward(net, x)
    loss = mse_loss(out, y)
    apply_update(net, backward(net, cache, mse_grad(out, y)), optimizer)
    return loss


def save_checkpoint(net: DenseNetwork, path, extra: dict | None = None) -> None:
    """Write an ``.npz`` holding a JSON header and row-major parameter arrays."""
    meta = {
        "format": "faultfit-dense",
        "version": CHECKPOINT_VERSION,
        "widths": net.widths,
        "activations": [l.activation for l in net.layers],
        "extra": extra or {},
    }
    arrays = {"meta": np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)}
    for k, layer in enumerate(net.layers):
        arrays[f"W{k}"] = np.ascontiguousarray(layer.weights)
        arrays[f"b{k}"] = layer.biases
    with open(path, "wb") as f:
        np.savez(f, **arrays)


def load_checkpoint(path, with_meta: bool = False):
    with np.load(Path(path), allow_pickle=False) as data:
        meta = json.loads(data["meta"].tobytes().decode())
        if meta.get("format") != "faultfit-dense":
            raise ValueError(f"{path} is not a network checkpoint")
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
        layers = [
            DenseLayer(data[f"W{k}"], data[f"b{k}"], act)
            for k, act in enumerate(meta["activations"])
        ]
    net = DenseNetwork(layers)
    if net.widths != meta["widths"]:
        raise ValueError(f"checkpoint widths {meta['widths']} disagree with arrays")
    return (net, meta) if with_meta else net
