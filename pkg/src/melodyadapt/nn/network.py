"""Layer chains, parameter containers, SGD, and the forward/backward drivers."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .layers import Layer

# batch-norm running statistics: updated during train-mode forwards,
# never by gradient descent
STATE_PARAMS = {"running_mean", "running_var"}


class DivergenceError(RuntimeError):
    """Raised when a gradient or loss goes non-finite."""


@dataclass
class ParameterSet:
    """Named tensors per layer plus a per-layer trainable flag."""

    tensors: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)
    trainable: dict[str, bool] = field(default_factory=dict)

    def copy(self) -> "ParameterSet":
        return ParameterSet(
            tensors={n: {k: v.copy() for k, v in t.items()} for n, t in self.tensors.items()},
            trainable=dict(self.trainable),
        )

    def astype(self, dtype) -> "ParameterSet":
        return ParameterSet(
            tensors={
                n: {k: v.astype(dtype) for k, v in t.items()} for n, t in self.tensors.items()
            },
            trainable=dict(self.trainable),
        )

    def freeze(self) -> None:
        for name in self.trainable:
            self.trainable[name] = False

    def merge(self, other: "ParameterSet") -> "ParameterSet":
        """Combined view over two disjoint parameter sets (shared storage)."""
        overlap = self.tensors.keys() & other.tensors.keys()
        if overlap:
            raise ValueError(f"duplicate layer names: {sorted(overlap)}")
        return ParameterSet(
            tensors={**self.tensors, **other.tensors},
            trainable={**self.trainable, **other.trainable},
        )

    def checksum(self) -> str:
        """Order-stable digest of every tensor byte; detects any mutation."""
        h = hashlib.sha256()
        for name in sorted(self.tensors):
            for key in sorted(self.tensors[name]):
                arr = self.tensors[name][key]
                h.update(name.encode())
                h.update(key.encode())
                h.update(str(arr.shape).encode())
                h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


@dataclass
class Network:
    """An ordered chain of uniquely named layers."""

    layers: list[Layer]
    names: list[str]

    def __post_init__(self):
        if len(self.layers) != len(self.names):
            raise ValueError("one name per layer required")
        if len(set(self.names)) != len(self.names):
            raise ValueError("layer names must be unique")

    def init_params(self, rng: np.random.Generator, input_shape: tuple, dtype=np.float32) -> ParameterSet:
        params = ParameterSet()
        shape = tuple(input_shape)
        for layer, name in zip(self.layers, self.names):
            params.tensors[name] = layer.init_params(rng, shape, dtype=dtype)
            params.trainable[name] = True
            shape = layer.out_shape(shape)
        return params

    def out_shape(self, input_shape: tuple) -> tuple:
        shape = tuple(input_shape)
        for layer in self.layers:
            shape = layer.out_shape(shape)
        return shape

    def manifest(self) -> list[dict]:
        return [
            {"name": name, "kind": layer.kind, "hyperparams": layer.hyperparams()}
            for layer, name in zip(self.layers, self.names)
        ]


@dataclass
class Tape:
    """Activations cached by forward, consumed once by backward."""

    network: Network
    caches: list
    train: bool


def forward(net: Network, params: ParameterSet, x: np.ndarray, train: bool = False):
    """Run the chain; returns the output and the tape for backward."""
    caches = []
    h = x
    for layer, name in zip(net.layers, net.names):
        h, cache = layer.forward(h, params.tensors.get(name, {}), train)
        caches.append(cache)
    return h, Tape(network=net, caches=caches, train=train)


def backward(tape: Tape, d_out: np.ndarray, params: ParameterSet, *, need_dx: bool = False):
    """Walk the tape in reverse; returns (d_input, gradients).

    Gradients come back as {layer_name: {param_name: array}} for trainable
    layers only. The walk stops below the deepest trainable layer unless
    ``need_dx`` asks for the gradient with respect to the chain input,
    which also skips the (expensive) input gradient of a leading conv.
    """
    net = tape.network
    trainable_idx = [
        j
        for j, name in enumerate(net.names)
        if params.trainable.get(name, False) and params.tensors.get(name)
    ]
    deepest = trainable_idx[0] if trainable_idx else len(net.layers)
    floor = 0 if need_dx else deepest
    grads: dict[str, dict[str, np.ndarray]] = {}
    dy = d_out
    for i in range(len(net.layers) - 1, floor - 1, -1):
        layer, name = net.layers[i], net.names[i]
        want_dx = need_dx or i > floor
        dx, layer_grads = layer.backward(
            dy, tape.caches[i], params.tensors.get(name, {}), need_dx=want_dx
        )
        if params.trainable.get(name, False) and layer_grads:
            grads[name] = layer_grads
        if want_dx:
            dy = dx
    return (dy if need_dx else None), grads


def sgd_step(params: ParameterSet, grads: dict, learning_rate: float) -> ParameterSet:
    """Plain gradient descent: p <- p - lr * g on trainable tensors only."""
    for name, layer_grads in grads.items():
        if not params.trainable.get(name, False):
            continue
        for key, g in layer_grads.items():
            if key in STATE_PARAMS:
                continue
            if not np.all(np.isfinite(g)):
                raise DivergenceError(f"non-finite gradient in {name}.{key}")
            params.tensors[name][key] -= learning_rate * g
    return params
