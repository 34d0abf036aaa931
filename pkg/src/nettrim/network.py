"""Feedforward ReLU networks: layers, forward propagation, bias handling.

A layer maps ``X_prev`` (``N_prev x P``, one sample per column) to
``relu(W.T @ X_prev + b[:, None])`` with ``W`` of shape ``N_prev x N``.
The last layer may skip the activation.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .tensor import as_matrix, frobenius, l1_norm, relu

__all__ = [
    "Layer",
    "Network",
    "forward",
    "absorb_bias",
    "augment_ones",
    "split_bias",
    "normalize",
    "denormalize",
    "relative_total_discrepancy",
]


@dataclass(frozen=True)
class Layer:
    weights: np.ndarray
    bias: Optional[np.ndarray] = None
    apply_activation: bool = True

    def __post_init__(self):
        w = as_matrix(self.weights, "weights")
        object.__setattr__(self, "weights", w)
        if self.bias is not None:
            b = np.asarray(self.bias, dtype=np.float64).ravel()
            if b.shape[0] != w.shape[1]:
                raise ValueError(
                    f"bias length {b.shape[0]} does not match weight columns {w.shape[1]}")
            if not np.all(np.isfinite(b)):
                raise ValueError("bias contains non-finite entries")
            object.__setattr__(self, "bias", b)

    @property
    def input_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def output_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def has_bias(self) -> bool:
        return self.bias is not None


@dataclass(frozen=True)
class Network:
    """Ordered dense layers, plus any convolutional layers carried along in a file.

    ``conv_layers`` are not part of :func:`forward`; they exist so that NTNF
    files holding convolutional filters round-trip through this type.
    """

    layers: tuple
    conv_layers: tuple = field(default=())

    def __post_init__(self):
        layers = tuple(self.layers)
        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "conv_layers", tuple(self.conv_layers))
        if not layers:
            raise ValueError("network needs at least one layer")
        for i, (a, b) in enumerate(zip(layers[:-1], layers[1:])):
            if a.output_dim != b.input_dim:
                raise ValueError(
                    f"layer {i + 1} input dim {b.input_dim} != layer {i} output dim {a.output_dim}")
        for i, layer in enumerate(layers[:-1]):
            if not layer.apply_activation:
                raise ValueError(f"only the final layer may skip the activation (layer {i})")

    @property
    def input_dim(self) -> int:
        return self.layers[0].input_dim

    @property
    def depth(self) -> int:
        return len(self.layers)

    def with_layers(self, layers: Sequence[Layer]) -> "Network":
        return replace(self, layers=tuple(layers))


def layer_forward(layer: Layer, x: np.ndarray) -> np.ndarray:
    z = layer.weights.T @ x
    if layer.bias is not None:
        z = z + layer.bias[:, None]
    return relu(z) if layer.apply_activation else z


def forward(net: Network, x: np.ndarray) -> list:
    """Return ``[X0, X1, ..., XL]`` with ``X0`` the input itself."""
    x = as_matrix(x, "X")
    if x.shape[0] != net.input_dim:
        raise ValueError(f"input has {x.shape[0]} rows, network expects {net.input_dim}")
    outs = [x]
    for layer in net.layers:
        outs.append(layer_forward(layer, outs[-1]))
    return outs


def augment_ones(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.vstack([x, np.ones((1, x.shape[1]))])


def absorb_bias(layer: Layer) -> Layer:
    """Fold the bias into an extra weight row; pair with :func:`augment_ones`."""
    if layer.bias is None:
        raise ValueError("layer has no bias to absorb")
    w = np.vstack([layer.weights, layer.bias[None, :]])
    return Layer(w, None, layer.apply_activation)


def split_bias(absorbed: np.ndarray, apply_activation: bool = True) -> Layer:
    """Inverse of :func:`absorb_bias` for an ``(N + 1) x M`` matrix."""
    absorbed = as_matrix(absorbed)
    return Layer(absorbed[:-1].copy(), absorbed[-1].copy(), apply_activation)


def _combined(layer: Layer) -> np.ndarray:
    return absorb_bias(layer).weights if layer.has_bias else layer.weights


def normalize(net: Network):
    """Rescale every layer so its bias-absorbed matrix has unit l1 norm.

    Returns ``(normalized, scales)``.  With ``c_l = prod(scales[:l])`` the
    layer outputs obey ``X_l(original) == c_l * X_l(normalized)``; biases are
    divided by the cumulative scale so this holds exactly with biases too.
    """
    scales = []
    cum = 1.0
    layers = []
    for i, layer in enumerate(net.layers):
        w1 = l1_norm(layer.weights)
        b1 = l1_norm(layer.bias) if layer.has_bias else 0.0
        s = w1 + b1 / cum
        if s == 0.0:
            raise ValueError(f"layer {i} is identically zero and cannot be normalized")
        cum *= s
        bias = layer.bias / cum if layer.has_bias else None
        layers.append(Layer(layer.weights / s, bias, layer.apply_activation))
        scales.append(s)
    return net.with_layers(layers), scales


def denormalize(net: Network, scales: Sequence[float]) -> Network:
    """Undo :func:`normalize` on a network with the same layer structure."""
    if len(scales) != net.depth:
        raise ValueError("one scale per layer required")
    cum = 1.0
    layers = []
    for layer, s in zip(net.layers, scales):
        cum *= s
        bias = layer.bias * cum if layer.has_bias else None
        layers.append(Layer(layer.weights * s, bias, layer.apply_activation))
    return net.with_layers(layers)


def relative_total_discrepancy(a: np.ndarray, b: np.ndarray) -> float:
    """``||a - b||_F / ||b||_F``; `b` is the reference output."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    nb = frobenius(b)
    if nb == 0.0:
        raise ValueError("reference output is identically zero")
    return frobenius(a - b) / nb
