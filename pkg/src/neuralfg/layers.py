"""Dense, positive-weight dense and multi-layer perceptron building blocks.

Layers are plain containers of numpy arrays.  Forward functions bind those
arrays onto a :class:`~neuralfg.autodiff.Tape` with ``tape.param`` so that
gradients can later be looked up by the array itself.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape, TapeUsageError, Var

ACTIVATIONS = ("tanh",)
FINAL_ACTIVATIONS = ("none", "tanh", "softplus", "softmax")


@dataclass
class DenseLayer:
    weights: np.ndarray  # (out, in)
    biases: np.ndarray  # (out,)

    @property
    def shape(self):
        return self.weights.shape

    def parameters(self):
        return [self.weights, self.biases]


@dataclass
class PositiveDenseLayer:
    """Dense layer whose effective weights are ``raw_weights ** 2``."""

    raw_weights: np.ndarray
    biases: np.ndarray

    @property
    def shape(self):
        return self.raw_weights.shape

    @property
    def effective_weights(self) -> np.ndarray:
        return self.raw_weights ** 2

    def parameters(self):
        return [self.raw_weights, self.biases]


@dataclass
class MlpSpec:
    widths: list[int]
    activation: str = "tanh"
    dropout_rate: float = 0.0
    final_activation: str = "none"
    positive: bool = False

    def __post_init__(self):
        self.widths = [int(w) for w in self.widths]
        if not self.widths or any(w <= 0 for w in self.widths):
            raise ValueError(f"widths must be positive integers, got {self.widths}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unsupported activation {self.activation!r}")
        if self.final_activation not in FINAL_ACTIVATIONS:
            raise ValueError(f"unsupported final activation {self.final_activation!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")

    @property
    def depth(self) -> int:
        return len(self.widths) - 1


@dataclass
class Mlp:
    spec: MlpSpec
    layers: list = field(default_factory=list)

    def parameters(self) -> list[np.ndarray]:
        return [p for layer in self.layers for p in layer.parameters()]

    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def _check_input(x: Var, n_in: int):
    if x.value.ndim != 2 or x.value.shape[1] != n_in:
        raise TapeUsageError(f"expected input of shape (batch, {n_in}), got {x.value.shape}")


def dense_forward(tape: Tape, layer: DenseLayer, x: Var) -> Var:
    _check_input(x, layer.weights.shape[1])
    w = tape.param(layer.weights)
    b = tape.param(layer.biases)
    return x @ w.T + b


def positive_dense_forward(tape: Tape, layer: PositiveDenseLayer, x: Var) -> Var:
    _check_input(x, layer.raw_weights.shape[1])
    w = tape.param(layer.raw_weights).square()
    b = tape.param(layer.biases)
    return x @ w.T + b


def _dropout(tape: Tape, h: Var, rate: float, rng: np.random.Generator) -> Var:
    keep = rng.random(h.value.shape) >= rate
    return h * tape.constant(keep / (1.0 - rate))


def mlp_forward(tape: Tape, mlp: Mlp, x: Var, training: bool = False,
                rng: np.random.Generator | None = None) -> Var:
    """Dense -> tanh -> dropout for every hidden layer, then the final activation.

    A ``tanh`` final activation is treated like a hidden layer, dropout included.
    """
    spec = mlp.spec
    if len(mlp.layers) != spec.depth:
        raise TapeUsageError(f"spec expects {spec.depth} layers, got {len(mlp.layers)}")
    use_dropout = training and spec.dropout_rate > 0.0
    if use_dropout and rng is None:
        raise TapeUsageError("training-mode dropout needs a random generator")
    forward = positive_dense_forward if spec.positive else dense_forward

    h = x
    for i, layer in enumerate(mlp.layers):
        h = forward(tape, layer, h)
        last = i == len(mlp.layers) - 1
        if not last or spec.final_activation == "tanh":
            h = h.tanh()
            if use_dropout:
                h = _dropout(tape, h, spec.dropout_rate, rng)
    if not mlp.layers and spec.final_activation == "tanh":
        h = h.tanh()
    elif spec.final_activation == "softplus":
        h = h.softplus()
    elif spec.final_activation == "softmax":
        h = tape.softmax(h, axis=-1)
    return h


def init_params(spec: MlpSpec, rng: np.random.Generator) -> Mlp:
    """Glorot-uniform dense layers; positive layers draw raw weights from U(-0.5, 0.5)."""
    layers = []
    for n_in, n_out in zip(spec.widths[:-1], spec.widths[1:]):
        if spec.positive:
            raw = rng.uniform(-0.5, 0.5, size=(n_out, n_in))
            layers.append(PositiveDenseLayer(raw, np.zeros(n_out)))
        else:
            bound = np.sqrt(6.0 / (n_in + n_out))
            w = rng.uniform(-bound, bound, size=(n_out, n_in))
            layers.append(DenseLayer(w, np.zeros(n_out)))
    return Mlp(spec, layers)


def mlp_apply(mlp: Mlp, x: np.ndarray) -> np.ndarray:
    """Inference-mode forward pass on plain arrays."""
    tape = Tape()
    return mlp_forward(tape, mlp, tape.constant(np.atleast_2d(x))).value
