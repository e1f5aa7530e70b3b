"""Feed-forward networks, gradient records and the SGD update."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from rtn.quantize import GAMMA_FLOOR, selection_mean
from rtn.nn.functional import cross_entropy_loss, mse_loss
from rtn.nn.layers import (
    QUANT_PARAM_NAMES,
    WEIGHT_QUANT_PARAM_NAMES,
    ActivationQuant,
    BatchNorm,
    Conv2D,
    Dense,
    Flatten,
    Layer,
    ReLU,
    WeightQuantConv,
    WeightQuantDense,
)


class LayerKind(enum.Enum):
    DENSE = "dense"
    CONV2D = "conv2d"
    BATCHNORM = "batchnorm"
    RELU = "relu"
    ACTIVATION_QUANT = "act_quant"
    WEIGHT_QUANT_DENSE = "wq_dense"
    WEIGHT_QUANT_CONV = "wq_conv"
    FLATTEN = "flatten"


_LAYER_CLASSES = {
    LayerKind.DENSE: Dense,
    LayerKind.CONV2D: Conv2D,
    LayerKind.BATCHNORM: BatchNorm,
    LayerKind.RELU: ReLU,
    LayerKind.ACTIVATION_QUANT: ActivationQuant,
    LayerKind.WEIGHT_QUANT_DENSE: WeightQuantDense,
    LayerKind.WEIGHT_QUANT_CONV: WeightQuantConv,
    LayerKind.FLATTEN: Flatten,
}


@dataclass(frozen=True)
class LayerSpec:
    kind: LayerKind
    dims: dict = field(default_factory=dict)
    activation_kind: str | None = None

    @property
    def quantized(self) -> bool:
        if self.kind is LayerKind.ACTIVATION_QUANT:
            return self.activation_kind in ("fta", "rta")
        return self.kind in (LayerKind.WEIGHT_QUANT_DENSE, LayerKind.WEIGHT_QUANT_CONV)

    def build(self, rng) -> Layer:
        cls = _LAYER_CLASSES[self.kind]
        kwargs = dict(self.dims)
        if self.kind is LayerKind.ACTIVATION_QUANT:
            return cls(self.activation_kind or "rta", **kwargs)
        if cls in (Dense, Conv2D, WeightQuantDense, WeightQuantConv):
            kwargs["rng"] = rng
        return cls(**kwargs)


@dataclass(frozen=True)
class NetworkSpec:
    input_shape: tuple
    layers: tuple

    def build(self, seed: int = 0) -> "Network":
        rng = np.random.default_rng(seed)
        return Network([spec.build(rng) for spec in self.layers], input_shape=self.input_shape)


class Network:
    def __init__(self, layers: Sequence[Layer], input_shape=None):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape) if input_shape is not None else None

    def forward(self, x, training=False, surrogate=False):
        x = np.asarray(x, dtype=np.float64)
        if self.input_shape is not None and tuple(x.shape[1:]) != self.input_shape:
            raise ValueError(
                f"input shape {tuple(x.shape[1:])} does not match network input {self.input_shape}"
            )
        for layer in self.layers:
            x = layer.forward(x, training=training, surrogate=surrogate)
        return x

    __call__ = forward

    def backward(self, g):
        for layer in reversed(self.layers):
            g = layer.backward(g)
        return g

    def zero_grad(self):
        for layer in self.layers:
            layer.zero_grad()

    def named_params(self):
        for i, layer in enumerate(self.layers):
            for name, p in layer.params.items():
                yield i, name, p

    def __eq__(self, other):
        from rtn.modelio import models_equal

        if not isinstance(other, Network):
            return NotImplemented
        return models_equal(self, other)

    def __repr__(self):
        inner = ",\n  ".join(repr(layer) for layer in self.layers)
        return f"Network(\n  {inner}\n)"


@dataclass
class GradRecord:
    """Per-layer gradient accumulators, ``per_layer[i][param_name]``."""

    per_layer: list

    @classmethod
    def from_network(cls, net: Network) -> "GradRecord":
        return cls([{k: np.array(v, copy=True) for k, v in layer.grads.items()} for layer in net.layers])

    @classmethod
    def zeros_like(cls, net: Network) -> "GradRecord":
        return cls([{k: np.zeros_like(p) for k, p in layer.params.items()} for layer in net.layers])

    def __getitem__(self, key):
        layer, name = key
        return self.per_layer[layer][name]

    def collect(self, name: str) -> list:
        return [g[name] for g in self.per_layer if name in g]

    def zero(self):
        for grads in self.per_layer:
            for g in grads.values():
                g[...] = 0.0

    @property
    def d_gamma(self):
        return self.collect("gamma")

    @property
    def d_beta(self):
        return self.collect("beta")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.03
    quant_param_lr: float = 0.03
    weight_quant_param_lr: float | None = None
    transform_lr: float | None = None
    epochs: int = 15000
    batch_size: int = 256
    seed: int = 0
    loss: str = "mse"
    lr_milestones: tuple = ()
    lr_decay: float = 0.1

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not self.quant_param_lr > 0:
            raise ValueError("quant_param_lr must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.loss not in ("mse", "cross_entropy"):
            raise ValueError(f"unknown loss {self.loss!r}")

    def at_epoch(self, epoch: int) -> "TrainConfig":
        """Config with every learning rate decayed for the milestones passed by ``epoch``."""
        passed = sum(1 for m in self.lr_milestones if epoch >= m)
        if not passed:
            return self
        f = self.lr_decay ** passed
        return replace(
            self,
            learning_rate=self.learning_rate * f,
            quant_param_lr=self.quant_param_lr * f,
            weight_quant_param_lr=None if self.weight_quant_param_lr is None
            else self.weight_quant_param_lr * f,
            transform_lr=None if self.transform_lr is None else self.transform_lr * f,
            lr_milestones=(),
        )


def loss_and_grad(pred, target, loss: str):
    if loss == "mse":
        return mse_loss(pred, target)
    return cross_entropy_loss(pred, target)


def forward_backward(net: Network, batch, cfg: TrainConfig, surrogate=False):
    """One forward pass in training mode and the full reverse sweep.

    Returns ``(loss, GradRecord)``. Raises ``FloatingPointError`` when the loss
    is not finite; the network's gradients are left untouched in that case.
    """
    x, y = batch
    pred = net.forward(x, training=True, surrogate=surrogate)
    if cfg.loss == "mse" and np.size(y) != pred.size:
        raise ValueError(f"targets of shape {np.shape(y)} do not match outputs {pred.shape}")
    loss, g = loss_and_grad(pred, y, cfg.loss)
    if not np.isfinite(loss):
        raise FloatingPointError(f"non-finite loss {loss}")
    net.zero_grad()
    net.backward(g)
    return loss, GradRecord.from_network(net)


def _lr_for(name: str, cfg: TrainConfig) -> float:
    if name in WEIGHT_QUANT_PARAM_NAMES:
        return cfg.weight_quant_param_lr or cfg.quant_param_lr
    if name in ("k", "b") and cfg.transform_lr is not None:
        return cfg.transform_lr
    if name in QUANT_PARAM_NAMES:
        return cfg.quant_param_lr
    return cfg.learning_rate


def sgd_step(net: Network, grads: GradRecord, cfg: TrainConfig) -> Network:
    """Plain SGD in place; gamma and alpha are clamped to stay positive."""
    for layer, layer_grads in zip(net.layers, grads.per_layer):
        for name, p in layer.params.items():
            if name in layer.frozen or name not in layer_grads:
                continue
            p -= _lr_for(name, cfg) * layer_grads[name]
            if name in ("gamma", "alpha"):
                np.maximum(p, GAMMA_FLOOR, out=p)
    return net


def calibrate(net: Network, x_sample) -> Network:
    """Initialize every reparameterized activation's gamma from data.

    Runs ``x_sample`` through the network with batch statistics and sets each gamma to
    the mean of |k*x + b| over entries above the threshold.
    """
    x = np.asarray(x_sample, dtype=np.float64)
    for layer in net.layers:
        if isinstance(layer, ActivationQuant) and "gamma" in layer.params:
            layer.params["gamma"][...] = selection_mean(layer.pre_activation(x))
        x = layer.forward(x, training=True)
    return net


def iterate_minibatches(rng, n: int, batch_size: int):
    order = rng.permutation(n) if batch_size < n else np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]
