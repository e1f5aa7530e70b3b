"""Quantized inference on packed ternary weights and activations.

A quantized layer computes, per output filter ``f`` and input vector ``A^t``::

    d   = W_f^t . A^t                       (packed Boolean dot product)
    z_f = relu(alpha_f * gamma * d + C_f)   C_f = alpha_f * beta * sum(W_f^t)     (fused)
        = alpha_f * max(0, gamma * d + T_f) T_f = beta * sum(W_f^t)               (folded)

The real-valued tail of both forms is evaluated exactly (error-free products,
then one correctly rounded sum), so the two forms return identical floats.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from rtn.kernel import PackedTernaryMatrix, dot_packed_rows, pack_rows, unpack_rows
from rtn.nn.functional import conv_output_size, im2col
from rtn.nn.layers import (
    ActivationQuant,
    BatchNorm,
    Conv2D,
    Dense,
    Flatten,
    ReLU,
    WeightQuantConv,
    WeightQuantDense,
)
from rtn.nn.network import Network
from rtn.quantize import ternarize

__all__ = [
    "QuantizedLayer",
    "Ternarizer",
    "TernaryActivation",
    "QuantizedNetwork",
    "SparsityReport",
    "fused_layer_forward",
    "folded_relu_forward",
    "unfused_reference",
    "conv_im2col",
    "quantize_network",
    "measure_sparsity",
]

_SPLITTER = 134217729.0  # 2**27 + 1


def _split(a):
    c = _SPLITTER * a
    hi = c - (c - a)
    return hi, a - hi


def _two_prod(a, b):
    """Error-free product: ``a * b == p + e`` exactly (Dekker)."""
    p = a * b
    a_hi, a_lo = _split(a)
    b_hi, b_lo = _split(b)
    e = ((a_hi * b_hi - p) + a_hi * b_lo + a_lo * b_hi) + a_lo * b_lo
    return p, e


def _rounded_sum(terms, shape):
    flat = [np.ravel(np.broadcast_to(t, shape)) for t in terms]
    out = np.fromiter((math.fsum(t) for t in zip(*flat)), dtype=np.float64, count=flat[0].size)
    return out.reshape(shape)


def _fused_tail(scale_terms, c_terms, dot, relu):
    """round(scale * dot + C) with ``scale`` and ``C`` given as exact expansions."""
    d = dot.astype(np.float64)
    terms = []
    for s in scale_terms:
        terms.extend(_two_prod(s, d))
    terms.extend(c_terms)
    z = _rounded_sum(terms, d.shape)
    return np.maximum(z, 0.0) if relu else z


def _folded_tail(alpha, gamma, t_terms, dot, relu):
    """round(alpha * max(0, gamma * dot + T)) with ``T`` an exact expansion."""
    d = dot.astype(np.float64)
    inner = list(_two_prod(gamma, d)) + list(t_terms)
    shape = d.shape
    outer = []
    for t in inner:
        outer.extend(_two_prod(alpha, np.broadcast_to(t, shape)))
    z = _rounded_sum(outer, shape)
    if relu:
        positive = _rounded_sum(inner, shape) > 0
        z = np.where(positive, z, 0.0)
    return z


@dataclass(eq=False)
class QuantizedLayer:
    """Ternary dense or conv layer with per-filter scale and the activation's gamma/beta."""

    packed_weights: PackedTernaryMatrix
    alpha: np.ndarray
    gamma: float
    beta: float
    kind: str = "dense"
    in_channels: int = 0
    kernel: int = 1
    stride: int = 1
    padding: int = 0
    relu: bool = True
    weight_sum: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.kind not in ("dense", "conv"):
            raise ValueError(f"unknown quantized layer kind {self.kind!r}")
        self.alpha = np.asarray(self.alpha, dtype=np.float64).reshape(-1)
        if self.alpha.shape[0] != self.packed_weights.rows:
            raise ValueError(
                f"{self.alpha.shape[0]} alphas for {self.packed_weights.rows} filters"
            )
        if np.any(self.alpha <= 0):
            raise ValueError("alpha must be positive")
        self.gamma = float(self.gamma)
        self.beta = float(self.beta)
        if self.kind == "conv" and self.in_channels * self.kernel ** 2 != self.packed_weights.length:
            raise ValueError("conv geometry does not match the packed filter length")
        p, s = self.packed_weights.presence, self.packed_weights.sign
        pos = np.bitwise_count(p & s).sum(axis=1, dtype=np.int64)
        neg = np.bitwise_count(p & ~s).sum(axis=1, dtype=np.int64)
        self.weight_sum = pos - neg

    @classmethod
    def from_ternary(cls, ternary, alpha, gamma, beta, **geometry):
        t = np.asarray(ternary)
        return cls(pack_rows(t.reshape(t.shape[0], -1)), alpha, gamma, beta, **geometry)

    @property
    def filters(self) -> int:
        return self.packed_weights.rows

    @property
    def fan_in(self) -> int:
        return self.packed_weights.length

    @property
    def sparsity_threshold(self) -> np.ndarray:
        return self.beta * self.weight_sum.astype(np.float64)

    @property
    def precomputed_c(self) -> np.ndarray:
        return self.alpha * self.sparsity_threshold

    def ternary_weights(self) -> np.ndarray:
        return unpack_rows(self.packed_weights)

    # exact expansions of the per-filter constants
    def _scale_terms(self):
        return _two_prod(self.alpha, np.full_like(self.alpha, self.gamma))

    def _c_terms(self):
        s = self.weight_sum.astype(np.float64)
        c_hi, c_lo = _two_prod(self.alpha, np.full_like(self.alpha, self.beta))
        return (*_two_prod(c_hi, s), *_two_prod(c_lo, s))

    def _t_terms(self):
        return _two_prod(np.full(self.filters, self.beta), self.weight_sum.astype(np.float64))

    def __eq__(self, other):
        if not isinstance(other, QuantizedLayer):
            return NotImplemented
        return (
            self.packed_weights == other.packed_weights
            and np.array_equal(self.alpha, other.alpha)
            and self.gamma == other.gamma
            and self.beta == other.beta
            and (self.kind, self.in_channels, self.kernel, self.stride, self.padding, self.relu)
            == (other.kind, other.in_channels, other.kernel, other.stride, other.padding, other.relu)
        )


def _packed_dot(layer: QuantizedLayer, a_t) -> np.ndarray:
    if not isinstance(a_t, PackedTernaryMatrix):
        a = np.asarray(a_t)
        a_t = pack_rows(a.reshape(1, -1) if a.ndim == 1 else a)
    if a_t.length != layer.fan_in:
        raise ValueError(
            f"geometry mismatch: activation length {a_t.length}, layer fan-in {layer.fan_in}"
        )
    return dot_packed_rows(a_t, layer.packed_weights)


def fused_layer_forward(layer: QuantizedLayer, a_t) -> np.ndarray:
    """``relu(alpha*gamma*(W^t . A^t) + C)`` for every row of ``a_t``; shape (rows, filters)."""
    dot = _packed_dot(layer, a_t)
    return _fused_tail(layer._scale_terms(), layer._c_terms(), dot, layer.relu)


def folded_relu_forward(layer: QuantizedLayer, a_t) -> np.ndarray:
    """``alpha * max(0, gamma*(W^t . A^t) + T)``, the threshold-folded form."""
    dot = _packed_dot(layer, a_t)
    return _folded_tail(layer.alpha, layer.gamma, layer._t_terms(), dot, layer.relu)


def unfused_reference(layer: QuantizedLayer, a_t) -> np.ndarray:
    """Plain float evaluation of ``relu((alpha W^t) . (gamma A^t + beta))``."""
    a = np.asarray(a_t, dtype=np.float64)
    a = a.reshape(1, -1) if a.ndim == 1 else a
    w = layer.alpha[:, None] * layer.ternary_weights().astype(np.float64)
    z = (layer.gamma * a + layer.beta) @ w.T
    return np.maximum(z, 0.0) if layer.relu else z


def _as_ternary_map(x) -> np.ndarray:
    arr = np.asarray(x)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise ValueError(f"expected a (N, C, H, W) ternary map, got shape {arr.shape}")
    if not np.isin(arr, (-1, 0, 1)).all():
        raise ValueError("feature map must be ternary")
    return arr.astype(np.int8)


def conv_im2col(layer: QuantizedLayer, input_t, stride=None, padding=None, folded=False):
    """Convolve a ternary NCHW map; padded borders enter as ternary zeros.

    Returns an (N, filters, H_out, W_out) float array.
    """
    stride = layer.stride if stride is None else stride
    padding = layer.padding if padding is None else padding
    x = _as_ternary_map(input_t)
    n, c, h, w = x.shape
    if c != layer.in_channels:
        raise ValueError(f"geometry mismatch: {c} input channels, layer expects {layer.in_channels}")
    oh = conv_output_size(h, layer.kernel, stride, padding)
    ow = conv_output_size(w, layer.kernel, stride, padding)
    patches = pack_rows(im2col(x, layer.kernel, layer.kernel, stride, padding))
    forward = folded_relu_forward if folded else fused_layer_forward
    z = forward(layer, patches)
    return z.reshape(n, oh, ow, layer.filters).transpose(0, 3, 1, 2)


@dataclass(frozen=True)
class TernaryActivation:
    """Fixed ternary tensor plus the gamma/beta that reparameterize it."""

    values: np.ndarray
    gamma: float
    beta: float

    def materialize(self) -> np.ndarray:
        return self.gamma * self.values.astype(np.float64) + self.beta


@dataclass(eq=False)
class Ternarizer:
    """Per-channel ``scale*x + shift`` (batch norm and k, b folded) followed by Q."""

    scale: np.ndarray
    shift: np.ndarray
    gamma: float = 1.0
    beta: float = 0.0
    pad: int = 0
    activation_kind: str = "rta"

    def __post_init__(self):
        self.scale = np.atleast_1d(np.asarray(self.scale, dtype=np.float64))
        self.shift = np.atleast_1d(np.asarray(self.shift, dtype=np.float64))

    def __call__(self, x) -> TernaryActivation:
        x = np.asarray(x, dtype=np.float64)
        view = (1, -1) + (1,) * (x.ndim - 2)
        scale = self.scale.reshape(view) if self.scale.size > 1 else self.scale[0]
        shift = self.shift.reshape(view) if self.shift.size > 1 else self.shift[0]
        t = ternarize(scale * x + shift).astype(np.int8)
        if self.pad:
            p = self.pad
            t = np.pad(t, ((0, 0), (0, 0), (p, p), (p, p)))
        return TernaryActivation(t, self.gamma, self.beta)

    def __eq__(self, other):
        if not isinstance(other, Ternarizer):
            return NotImplemented
        return (
            np.array_equal(self.scale, other.scale)
            and np.array_equal(self.shift, other.shift)
            and (self.gamma, self.beta, self.pad, self.activation_kind)
            == (other.gamma, other.beta, other.pad, other.activation_kind)
        )


@dataclass
class SparsityReport:
    """Zero fractions per ternarizer (of A^t) and per quantized layer (of its ReLU output)."""

    activation_zero_fraction: list
    output_zero_fraction: list

    @property
    def fractions(self) -> list:
        return self.activation_zero_fraction


class QuantizedNetwork:
    """Inference stages: ``Ternarizer``, ``QuantizedLayer`` and eval-mode float layers."""

    def __init__(self, stages, input_shape=None):
        self.stages = list(stages)
        self.input_shape = tuple(input_shape) if input_shape is not None else None

    def run(self, x, record=None):
        x = np.asarray(x, dtype=np.float64)
        if self.input_shape is not None and tuple(x.shape[1:]) != self.input_shape:
            raise ValueError(
                f"geometry mismatch: input shape {tuple(x.shape[1:])}, "
                f"model expects {self.input_shape}"
            )
        state = x
        for stage in self.stages:
            if isinstance(stage, Ternarizer):
                if isinstance(state, TernaryActivation):
                    state = state.materialize()
                state = stage(state)
                if record is not None:
                    record["act"].append(state.values)
            elif isinstance(stage, QuantizedLayer):
                if not isinstance(state, TernaryActivation):
                    raise ValueError("a quantized layer needs a ternary input")
                if stage.kind == "conv":
                    state = conv_im2col(stage, state.values)
                else:
                    state = fused_layer_forward(stage, state.values.reshape(len(state.values), -1))
                if record is not None:
                    record["out"].append(state)
            elif isinstance(stage, Flatten) and isinstance(state, TernaryActivation):
                state = TernaryActivation(
                    state.values.reshape(len(state.values), -1), state.gamma, state.beta
                )
            else:
                if isinstance(state, TernaryActivation):
                    state = state.materialize()
                state = stage.forward(state, training=False)
        if isinstance(state, TernaryActivation):
            state = state.materialize()
        return state

    __call__ = run

    def quantized_layers(self):
        return [s for s in self.stages if isinstance(s, QuantizedLayer)]

    def __eq__(self, other):
        from rtn.modelio import layers_equal

        if not isinstance(other, QuantizedNetwork):
            return NotImplemented
        return self.input_shape == other.input_shape and len(self.stages) == len(other.stages) and all(
            layers_equal(a, b) for a, b in zip(self.stages, other.stages)
        )

    def __repr__(self):
        inner = ",\n  ".join(repr(s) for s in self.stages)
        return f"QuantizedNetwork(\n  {inner}\n)"


def _ternarizer_from(act: ActivationQuant, bn: BatchNorm | None, pad: int) -> Ternarizer:
    k = float(act.params["k"])
    b = float(act.params["b"])
    if bn is None:
        scale, shift = np.array([k]), np.array([b])
    else:
        bn_scale, bn_shift = bn.fold()
        scale, shift = k * bn_scale, k * bn_shift + b
    return Ternarizer(scale, shift, act.gamma, act.beta, pad=pad,
                      activation_kind=act.activation_kind)


def _quantized_from(layer, ternarizer: Ternarizer, relu: bool, padding: int) -> QuantizedLayer:
    ternary = layer.ternary_weight()
    alpha = layer.params["alpha"].copy()
    if isinstance(layer, WeightQuantConv):
        return QuantizedLayer.from_ternary(
            ternary, alpha, ternarizer.gamma, ternarizer.beta, kind="conv",
            in_channels=layer.in_channels, kernel=layer.kernel, stride=layer.stride,
            padding=padding, relu=relu,
        )
    return QuantizedLayer.from_ternary(
        ternary, alpha, ternarizer.gamma, ternarizer.beta, kind="dense",
        in_channels=layer.in_features, relu=relu,
    )


def quantize_network(net: Network) -> QuantizedNetwork:
    """Pack a trained network for inference.

    Batch norm directly before a ternary activation quantizer is folded into
    its transform; a ReLU directly after a weight-quantized layer becomes that
    layer's activation. Spatial padding of a quantizer feeding a ternary conv
    moves into the conv. Other layers pass through as eval-mode float layers.
    """
    layers = net.layers
    stages = []
    last_ternarizer = None
    i = 0
    while i < len(layers):
        layer = layers[i]
        nxt = layers[i + 1] if i + 1 < len(layers) else None
        if isinstance(layer, BatchNorm) and isinstance(nxt, ActivationQuant) and nxt.quantized:
            i += 1
            continue  # folded when the quantizer is reached
        if isinstance(layer, ActivationQuant) and layer.quantized:
            bn = layers[i - 1] if i > 0 and isinstance(layers[i - 1], BatchNorm) else None
            moves_pad = isinstance(nxt, WeightQuantConv)
            t = _ternarizer_from(layer, bn, pad=0 if moves_pad else layer.pad)
            stages.append(t)
            last_ternarizer = (t, layer.pad if moves_pad else 0)
        elif isinstance(layer, (WeightQuantConv, WeightQuantDense)):
            if last_ternarizer is None or not _feeds_from_ternarizer(stages):
                raise ValueError(
                    f"layer {i} ({layer.kind}) has ternary weights but no ternary input"
                )
            relu = isinstance(nxt, ReLU)
            t, pad = last_ternarizer
            stages.append(_quantized_from(layer, t, relu, pad))
            last_ternarizer = None
            if relu:
                i += 1
        elif isinstance(layer, (Dense, Conv2D, Flatten, ReLU, BatchNorm, ActivationQuant)):
            stages.append(layer)
        else:
            raise ValueError(f"unsupported layer kind {type(layer).__name__}")
        i += 1
    return QuantizedNetwork(stages, input_shape=net.input_shape)


def _feeds_from_ternarizer(stages) -> bool:
    for s in reversed(stages):
        if isinstance(s, Ternarizer):
            return True
        if not isinstance(s, Flatten):
            return False
    return False


def measure_sparsity(qnet: QuantizedNetwork, inputs) -> SparsityReport:
    record = {"act": [], "out": []}
    qnet.run(inputs, record=record)
    act = [float(np.mean(a == 0)) if a.size else 1.0 for a in _strip_padding(qnet, record["act"])]
    out = [float(np.mean(z == 0)) if z.size else 1.0 for z in record["out"]]
    return SparsityReport(act, out)


def _strip_padding(qnet, acts):
    ternarizers = [s for s in qnet.stages if isinstance(s, Ternarizer)]
    for t, a in zip(ternarizers, acts):
        if t.pad:
            p = t.pad
            a = a[:, :, p:-p, p:-p]
        yield a

