"""Layers with hand-written forward/backward passes.

Every layer keeps the tensors its backward pass needs from the most recent
``forward`` call, writes parameter gradients into ``self.grads`` and returns
the gradient with respect to its input.

``surrogate=True`` swaps each ternarizer for its straight-through surrogate
(clip to [-1, 1]) in the forward pass, so that finite differences see the
same function the backward pass differentiates.
"""

from __future__ import annotations

import numpy as np

from rtn.quantize import GAMMA_FLOOR, selection_mean, ternarize
from rtn.nn.functional import STE_CLIP, col2im, conv_output_size, im2col, ste_backward

ACTIVATION_KINDS = ("fta", "rta", "tanh", "rtanh")
TERNARY_KINDS = ("fta", "rta")
REPARAM_KINDS = ("rta", "rtanh")
QUANT_PARAM_NAMES = frozenset({"k", "b", "gamma", "beta"})
WEIGHT_QUANT_PARAM_NAMES = frozenset({"k_w", "b_w", "alpha"})


def _scalar(value: float) -> np.ndarray:
    return np.array(float(value), dtype=np.float64)


def _quantizer(x: np.ndarray, surrogate: bool) -> np.ndarray:
    if surrogate:
        return np.clip(x, -STE_CLIP, STE_CLIP)
    return ternarize(x)


class Layer:
    kind = "layer"
    quantized = False

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.frozen: set[str] = set()

    def forward(self, x, training=False, surrogate=False):
        raise NotImplementedError

    def backward(self, g):
        raise NotImplementedError

    def zero_grad(self):
        self.grads = {name: np.zeros_like(p) for name, p in self.params.items()}

    def output_shape(self, input_shape):
        return input_shape

    def __repr__(self):
        return f"{type(self).__name__}()"


class Dense(Layer):
    kind = "dense"

    def __init__(self, in_features, out_features, bias=False, rng=None, init_scale=None):
        super().__init__()
        self.in_features = int(in_features)
        self.out_features = int(out_features)
        self.bias = bool(bias)
        rng = np.random.default_rng(0) if rng is None else rng
        limit = np.sqrt(6.0 / self.in_features) if init_scale is None else init_scale
        self.params["weight"] = rng.uniform(-limit, limit, (self.out_features, self.in_features))
        if self.bias:
            self.params["bias"] = np.zeros(self.out_features)

    def effective_weight(self, surrogate=False):
        return self.params["weight"]

    def forward(self, x, training=False, surrogate=False):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ValueError(f"{self.kind}: expected (N, {self.in_features}) input, got {x.shape}")
        self._x = x
        w = self.effective_weight(surrogate)
        out = x @ w.T
        if self.bias:
            out = out + self.params["bias"]
        return out

    def backward(self, g):
        d_w = g.T @ self._x
        self.weight_backward(d_w)
        if self.bias:
            self.grads["bias"] = g.sum(axis=0)
        return g @ self._w_used

    def weight_backward(self, d_w):
        self._w_used = self.params["weight"]
        self.grads["weight"] = d_w

    def output_shape(self, input_shape):
        return (self.out_features,)

    def __repr__(self):
        return f"{type(self).__name__}({self.in_features} -> {self.out_features})"


class Conv2D(Layer):
    kind = "conv2d"

    def __init__(self, in_channels, out_channels, kernel=3, stride=1, padding=0, bias=False,
                 rng=None, init_scale=None):
        super().__init__()
        self.in_channels = int(in_channels)
        self.out_channels = int(out_channels)
        self.kernel = int(kernel)
        self.stride = int(stride)
        self.padding = int(padding)
        self.bias = bool(bias)
        rng = np.random.default_rng(0) if rng is None else rng
        fan_in = self.in_channels * self.kernel * self.kernel
        limit = np.sqrt(6.0 / fan_in) if init_scale is None else init_scale
        shape = (self.out_channels, self.in_channels, self.kernel, self.kernel)
        self.params["weight"] = rng.uniform(-limit, limit, shape)
        if self.bias:
            self.params["bias"] = np.zeros(self.out_channels)

    def effective_weight(self, surrogate=False):
        return self.params["weight"]

    def forward(self, x, training=False, surrogate=False):
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ValueError(
                f"{self.kind}: expected (N, {self.in_channels}, H, W) input, got {x.shape}"
            )
        n, _, h, w = x.shape
        oh = conv_output_size(h, self.kernel, self.stride, self.padding)
        ow = conv_output_size(w, self.kernel, self.stride, self.padding)
        self._x_shape = x.shape
        self._cols = im2col(x, self.kernel, self.kernel, self.stride, self.padding)
        wmat = self.effective_weight(surrogate).reshape(self.out_channels, -1)
        out = self._cols @ wmat.T
        if self.bias:
            out = out + self.params["bias"]
        return out.reshape(n, oh, ow, self.out_channels).transpose(0, 3, 1, 2)

    def backward(self, g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, self.out_channels)
        d_w = (g2.T @ self._cols).reshape(self.params["weight"].shape)
        self.weight_backward(d_w)
        if self.bias:
            self.grads["bias"] = g2.sum(axis=0)
        d_cols = g2 @ self._w_used.reshape(self.out_channels, -1)
        return col2im(d_cols, self._x_shape, self.kernel, self.kernel, self.stride, self.padding)

    def weight_backward(self, d_w):
        self._w_used = self.params["weight"]
        self.grads["weight"] = d_w

    def output_shape(self, input_shape):
        _, h, w = input_shape
        return (
            self.out_channels,
            conv_output_size(h, self.kernel, self.stride, self.padding),
            conv_output_size(w, self.kernel, self.stride, self.padding),
        )

    def __repr__(self):
        return (
            f"{type(self).__name__}({self.in_channels} -> {self.out_channels}, "
            f"k={self.kernel}, s={self.stride}, p={self.padding})"
        )


class _WeightQuantMixin:
    """Ternary weights ``alpha * Q(k_w * W + b_w)`` with a per-filter ``alpha``."""

    quantized = True

    def _init_quant(self):
        self.params["k_w"] = _scalar(1.0)
        self.params["b_w"] = _scalar(0.0)
        w = self.params["weight"]
        alpha = [selection_mean(f) for f in w.reshape(w.shape[0], -1)]
        self.params["alpha"] = np.array(alpha, dtype=np.float64)

    def _alpha_shape(self):
        return (-1,) + (1,) * (self.params["weight"].ndim - 1)

    def transformed_weight(self):
        return self.params["k_w"] * self.params["weight"] + self.params["b_w"]

    def ternary_weight(self):
        return ternarize(self.transformed_weight())

    def effective_weight(self, surrogate=False):
        self._w_bar = self.transformed_weight()
        self._w_t = _quantizer(self._w_bar, surrogate)
        return self.params["alpha"].reshape(self._alpha_shape()) * self._w_t

    def weight_backward(self, d_eff):
        alpha = self.params["alpha"].reshape(self._alpha_shape())
        axes = tuple(range(1, d_eff.ndim))
        self.grads["alpha"] = np.sum(self._w_t * d_eff, axis=axes)
        d_w_bar = ste_backward(self._w_bar, alpha * d_eff)
        self.grads["k_w"] = np.array(np.sum(self.params["weight"] * d_w_bar))
        self.grads["b_w"] = np.array(np.sum(d_w_bar))
        self.grads["weight"] = self.params["k_w"] * d_w_bar
        self._w_used = alpha * self._w_t


class WeightQuantDense(_WeightQuantMixin, Dense):
    kind = "wq_dense"

    def __init__(self, in_features, out_features, rng=None, init_scale=1.0):
        super().__init__(in_features, out_features, bias=False, rng=rng, init_scale=init_scale)
        self._init_quant()


class WeightQuantConv(_WeightQuantMixin, Conv2D):
    kind = "wq_conv"

    def __init__(self, in_channels, out_channels, kernel=3, stride=1, rng=None, init_scale=1.0):
        # Spatial padding belongs to the preceding ActivationQuant so that padded
        # positions carry ternary zeros (value beta after reparameterization).
        super().__init__(in_channels, out_channels, kernel, stride, padding=0, bias=False,
                         rng=rng, init_scale=init_scale)
        self._init_quant()


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, training=False, surrogate=False):
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, g):
        return np.where(self._mask, g, 0.0)


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x, training=False, surrogate=False):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, g):
        return g.reshape(self._shape)

    def output_shape(self, input_shape):
        return (int(np.prod(input_shape)),)


class BatchNorm(Layer):
    """Per-channel batch normalization over (N,) or (N, H, W)."""

    kind = "batchnorm"

    def __init__(self, channels, affine=False, eps=1e-5, momentum=0.1):
        super().__init__()
        self.channels = int(channels)
        self.affine = bool(affine)
        self.eps = float(eps)
        self.momentum = float(momentum)
        if self.affine:
            self.params["weight"] = np.ones(self.channels)
            self.params["bias"] = np.zeros(self.channels)
        self.running_mean = np.zeros(self.channels)
        self.running_var = np.ones(self.channels)

    def _view(self, v, ndim):
        return v.reshape((1, -1) + (1,) * (ndim - 2))

    def forward(self, x, training=False, surrogate=False):
        if x.shape[1] != self.channels:
            raise ValueError(f"batchnorm: expected {self.channels} channels, got {x.shape[1]}")
        axes = (0,) + tuple(range(2, x.ndim))
        if training:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            count = x.size // self.channels
            unbiased = var * count / max(count - 1, 1)
            self.running_mean = (1 - self.momentum) * self.running_mean + self.momentum * mean
            self.running_var = (1 - self.momentum) * self.running_var + self.momentum * unbiased
        else:
            mean, var = self.running_mean, self.running_var
        self._training = training
        self._inv_std = self._view(1.0 / np.sqrt(var + self.eps), x.ndim)
        self._x_hat = (x - self._view(mean, x.ndim)) * self._inv_std
        if self.affine:
            return self._x_hat * self._view(self.params["weight"], x.ndim) + self._view(
                self.params["bias"], x.ndim
            )
        return self._x_hat

    def backward(self, g):
        ndim = g.ndim
        axes = (0,) + tuple(range(2, ndim))
        if self.affine:
            self.grads["weight"] = np.sum(g * self._x_hat, axis=axes)
            self.grads["bias"] = np.sum(g, axis=axes)
            g = g * self._view(self.params["weight"], ndim)
        if not self._training:
            return g * self._inv_std
        mean_g = g.mean(axis=axes, keepdims=True)
        mean_gx = (g * self._x_hat).mean(axis=axes, keepdims=True)
        return self._inv_std * (g - mean_g - self._x_hat * mean_gx)

    def fold(self):
        """Eval-mode affine ``x -> scale * x + shift`` per channel."""
        inv_std = 1.0 / np.sqrt(self.running_var + self.eps)
        scale = inv_std
        shift = -self.running_mean * inv_std
        if self.affine:
            scale = scale * self.params["weight"]
            shift = shift * self.params["weight"] + self.params["bias"]
        return scale, shift

    def __repr__(self):
        return f"BatchNorm({self.channels}, affine={self.affine})"


class ActivationQuant(Layer):
    """``k*x + b`` then an activation of the given kind.

    fta:   Q(.)                  rta:   gamma * Q(.) + beta
    tanh:  tanh(.)               rtanh: gamma * tanh(.) + beta

    ``pad`` zero-pads the (pre-reparameterization) output spatially, so padded
    positions read ``beta`` downstream.
    """

    kind = "act_quant"

    def __init__(self, activation_kind="rta", k=1.0, b=0.0, gamma=1.0, beta=0.0, pad=0,
                 frozen=()):
        super().__init__()
        if activation_kind not in ACTIVATION_KINDS:
            raise ValueError(
                f"unknown activation kind {activation_kind!r}; expected one of {ACTIVATION_KINDS}"
            )
        self.activation_kind = activation_kind
        self.pad = int(pad)
        self.params["k"] = _scalar(k)
        self.params["b"] = _scalar(b)
        if activation_kind in REPARAM_KINDS:
            self.params["gamma"] = _scalar(max(gamma, GAMMA_FLOOR))
            self.params["beta"] = _scalar(beta)
        self.frozen = set(frozen)

    @property
    def quantized(self):
        return self.activation_kind in TERNARY_KINDS

    @property
    def gamma(self) -> float:
        return float(self.params.get("gamma", 1.0))

    @property
    def beta(self) -> float:
        return float(self.params.get("beta", 0.0))

    def pre_activation(self, x):
        return self.params["k"] * x + self.params["b"]

    def forward(self, x, training=False, surrogate=False):
        self._x = x
        self._a_bar = self.pre_activation(x)
        if self.activation_kind in TERNARY_KINDS:
            a_t = _quantizer(self._a_bar, surrogate)
        else:
            a_t = np.tanh(self._a_bar)
        self._squashed = a_t
        if self.pad:
            if a_t.ndim != 4:
                raise ValueError("spatial padding needs an NCHW input")
            p = self.pad
            a_t = np.pad(a_t, ((0, 0), (0, 0), (p, p), (p, p)))
        self._a_t = a_t
        if self.activation_kind in REPARAM_KINDS:
            return self.params["gamma"] * a_t + self.params["beta"]
        return a_t

    def backward(self, g):
        if self.activation_kind in REPARAM_KINDS:
            self.grads["gamma"] = np.array(np.sum(self._a_t * g))
            self.grads["beta"] = np.array(np.sum(g))
            g = self.params["gamma"] * g
        if self.pad:
            p = self.pad
            g = g[:, :, p:-p, p:-p]
        if self.activation_kind in TERNARY_KINDS:
            d_a_bar = ste_backward(self._a_bar, g)
        else:
            d_a_bar = g * (1.0 - self._squashed ** 2)
        self.grads["k"] = np.array(np.sum(self._x * d_a_bar))
        self.grads["b"] = np.array(np.sum(d_a_bar))
        return self.params["k"] * d_a_bar

    def output_shape(self, input_shape):
        if self.pad:
            c, h, w = input_shape
            return (c, h + 2 * self.pad, w + 2 * self.pad)
        return input_shape

    def __repr__(self):
        return f"ActivationQuant({self.activation_kind}, pad={self.pad}, frozen={sorted(self.frozen)})"
