"""Central finite-difference checks of the reverse pass.

Checks run in surrogate mode, where every ternary quantizer forwards as
``clip(x, -1, 1)``, the function whose derivative the clipped STE returns.
The surrogate and ReLU have kinks; a difference quotient that straddles one is
meaningless. Batch norm over a channel whose batch variance is nearly zero (a
channel the ReLU has almost switched off) is close to a pole, where the
truncation error of a fixed step swamps the comparison. :func:`check_network`
reports either kind of network as unusable and callers draw a fresh one.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from rtn.nn.layers import (
    TERNARY_KINDS,
    ActivationQuant,
    BatchNorm,
    Conv2D,
    Dense,
    Flatten,
    ReLU,
    WeightQuantConv,
    WeightQuantDense,
)
from rtn.nn.network import Network, TrainConfig, forward_backward, loss_and_grad

STEP = 1e-4
RTOL = 1e-4
# gradients whose norm is below this are compared in absolute terms
ATOL = 1e-8
# batch-norm channels with a smaller batch variance make a network unusable
MIN_BATCH_VAR = 1e-2


@dataclass
class GradCheckResult:
    errors: dict = field(default_factory=dict)  # (layer, name) -> relative error
    kink_crossed: bool = False
    ill_conditioned: bool = False

    @property
    def usable(self) -> bool:
        return not (self.kink_crossed or self.ill_conditioned)

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.usable and self.max_error <= RTOL


def _kinks(net: Network):
    """Which side of every kink each element sits on, after the last forward."""
    sides = []
    for layer in net.layers:
        if isinstance(layer, ActivationQuant) and layer.activation_kind in TERNARY_KINDS:
            sides.append(np.abs(layer._a_bar) <= 1.0)
        elif isinstance(layer, ReLU):
            sides.append(layer._mask.copy())
        if isinstance(layer, (WeightQuantDense, WeightQuantConv)):
            sides.append(np.abs(layer._w_bar) <= 1.0)
    return sides


def _min_batch_var(net: Network) -> float:
    """Smallest per-channel batch variance seen by any batch norm in the last forward."""
    out = np.inf
    for layer in net.layers:
        if isinstance(layer, BatchNorm):
            out = min(out, float(np.min(1.0 / layer._inv_std ** 2 - layer.eps)))
    return out


def _loss(net, x, y, cfg):
    pred = net.forward(x, training=True, surrogate=True)
    return loss_and_grad(pred, y, cfg.loss)[0]


def relative_error(analytic, numeric) -> float:
    a = np.ravel(analytic)
    n = np.ravel(numeric)
    diff = float(np.linalg.norm(a - n))
    scale = max(float(np.linalg.norm(a)), float(np.linalg.norm(n)))
    if scale < ATOL:
        return 0.0 if diff <= ATOL else np.inf
    return diff / scale


def check_network(net: Network, x, y, cfg: TrainConfig, h: float = STEP) -> GradCheckResult:
    """Compare every parameter gradient with central differences of the loss."""
    _, grads = forward_backward(net, (x, y), cfg, surrogate=True)
    base = _kinks(net)
    result = GradCheckResult()
    if _min_batch_var(net) < MIN_BATCH_VAR:
        result.ill_conditioned = True
        return result
    for i, name, p in list(net.named_params()):
        numeric = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            up = _loss(net, x, y, cfg)
            same = all(np.array_equal(a, b) for a, b in zip(base, _kinks(net)))
            p[idx] = old - h
            down = _loss(net, x, y, cfg)
            same = same and all(np.array_equal(a, b) for a, b in zip(base, _kinks(net)))
            p[idx] = old
            if not same:
                result.kink_crossed = True
                return result
            numeric[idx] = (up - down) / (2 * h)
        result.errors[(i, name)] = relative_error(grads[(i, name)], numeric)
    return result


def _act(rng, kind=None):
    kind = kind or rng.choice(["fta", "rta", "tanh", "rtanh"])
    return ActivationQuant(
        str(kind), k=rng.uniform(0.5, 2.0), b=rng.uniform(-0.5, 0.5),
        gamma=rng.uniform(0.5, 2.0), beta=rng.uniform(-0.5, 0.5),
    )


def random_small_network(rng, conv: bool | None = None):
    """A random quantized net, its batch and loss config; sizes are kept tiny."""
    if conv is None:
        conv = bool(rng.integers(2))
    batch = int(rng.integers(3, 6))
    loss = str(rng.choice(["mse", "cross_entropy"]))
    n_out = int(rng.integers(2, 4))
    if conv:
        c, hw = int(rng.integers(1, 3)), int(rng.integers(4, 6))
        c1, c2 = int(rng.integers(2, 4)), int(rng.integers(2, 4))
        layers = [Conv2D(c, c1, 3, padding=1, bias=True, rng=rng), ReLU(),
                  BatchNorm(c1, affine=True), _act(rng, "rta")]
        layers[-1].pad = int(rng.integers(0, 2))
        if rng.integers(2):
            layers.append(WeightQuantConv(c1, c2, 3, stride=int(rng.integers(1, 3)), rng=rng))
        else:
            layers.append(Conv2D(c1, c2, 3, stride=int(rng.integers(1, 3)), bias=True, rng=rng))
        layers += [_act(rng), Flatten()]
        input_shape = (c, hw, hw)
    else:
        d, h1, h2 = int(rng.integers(2, 5)), int(rng.integers(2, 6)), int(rng.integers(2, 6))
        layers = [Dense(d, h1, bias=True, rng=rng), ReLU(), BatchNorm(h1, affine=True), _act(rng)]
        if rng.integers(2):
            layers.append(WeightQuantDense(h1, h2, rng=rng))
        else:
            layers.append(Dense(h1, h2, bias=True, rng=rng))
        layers.append(_act(rng))
        input_shape = (d,)
    shape = input_shape
    for layer in layers:
        shape = layer.output_shape(shape)
    layers.append(Dense(shape[0], n_out, bias=True, rng=rng))
    net = Network(layers, input_shape=input_shape)
    x = rng.normal(size=(batch,) + input_shape)
    if loss == "mse":
        y = rng.normal(size=(batch, n_out))
    else:
        y = rng.integers(0, n_out, size=batch)
    return net, x, y, TrainConfig(loss=loss)


def check_random_networks(count: int, seed: int = 0, max_draws: int | None = None):
    """Grad-check ``count`` usable random networks; returns their results."""
    rng = np.random.default_rng(seed)
    max_draws = max_draws or 20 * count
    results = []
    draws = 0
    while len(results) < count:
        if draws >= max_draws:
            raise RuntimeError(f"only {len(results)} of {count} random networks were usable")
        draws += 1
        net, x, y, cfg = random_small_network(rng)
        r = check_network(net, x, y, cfg)
        if r.usable:
            results.append(r)
    return results
