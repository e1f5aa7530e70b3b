"""XOR/XNOR toy problem: a 2-3-2 network without biases, full-precision weights.

Inputs are ``z + eps`` with ``z ~ Bernoulli(0.5)`` and ``eps ~ U(-0.3, 0.3)``
per coordinate; the two outputs are regressed onto XOR(z1, z2) and
XNOR(z1, z2) under MSE. Only the hidden activation differs between runs.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from rtn.nn.layers import ACTIVATION_KINDS, ActivationQuant, Dense
from rtn.nn.network import Network, TrainConfig, forward_backward, iterate_minibatches, sgd_step

TOY_CONFIG = TrainConfig(learning_rate=0.03, quant_param_lr=0.03, epochs=15000, batch_size=256)
N_SAMPLES = 256
HIDDEN = 3
NOISE = 0.3


def make_xor_xnor(rng, n: int = N_SAMPLES):
    z = rng.integers(0, 2, size=(n, 2))
    x = z + rng.uniform(-NOISE, NOISE, size=(n, 2))
    xor = (z[:, 0] ^ z[:, 1]).astype(np.float64)
    return x, np.stack([xor, 1.0 - xor], axis=1)


def build_toy_network(activation_kind: str, rng, init: str = "uniform") -> Network:
    if activation_kind not in ACTIVATION_KINDS:
        raise ValueError(
            f"unknown activation kind {activation_kind!r}; expected one of {ACTIVATION_KINDS}"
        )
    hidden = Dense(2, HIDDEN, rng=rng, init_scale=1.0)
    out = Dense(HIDDEN, 2, rng=rng, init_scale=1.0)
    if init == "zeros":
        hidden.params["weight"][...] = 0.0
        out.params["weight"][...] = 0.0
    elif init != "uniform":
        raise ValueError(f"unknown init {init!r}")
    # No bias anywhere: the transform stays the identity.
    act = ActivationQuant(activation_kind, frozen={"k", "b"})
    return Network([hidden, act, out], input_shape=(2,))


def run_toy_experiment(activation_kind: str, cfg: TrainConfig = TOY_CONFIG,
                       n_samples: int = N_SAMPLES, init: str = "uniform",
                       return_network: bool = False):
    """Train the toy network and return the per-epoch training MSE.

    The dataset is drawn once per seed; each epoch is one pass over it in
    minibatches of ``cfg.batch_size``, and the recorded MSE is the mean of the
    minibatch losses (computed before each update).
    """
    rng = np.random.default_rng(cfg.seed)
    net = build_toy_network(activation_kind, rng, init=init)
    x, y = make_xor_xnor(rng, n_samples)
    curve = np.empty(cfg.epochs)
    for epoch in range(cfg.epochs):
        total, count = 0.0, 0
        for idx in iterate_minibatches(rng, n_samples, cfg.batch_size):
            loss, grads = forward_backward(net, (x[idx], y[idx]), cfg)
            sgd_step(net, grads, cfg)
            total += loss * len(idx)
            count += len(idx)
        curve[epoch] = total / count
    if return_network:
        return curve, net
    return curve


def write_curve_csv(curve, path) -> None:
    with open(Path(path), "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["epoch", "mse"])
        for epoch, mse in enumerate(curve, start=1):
            writer.writerow([epoch, repr(float(mse))])
