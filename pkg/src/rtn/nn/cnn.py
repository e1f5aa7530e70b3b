"""Small ternary CNN on the 8x8 handwritten digits set.

Layout (Conv -> ReLU -> BN -> Quant blocks, first and last layer full precision)::

    Conv2D(1->c1, 3x3, pad 1) ReLU BN
    ActQuant(pad 1) WQConv(c1->c2, 3x3, stride 2) ReLU BN
    ActQuant(pad 1) WQConv(c2->c3, 3x3, stride 2) ReLU BN
    ActQuant Flatten Dense(c3*2*2 -> 10, bias)

``mode="rtn-r"`` learns gamma and beta of every activation quantizer;
``mode="rtn-f"`` freezes gamma at its calibrated value and beta at 0.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from rtn.nn.layers import ActivationQuant, BatchNorm, Conv2D, Dense, Flatten, ReLU, WeightQuantConv
from rtn.nn.network import (
    Network,
    TrainConfig,
    calibrate,
    forward_backward,
    iterate_minibatches,
    sgd_step,
)

MODES = ("rtn-r", "rtn-f")

CNN_CONFIG = TrainConfig(
    learning_rate=0.05,
    quant_param_lr=0.03,
    weight_quant_param_lr=0.001,
    epochs=20,
    batch_size=32,
    lr_milestones=(15,),
    seed=0,
    loss="cross_entropy",
)


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray

    @property
    def input_shape(self):
        return tuple(self.x_train.shape[1:])

    @property
    def num_classes(self):
        return int(max(self.y_train.max(), self.y_test.max())) + 1


def split_dataset(x, y, test_fraction: float = 0.25, seed: int = 0) -> Dataset:
    """Fixed random train/test split."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if len(x) != len(y):
        raise ValueError(f"{len(x)} samples but {len(y)} labels")
    order = np.random.default_rng(seed).permutation(len(y))
    n_test = int(round(len(y) * test_fraction))
    test, train = order[:n_test], order[n_test:]
    return Dataset(x[train], y[train], x[test], y[test])


def load_digits_dataset(test_fraction: float = 0.25, seed: int = 0) -> Dataset:
    """sklearn's bundled 8x8 digits (1797 images), scaled to [0, 1], fixed split."""
    from sklearn.datasets import load_digits

    digits = load_digits()
    return split_dataset(digits.images[:, None, :, :] / 16.0, digits.target, test_fraction, seed)


def _act(mode, pad=0):
    frozen = {"gamma", "beta"} if mode == "rtn-f" else set()
    return ActivationQuant("rta", pad=pad, frozen=frozen)


def build_small_cnn(mode: str = "rtn-r", seed: int = 0, channels=(16, 32, 32),
                    input_shape=(1, 8, 8), num_classes: int = 10) -> Network:
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    rng = np.random.default_rng(seed)
    c1, c2, c3 = channels
    c_in, h, w = input_shape
    layers = [
        Conv2D(c_in, c1, 3, padding=1, rng=rng), ReLU(), BatchNorm(c1),
        _act(mode, pad=1), WeightQuantConv(c1, c2, 3, stride=2, rng=rng), ReLU(), BatchNorm(c2),
        _act(mode, pad=1), WeightQuantConv(c2, c3, 3, stride=2, rng=rng), ReLU(), BatchNorm(c3),
        _act(mode), Flatten(),
    ]
    shape = tuple(input_shape)
    for layer in layers:
        shape = layer.output_shape(shape)
    layers.append(Dense(shape[0], num_classes, bias=True, rng=rng))
    return Network(layers, input_shape=input_shape)


def accuracy(net: Network, x, y, batch_size: int = 256) -> float:
    correct = 0
    for start in range(0, len(y), batch_size):
        logits = net.forward(x[start:start + batch_size], training=False)
        correct += int(np.sum(logits.argmax(axis=1) == y[start:start + batch_size]))
    return correct / len(y)


def train_classifier(net: Network, data: Dataset, cfg: TrainConfig, calibrate_on: int = 256):
    """SGD on cross-entropy; returns the per-epoch mean training loss."""
    rng = np.random.default_rng(cfg.seed)
    calibrate(net, data.x_train[:calibrate_on])
    losses = []
    for epoch in range(cfg.epochs):
        step_cfg = cfg.at_epoch(epoch)
        total, count = 0.0, 0
        for idx in iterate_minibatches(rng, len(data.y_train), cfg.batch_size):
            loss, grads = forward_backward(net, (data.x_train[idx], data.y_train[idx]), step_cfg)
            sgd_step(net, grads, step_cfg)
            total += loss * len(idx)
            count += len(idx)
        losses.append(total / count)
    return losses


def run_cnn_experiment(mode: str, seed: int, data: Dataset | None = None,
                       cfg: TrainConfig = CNN_CONFIG, channels=(16, 32, 32)):
    """Train one small CNN; returns ``(test_accuracy, network)``."""
    data = load_digits_dataset() if data is None else data
    net = build_small_cnn(mode, seed=seed, channels=channels, input_shape=data.input_shape,
                          num_classes=data.num_classes)
    train_classifier(net, data, replace(cfg, seed=seed))
    return accuracy(net, data.x_test, data.y_test), net
