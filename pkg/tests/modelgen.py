"""Random models with float32-representable parameters, for serialization tests."""

import numpy as np

from rtn.infer import QuantizedLayer, QuantizedNetwork, Ternarizer
from rtn.modelio import to_float32
from rtn.nn.gradcheck import random_small_network
from rtn.nn.layers import ACTIVATION_KINDS, ActivationQuant, BatchNorm, Dense, Flatten, ReLU


def random_training_model(rng):
    net, x, _, _ = random_small_network(rng)
    net.forward(x, training=True)  # moves the batch-norm running statistics
    # the file keeps freeze flags only for activation quantizers
    for layer in net.layers:
        if isinstance(layer, ActivationQuant) and rng.random() < 0.5:
            layer.frozen = {str(n) for n in rng.choice(["k", "b", "gamma", "beta"], 2, replace=False)}
    if rng.random() < 0.2:
        net.input_shape = None
    return to_float32(net)


def _ternarizer(rng, channels, pad=0):
    n = channels if rng.random() < 0.5 else 1
    return Ternarizer(rng.normal(size=n), rng.normal(size=n), float(rng.uniform(0.1, 2)),
                      float(rng.normal()), pad=pad,
                      activation_kind=str(rng.choice(ACTIVATION_KINDS[:2])))


def random_quantized_model(rng):
    if rng.random() < 0.5:
        d = int(rng.integers(1, 200))
        f = int(rng.integers(1, 9))
        stages = [_ternarizer(rng, 1),
                  QuantizedLayer.from_ternary(rng.integers(-1, 2, size=(f, d)), rng.uniform(0.1, 2, f),
                                              float(rng.uniform(0.1, 2)), float(rng.normal()),
                                              relu=bool(rng.integers(2)))]
        if rng.random() < 0.5:
            stages += [BatchNorm(f), _ternarizer(rng, f)]
            stages.append(Dense(f, 3, bias=bool(rng.integers(2)), rng=rng))
        shape = (d,)
    else:
        c, k, f = int(rng.integers(1, 5)), int(rng.choice([1, 3])), int(rng.integers(1, 6))
        hw = int(rng.integers(k, 9))
        stages = [_ternarizer(rng, c),
                  QuantizedLayer.from_ternary(rng.integers(-1, 2, size=(f, c, k, k)),
                                              rng.uniform(0.1, 2, f), float(rng.uniform(0.1, 2)),
                                              float(rng.normal()), kind="conv", in_channels=c,
                                              kernel=k, stride=int(rng.integers(1, 3)),
                                              padding=int(rng.integers(0, 2)),
                                              relu=bool(rng.integers(2))),
                  ReLU(), Flatten()]
        shape = (c, hw, hw)
    return to_float32(QuantizedNetwork(stages, input_shape=shape))


def random_model(rng):
    return random_quantized_model(rng) if rng.random() < 0.5 else random_training_model(rng)
