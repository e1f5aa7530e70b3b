#!/usr/bin/env python3
# %% [markdown]
# Reparameterized ternary activations and their gradients.

# %%
import numpy as np

from rtn.nn.layers import ActivationQuant
from rtn.quantize import ActivationQuantParams, reparam_activation, selection_mean, ternarize

# %%
x = np.array([-1.4, -0.6, -0.2, 0.3, 0.5, 0.9, 2.5])
t = ternarize(x)
gamma = selection_mean(x)
print("ternary ", t)
print("gamma   ", round(gamma, 4))
print("gamma*t ", reparam_activation(t, ActivationQuantParams(gamma=gamma)))
print("beta=0.4", reparam_activation(t, ActivationQuantParams(gamma=gamma, beta=0.4)))

# %% [markdown]
# Every input below sits outside the clip range, so the input gradient is
# zero. The scale and offset still receive gradient.

# %%
layer = ActivationQuant("rta", gamma=0.8, beta=0.1)
x = np.array([[1.5, -2.0, 3.0], [1.2, 4.0, -1.1]])
layer.forward(x, training=True)
dx = layer.backward(np.ones_like(x))
print("dx", dx.ravel())
print("d_gamma", layer.grads["gamma"], "d_beta", layer.grads["beta"])

# %%
# doubling gamma doubles every pre-activation gradient
x = np.array([[0.2, -0.7, 0.9]])
g = np.array([[1.0, -2.0, 0.5]])
for gamma in (0.5, 1.0):
    layer = ActivationQuant("rta", gamma=gamma)
    layer.forward(x, training=True)
    print(gamma, layer.backward(g))
