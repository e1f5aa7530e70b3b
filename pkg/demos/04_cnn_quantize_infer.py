#!/usr/bin/env python3
# %% [markdown]
# Train a small ternary CNN on 8x8 digits, pack it, and run packed inference.

# %%
import numpy as np

from rtn.infer import measure_sparsity, quantize_network
from rtn.modelio import load_model, save_model, to_float32
from rtn.nn.cnn import accuracy, load_digits_dataset, run_cnn_experiment

data = load_digits_dataset()
print(data.x_train.shape, data.x_test.shape)

# %%
results = {}
for mode in ("rtn-r", "rtn-f"):
    acc, net = run_cnn_experiment(mode, seed=0, data=data)
    results[mode] = to_float32(net)
    print(f"{mode}: test accuracy {acc:.4f}")

# %%
qnet = to_float32(quantize_network(results["rtn-r"]))
logits = qnet(data.x_test)
print("packed accuracy", np.mean(logits.argmax(axis=1) == data.y_test))
print("training-graph accuracy", accuracy(results["rtn-r"], data.x_test, data.y_test))

# %%
blob = save_model(qnet)
print(len(blob), "bytes;", "round trip equal:", load_model(blob) == qnet)

# %%
for mode, net in results.items():
    report = measure_sparsity(quantize_network(net), data.x_test)
    print(mode, [round(f, 3) for f in report.activation_zero_fraction])
