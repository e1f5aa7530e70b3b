#!/usr/bin/env python3
# %% [markdown]
# The XOR/XNOR toy problem: four activation kinds, a few seeds each.

# %%
from dataclasses import replace
from pathlib import Path

import numpy as np

from rtn.nn.toy import TOY_CONFIG, run_toy_experiment, write_curve_csv

out = Path("toy_curves")
out.mkdir(exist_ok=True)

# %%
finals = {}
for kind in ("fta", "rta", "tanh", "rtanh"):
    finals[kind] = []
    for seed in range(3):
        curve = run_toy_experiment(kind, replace(TOY_CONFIG, seed=seed))
        write_curve_csv(curve, out / f"{kind}_seed{seed}.csv")
        finals[kind].append(curve[-1])
    print(f"{kind:>6}: median final MSE {np.median(finals[kind]):.4f}")

# %%
# learned scale and offset of one rta run
curve, net = run_toy_experiment("rta", TOY_CONFIG, return_network=True)
act = net.layers[1]
print(f"gamma {act.gamma:.3f}, beta {act.beta:.3f}, final MSE {curve[-1]:.4f}")
