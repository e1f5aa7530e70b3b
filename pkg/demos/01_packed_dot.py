#!/usr/bin/env python3
# %% [markdown]
# Ternary dot products on bit-planes.
#
# A ternary vector is stored as two bit-planes: presence (nonzero) and sign
# (positive). The dot product then needs only AND, XOR and two popcounts.

# %%
import numpy as np

from rtn.bench import run_bench, speedup
from rtn.kernel import Scheme, count_ops, decode, dot_naive, dot_packed, encode

# %%
w = np.array([1, 0, -1, 1, -1, 0, 1])
a = np.array([1, 1, -1, 1, -1, 0, 1])
pw, pa = encode(w), encode(a)
print("presence", format(int(pw.presence[0]), "07b")[::-1])
print("sign    ", format(int(pw.sign[0]), "07b")[::-1])
print("packed", dot_packed(pw, pa), "naive", dot_naive(w, a))

# %%
# decode ignores the sign bit of a zero, so "01" also reads as zero
v = encode([0, 1])
loose = type(v)(2, v.presence, v.sign | np.uint64(1))
print(decode(loose), loose.is_canonical(), loose.canonical() == v)

# %%
for scheme in Scheme:
    r = count_ops(scheme, 64)
    print(f"{scheme.value:>10}: popcount {r.popcount_ops}, bitwise {r.bitwise_ops}, total {r.total}")

# %%
rows = run_bench([1024, 65536], [Scheme.TERNARY, Scheme.FLOAT32], repeats=3)
for r in rows:
    print(f"{r.scheme.value:>8} n={r.length:<6} {r.ns_per_dot:10.0f} ns")
print(f"ternary speedup at 65536: {speedup(rows, 65536):.2f}x")
