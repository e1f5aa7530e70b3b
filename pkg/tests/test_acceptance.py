"""Acceptance checks. Each prints one PASS/FAIL line with the measured numbers.

Run under pytest, or directly: ``python tests/test_acceptance.py``.
"""

import itertools
import sys
import time
from dataclasses import replace

import numpy as np
import pytest
from modelgen import random_model

from rtn import bench
from rtn.infer import QuantizedLayer, folded_relu_forward, fused_layer_forward, unfused_reference
from rtn.kernel import PackedTernaryVector, Scheme, count_ops, decode, dot_naive, dot_packed, encode
from rtn.modelio import HEADER_SIZE, ModelFormatError, load_model, models_equal, save_model
from rtn.nn.cnn import load_digits_dataset, run_cnn_experiment
from rtn.nn.gradcheck import RTOL, STEP, check_random_networks
from rtn.nn.layers import ActivationQuant
from rtn.nn.toy import TOY_CONFIG, run_toy_experiment

SEEDS = range(11)


def report(number: int, name: str, ok: bool, detail: str) -> bool:
    print(f"{'PASS' if ok else 'FAIL'} [{number}] {name}: {detail}", flush=True)
    return ok


def check_kernel() -> bool:
    start = time.perf_counter()
    mismatches = pairs = 0
    for length in range(7):
        vectors = [np.array(v, dtype=np.int64) for v in itertools.product((-1, 0, 1), repeat=length)]
        packed = [encode(v) for v in vectors]
        for w, pw in zip(vectors, packed):
            for a, pa in zip(vectors, packed):
                mismatches += dot_packed(pw, pa) != dot_naive(w, a)
                pairs += 1
    exhaustive_s = time.perf_counter() - start
    rng = np.random.default_rng(0)
    for length in (63, 64, 65, 10_000):
        for _ in range(10_000):
            w = rng.integers(-1, 2, length)
            a = rng.integers(-1, 2, length)
            # the int64 inner product is the same exact sum as dot_naive, without the Python loop
            expected = dot_naive(w, a) if length < 100 else int(np.dot(w, a))
            mismatches += dot_packed(encode(w), encode(a)) != expected
            pairs += 1
    ok = mismatches == 0 and exhaustive_s < 10
    return report(1, "kernel", ok, f"{pairs} pairs, {mismatches} mismatches, "
                                   f"exhaustive length<=6 in {exhaustive_s:.2f}s")


def check_encoding() -> bool:
    failures = checked = 0
    for length in range(5):
        for v in itertools.product((-1, 0, 1), repeat=length):
            failures += not np.array_equal(decode(encode(v)), np.array(v, dtype=np.int8))
            checked += 1
    rng = np.random.default_rng(1)
    fuzzed = 0
    for _ in range(10_000):
        length = int(rng.integers(1, 200))
        w = encode(rng.integers(-1, 2, length))
        a = encode(rng.integers(-1, 2, length))
        expected = dot_packed(w, a)
        # set random sign bits under clear presence bits (the "01" zero)
        junk = rng.integers(0, 2**63, size=w.n_words, dtype=np.uint64) & ~w.presence
        junk &= encode(np.ones(length, dtype=int)).presence
        w01 = PackedTernaryVector(length, w.presence, w.sign | junk)
        failures += dot_packed(w01, a) != expected or dot_packed(a, w01) != expected
        failures += not np.array_equal(decode(w01), decode(w))
        fuzzed += int(np.bitwise_count(junk).sum())
    return report(2, "encoding", failures == 0,
                  f"{checked} exhaustive round trips, 10000 fuzzed pairs ({fuzzed} '01' zeros), "
                  f"{failures} failures")


def _random_layer(rng):
    filters = int(rng.integers(1, 9))
    fan_in = int(rng.integers(1, 300))
    w = rng.integers(-1, 2, size=(filters, fan_in))
    layer = QuantizedLayer.from_ternary(w, rng.uniform(0.01, 3.0, filters), float(rng.uniform(0.01, 3.0)),
                                        float(rng.uniform(-3.0, 3.0)), relu=bool(rng.integers(2)))
    return layer, rng.integers(-1, 2, size=(int(rng.integers(1, 5)), fan_in))


def check_fusion() -> bool:
    rng = np.random.default_rng(2)
    inexact = 0
    worst = 0.0
    for _ in range(10_000):
        layer, a = _random_layer(rng)
        fused = fused_layer_forward(layer, a)
        folded = folded_relu_forward(layer, a)
        inexact += not np.array_equal(fused, folded)
        # error relative to the magnitude of the accumulated terms alpha*|W_i|*|gamma*A_i + beta|
        w = np.abs(layer.ternary_weights()).astype(float) * layer.alpha[:, None]
        scale = np.abs(layer.gamma * a + layer.beta) @ w.T
        err = np.abs(fused - unfused_reference(layer, a))
        worst = max(worst, float(np.max(np.where(scale > 0, err / np.where(scale > 0, scale, 1), err))))
    ok = inexact == 0 and worst <= 1e-6
    return report(3, "fusion algebra", ok, f"10000 configs, fused!=folded in {inexact}, "
                                           f"max unfused relative error {worst:.2e} (tol 1e-6)")


def check_gradients() -> bool:
    results = check_random_networks(100, seed=0)
    worst = max(r.max_error for r in results)
    rng = np.random.default_rng(3)
    linear_failures = 0
    for _ in range(200):
        x = rng.normal(size=(5, 4)) * 2
        g = rng.normal(size=x.shape)
        k, b, gamma, beta = rng.uniform(0.5, 2), rng.normal(), rng.uniform(0.1, 3), rng.normal()
        factor = float(2.0 ** rng.integers(-3, 4))
        base = ActivationQuant("rta", k=k, b=b, gamma=gamma, beta=beta)
        base.forward(x, training=True)
        dx = base.backward(g)
        scaled = ActivationQuant("rta", k=k, b=b, gamma=gamma * factor, beta=beta)
        scaled.forward(x, training=True)
        linear_failures += not np.array_equal(scaled.backward(g), factor * dx)
    ok = worst <= RTOL and all(r.passed for r in results) and linear_failures == 0
    return report(4, "gradient checks", ok,
                  f"100 nets, h={STEP:g}, max relative error {worst:.2e} (tol {RTOL:g}); "
                  f"gamma-linearity failures {linear_failures}/200")


def check_saturation() -> bool:
    rng = np.random.default_rng(4)
    failures = 0
    for _ in range(1000):
        shape = (int(rng.integers(1, 6)), int(rng.integers(1, 9)))
        x = rng.uniform(1.01, 5.0, shape) * rng.choice([-1, 1], shape)
        layer = ActivationQuant("rta", gamma=float(rng.uniform(0.1, 3)), beta=float(rng.normal()))
        layer.forward(x, training=True)
        g = rng.normal(size=shape)
        dx = layer.backward(g)
        failures += bool(np.any(dx != 0.0))
        failures += layer.grads["gamma"] == 0.0 and layer.grads["beta"] == 0.0
    return report(5, "saturation escape", failures == 0,
                  f"1000 all-saturated batches, {failures} failures")


def check_toy() -> bool:
    start = time.perf_counter()
    finals = {}
    for kind in ("fta", "rta", "tanh", "rtanh"):
        finals[kind] = np.median([run_toy_experiment(kind, replace(TOY_CONFIG, seed=s))[-1]
                                  for s in SEEDS])
    elapsed = time.perf_counter() - start
    f = finals
    ordered = f["rtanh"] <= f["rta"] < f["tanh"] and f["rta"] < f["fta"]
    detail = ", ".join(f"{k} {v:.4f}" for k, v in f.items())
    return report(6, "toy ordering", ordered and elapsed < 300,
                  f"median final MSE over 11 seeds: {detail}; {elapsed:.0f}s")


def check_cnn() -> bool:
    data = load_digits_dataset()
    wins = 0
    rows = []
    for s in SEEDS:
        r, _ = run_cnn_experiment("rtn-r", s, data)
        f, _ = run_cnn_experiment("rtn-f", s, data)
        wins += r >= f
        rows.append(f"{r:.3f}/{f:.3f}")
    return report(7, "RTN-R vs RTN-F", wins >= 8,
                  f"R >= F in {wins}/11 seeds (R/F: {' '.join(rows)})")


def check_cost() -> bool:
    t = count_ops(Scheme.TERNARY, 64)
    q = count_ops(Scheme.QUATERNARY_2BIT, 64)
    fewer = t.popcount_ops < q.popcount_ops and t.bitwise_ops < q.bitwise_ops
    rows = bench.run_bench([65536], [Scheme.TERNARY, Scheme.FLOAT32], repeats=5)
    ratio = bench.speedup(rows, 65536)
    return report(8, "cost model", fewer and ratio > 1,
                  f"popcounts {t.popcount_ops} vs {q.popcount_ops}, bitwise {t.bitwise_ops} vs "
                  f"{q.bitwise_ops}; ternary is {ratio:.2f}x faster than float at 65536")


def check_serialization() -> bool:
    rng = np.random.default_rng(5)
    mismatches = undetected = flips = 0
    for i in range(1000):
        model = random_model(rng)
        data = save_model(model)
        back = load_model(data)
        mismatches += not models_equal(back, model) or save_model(back) != data
        if i % 50 == 0:
            for bit in range(HEADER_SIZE * 8):
                bad = bytearray(data)
                bad[bit // 8] ^= 1 << (bit % 8)
                flips += 1
                try:
                    load_model(bytes(bad))
                    undetected += 1
                except ModelFormatError:
                    pass
    ok = mismatches == 0 and undetected == 0
    return report(9, "serialization", ok, f"1000 round trips, {mismatches} mismatches; "
                                          f"{flips} header bit flips, {undetected} undetected")


CHECKS = [check_kernel, check_encoding, check_fusion, check_gradients, check_saturation,
          check_toy, check_cnn, check_cost, check_serialization]


@pytest.mark.slow
@pytest.mark.parametrize("check", CHECKS, ids=lambda c: c.__name__)
def test_acceptance(check, capsys):
    with capsys.disabled():
        print()
        assert check()


if __name__ == "__main__":
    results = [check() for check in CHECKS]
    sys.exit(0 if all(results) else 1)
