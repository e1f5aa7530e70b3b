"""Wall-clock microbenchmark of the three dot-product schemes.

Inputs are packed (or converted) once outside the timed region, so the timing
covers only the dot product itself. The float baseline is a naive elementwise
multiply followed by a sum, not a BLAS call.
"""

from __future__ import annotations

import csv
import io
import timeit
from dataclasses import dataclass

import numpy as np

from rtn.kernel import Scheme, count_ops, dot_packed, dot_quaternary_packed, encode, pack_quaternary

DEFAULT_LENGTHS = (64, 1024, 65536)
CSV_FIELDS = ("scheme", "length", "ns_per_dot", "ops_counted")


@dataclass(frozen=True)
class BenchRow:
    scheme: Scheme
    length: int
    ns_per_dot: float
    ops_counted: int


def naive_float_dot(x: np.ndarray, y: np.ndarray) -> float:
    return float(np.sum(x * y))


def _operands(scheme: Scheme, length: int, rng):
    if scheme is Scheme.TERNARY:
        return dot_packed, (encode(rng.integers(-1, 2, length)), encode(rng.integers(-1, 2, length)))
    if scheme is Scheme.QUATERNARY_2BIT:
        return dot_quaternary_packed, (pack_quaternary(rng.integers(0, 4, length)),
                                       pack_quaternary(rng.integers(0, 4, length)))
    x = rng.uniform(-1, 1, length).astype(np.float32)
    y = rng.uniform(-1, 1, length).astype(np.float32)
    return naive_float_dot, (x, y)


def time_dot(scheme, length: int, repeats: int = 5, seed: int = 0) -> BenchRow:
    """Best-of-``repeats`` time per call, each repeat auto-ranged to at least 0.2 s."""
    scheme = Scheme(scheme)
    fn, args = _operands(scheme, length, np.random.default_rng(seed))
    timer = timeit.Timer(lambda: fn(*args))
    number, _ = timer.autorange()
    best = min(timer.repeat(repeat=repeats, number=number)) / number
    return BenchRow(scheme, length, best * 1e9, count_ops(scheme, length).total)


def run_bench(lengths=DEFAULT_LENGTHS, schemes=tuple(Scheme), repeats: int = 5) -> list[BenchRow]:
    return [time_dot(s, n, repeats) for n in lengths for s in schemes]


def rows_to_csv(rows) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(CSV_FIELDS)
    for r in rows:
        writer.writerow([r.scheme.value, r.length, f"{r.ns_per_dot:.1f}", r.ops_counted])
    return out.getvalue()


def speedup(rows, length: int, baseline=Scheme.FLOAT32, scheme=Scheme.TERNARY) -> float:
    """``baseline`` time over ``scheme`` time at ``length``; above 1 means ``scheme`` is faster."""
    by_key = {(r.scheme, r.length): r.ns_per_dot for r in rows}
    return by_key[(Scheme(baseline), length)] / by_key[(Scheme(scheme), length)]
