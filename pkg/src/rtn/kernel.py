"""Bit-packed ternary vectors and Boolean-operation dot products.

Each ternary element is stored as two bits spread over two planes:

    presence  sign   value
        0       0      0
        0       1      0      (accepted on decode, never emitted)
        1       0     -1
        1       1     +1

Element ``i`` lives in bit ``i % 64`` of word ``i // 64`` (LSB-first).
Padding bits past the logical length are always zero.

The dot product of two packed vectors is

    popcount(c) - 2 * popcount((w_sign ^ a_sign) & c),   c = w_presence & a_presence

evaluated word by word and accumulated in a signed 64-bit integer.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np

WORD_BITS = 64

__all__ = [
    "WORD_BITS",
    "PackedTernaryVector",
    "PackedTernaryMatrix",
    "Scheme",
    "OpCountReport",
    "encode",
    "decode",
    "pack_rows",
    "unpack_rows",
    "dot_packed",
    "dot_packed_rows",
    "dot_naive",
    "dot_quaternary_2bit",
    "count_ops",
    "n_words",
]


def n_words(length: int) -> int:
    return (length + WORD_BITS - 1) // WORD_BITS


def _as_ternary_array(values) -> np.ndarray:
    arr = np.asarray(values)
    if arr.dtype == object:
        arr = arr.astype(np.float64)
    if arr.size and np.issubdtype(arr.dtype, np.floating) and np.isnan(arr).any():
        raise ValueError("ternary values must not be NaN")
    ok = (arr == -1) | (arr == 0) | (arr == 1)
    if not ok.all():
        bad = arr[~ok].ravel()[0]
        raise ValueError(f"ternary values must be in {{-1, 0, +1}}, got {bad!r}")
    return arr.astype(np.int8)


def _pack_bits(bits: np.ndarray) -> np.ndarray:
    """Pack a (..., n) boolean array into (..., ceil(n/64)) little-endian uint64 words."""
    n = bits.shape[-1]
    nw = n_words(n)
    padded = np.zeros(bits.shape[:-1] + (nw * WORD_BITS,), dtype=bool)
    padded[..., :n] = bits
    packed = np.packbits(padded, axis=-1, bitorder="little")
    return np.ascontiguousarray(packed).view("<u8").astype(np.uint64, copy=False)


def _unpack_bits(words: np.ndarray, length: int) -> np.ndarray:
    as_bytes = np.ascontiguousarray(words.astype("<u8", copy=False)).view(np.uint8)
    bits = np.unpackbits(as_bytes, axis=-1, bitorder="little")
    return bits[..., :length].astype(bool)


def _padding_mask(length: int) -> np.ndarray:
    """Mask of valid bits for every word of a plane of ``length`` elements."""
    mask = np.full(n_words(length), np.uint64(0xFFFFFFFFFFFFFFFF), dtype=np.uint64)
    tail = length % WORD_BITS
    if tail:
        mask[-1] = np.uint64((1 << tail) - 1)
    return mask


@dataclass(frozen=True, eq=False)
class PackedTernaryVector:
    """A ternary vector stored as presence and sign bit-planes of 64-bit words."""

    length: int
    presence: np.ndarray
    sign: np.ndarray

    def __post_init__(self):
        presence = np.asarray(self.presence, dtype=np.uint64).reshape(-1)
        sign = np.asarray(self.sign, dtype=np.uint64).reshape(-1)
        if self.length < 0:
            raise ValueError("length must be non-negative")
        nw = n_words(self.length)
        if presence.shape[0] != nw or sign.shape[0] != nw:
            raise ValueError(
                f"length {self.length} needs {nw} words per plane, "
                f"got presence={presence.shape[0]}, sign={sign.shape[0]}"
            )
        object.__setattr__(self, "presence", presence)
        object.__setattr__(self, "sign", sign)

    @property
    def n_words(self) -> int:
        return self.presence.shape[0]

    def is_canonical(self) -> bool:
        """True when padding bits are clear and every zero has its sign bit clear."""
        mask = _padding_mask(self.length)
        if np.any(self.presence & ~mask) or np.any(self.sign & ~mask):
            return False
        return not np.any(self.sign & ~self.presence)

    def canonical(self) -> "PackedTernaryVector":
        """Copy with non-canonical ``01`` zeros (and any padding) cleared."""
        mask = _padding_mask(self.length)
        presence = self.presence & mask
        return PackedTernaryVector(self.length, presence, self.sign & presence)

    def __len__(self) -> int:
        return self.length

    def __eq__(self, other):
        if not isinstance(other, PackedTernaryVector):
            return NotImplemented
        return (
            self.length == other.length
            and np.array_equal(self.presence, other.presence)
            and np.array_equal(self.sign, other.sign)
        )

    def __hash__(self):
        return hash((self.length, self.presence.tobytes(), self.sign.tobytes()))

    def __repr__(self):
        return f"PackedTernaryVector(length={self.length}, values={decode(self).tolist()!r})"


def encode(values: Sequence[int]) -> PackedTernaryVector:
    """Pack a 1-D ternary sequence. Zeros are emitted canonically as ``00``."""
    arr = _as_ternary_array(values).reshape(-1)
    return PackedTernaryVector(len(arr), _pack_bits(arr != 0), _pack_bits(arr > 0))


def decode(v: PackedTernaryVector) -> np.ndarray:
    """Unpack to an int8 array; a clear presence bit decodes to 0 whatever the sign bit."""
    present = _unpack_bits(v.presence, v.length)
    positive = _unpack_bits(v.sign, v.length)
    out = np.zeros(v.length, dtype=np.int8)
    out[present] = -1
    out[present & positive] = 1
    return out


def dot_packed(w: PackedTernaryVector, a: PackedTernaryVector) -> int:
    if w.length != a.length:
        raise ValueError(f"length mismatch: {w.length} vs {a.length}")
    c = w.presence & a.presence
    negative = (w.sign ^ a.sign) & c
    return int(np.bitwise_count(c).sum(dtype=np.int64)) - 2 * int(
        np.bitwise_count(negative).sum(dtype=np.int64)
    )


def dot_naive(w: Sequence[int], a: Sequence[int]) -> int:
    """Plain integer sum of elementwise products. Used as the oracle for ``dot_packed``."""
    if len(w) != len(a):
        raise ValueError(f"length mismatch: {len(w)} vs {len(a)}")
    total = 0
    for wi, ai in zip(w, a):
        total += int(wi) * int(ai)
    return total


@dataclass(frozen=True, eq=False)
class PackedTernaryMatrix:
    """Rows of equal-length packed ternary vectors, planes shaped ``(rows, words)``."""

    length: int
    presence: np.ndarray
    sign: np.ndarray

    def __post_init__(self):
        presence = np.asarray(self.presence, dtype=np.uint64)
        sign = np.asarray(self.sign, dtype=np.uint64)
        if presence.ndim != 2 or presence.shape != sign.shape:
            raise ValueError("planes must be 2-D arrays of identical shape")
        if presence.shape[1] != n_words(self.length):
            raise ValueError(f"length {self.length} needs {n_words(self.length)} words per row")
        object.__setattr__(self, "presence", presence)
        object.__setattr__(self, "sign", sign)

    @property
    def rows(self) -> int:
        return self.presence.shape[0]

    def row(self, i: int) -> PackedTernaryVector:
        return PackedTernaryVector(self.length, self.presence[i], self.sign[i])

    def is_canonical(self) -> bool:
        mask = _padding_mask(self.length)
        if np.any(self.presence & ~mask) or np.any(self.sign & ~mask):
            return False
        return not np.any(self.sign & ~self.presence)

    def canonical(self) -> "PackedTernaryMatrix":
        mask = _padding_mask(self.length)
        presence = self.presence & mask
        return PackedTernaryMatrix(self.length, presence, self.sign & presence)

    def __eq__(self, other):
        if not isinstance(other, PackedTernaryMatrix):
            return NotImplemented
        return (
            self.length == other.length
            and np.array_equal(self.presence, other.presence)
            and np.array_equal(self.sign, other.sign)
        )


def pack_rows(values) -> PackedTernaryMatrix:
    """Pack a 2-D ternary array row by row."""
    arr = _as_ternary_array(values)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D array, got shape {arr.shape}")
    return PackedTernaryMatrix(arr.shape[1], _pack_bits(arr != 0), _pack_bits(arr > 0))


def unpack_rows(m: PackedTernaryMatrix) -> np.ndarray:
    present = _unpack_bits(m.presence, m.length)
    positive = _unpack_bits(m.sign, m.length)
    out = np.zeros(present.shape, dtype=np.int8)
    out[present] = -1
    out[present & positive] = 1
    return out


def dot_packed_rows(w: PackedTernaryMatrix, a: PackedTernaryMatrix) -> np.ndarray:
    """All-pairs packed dot products, ``out[i, j] = dot(w.row(i), a.row(j))``.

    Same word-level formula as :func:`dot_packed`; words are reduced in index
    order for every pair.
    """
    if w.length != a.length:
        raise ValueError(f"length mismatch: {w.length} vs {a.length}")
    out = np.zeros((w.rows, a.rows), dtype=np.int64)
    for k in range(w.presence.shape[1]):
        c = w.presence[:, k, None] & a.presence[None, :, k]
        negative = (w.sign[:, k, None] ^ a.sign[None, :, k]) & c
        out += np.bitwise_count(c).astype(np.int64)
        out -= 2 * np.bitwise_count(negative).astype(np.int64)
    return out


@dataclass(frozen=True, eq=False)
class PackedQuaternaryVector:
    """Unsigned 2-bit values as two bit-planes (low bit, high bit), LSB-first words."""

    length: int
    low: np.ndarray
    high: np.ndarray

    @property
    def planes(self):
        return (self.low, self.high)


def pack_quaternary(values: Sequence[int]) -> PackedQuaternaryVector:
    arr = np.asarray(values, dtype=np.int64).reshape(-1)
    if arr.size and (arr.min() < 0 or arr.max() > 3):
        raise ValueError("quaternary values must be in [0, 3]")
    return PackedQuaternaryVector(arr.size, _pack_bits(arr & 1 == 1), _pack_bits(arr & 2 == 2))


def dot_quaternary_packed(x: PackedQuaternaryVector, y: PackedQuaternaryVector) -> int:
    """Sum over bit pairs (i, j) of popcount(x_i AND y_j) << (i + j)."""
    if x.length != y.length:
        raise ValueError(f"length mismatch: {x.length} vs {y.length}")
    total = 0
    for i, xp in enumerate(x.planes):
        for j, yp in enumerate(y.planes):
            total += int(np.bitwise_count(xp & yp).sum(dtype=np.int64)) << (i + j)
    return total


def dot_quaternary_2bit(x: Sequence[int], y: Sequence[int]) -> int:
    """Dot product of unsigned 2-bit vectors through four AND+popcount bit-plane terms."""
    xa = np.asarray(x, dtype=np.int64).reshape(-1)
    ya = np.asarray(y, dtype=np.int64).reshape(-1)
    if xa.shape != ya.shape:
        raise ValueError(f"length mismatch: {xa.shape[0]} vs {ya.shape[0]}")
    return dot_quaternary_packed(pack_quaternary(xa), pack_quaternary(ya))


class Scheme(enum.Enum):
    TERNARY = "ternary"
    QUATERNARY_2BIT = "quaternary"
    FLOAT32 = "float"


@dataclass(frozen=True)
class OpCountReport:
    scheme: Scheme
    length: int
    and_ops: int = 0
    xor_ops: int = 0
    popcount_ops: int = 0
    shift_ops: int = 0
    add_ops: int = 0
    mul_ops: int = 0

    @property
    def bitwise_ops(self) -> int:
        return self.and_ops + self.xor_ops

    @property
    def total(self) -> int:
        return (
            self.and_ops + self.xor_ops + self.popcount_ops
            + self.shift_ops + self.add_ops + self.mul_ops
        )


def count_ops(scheme: Scheme | str, length: int) -> OpCountReport:
    """Operation budget for one dot product of ``length`` elements.

    Ternary, per word: 2 AND, 1 XOR, 2 popcounts and 2 accumulating adds; once
    per dot product, 1 shift (the factor 2) and 1 subtract.
    Quaternary 2-bit, per word: 4 AND, 4 popcounts, 3 shifts (weights 2, 2, 4)
    and 4 adds.
    Float32: one multiply and one add per element.
    """
    scheme = Scheme(scheme)
    if length < 0:
        raise ValueError("length must be non-negative")
    words = n_words(length)
    if scheme is Scheme.TERNARY:
        fixed = 1 if words else 0
        return OpCountReport(
            scheme, length,
            and_ops=2 * words, xor_ops=words, popcount_ops=2 * words,
            shift_ops=fixed, add_ops=2 * words + fixed,
        )
    if scheme is Scheme.QUATERNARY_2BIT:
        return OpCountReport(
            scheme, length,
            and_ops=4 * words, popcount_ops=4 * words, shift_ops=3 * words, add_ops=4 * words,
        )
    return OpCountReport(scheme, length, add_ops=length, mul_ops=length)
