"""Binary model files (``.rtn``).

Layout, little-endian throughout::

    header (28 bytes)
        magic        4s   b"RTN1"
        version      u16
        model_type   u16  0 = training Network, 1 = QuantizedNetwork
        layer_count  u32
        payload_len  u64
        payload_crc  u32  CRC-32 of the payload
        header_crc   u32  CRC-32 of the 24 bytes above
    payload
        input shape  u8 ndim, then ndim x u32 (ndim 0 means unspecified)
        one record per layer: u8 kind tag, fixed geometry fields, float32
        parameter arrays, and for packed layers the presence words followed
        by the sign words (u64, row-major, one row per filter).

Reals are stored as float32, so a round trip is bit-exact for any model whose
parameters are float32-representable (everything loaded from a file is).
"""

from __future__ import annotations

import struct
import warnings
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from rtn.infer import QuantizedLayer, QuantizedNetwork, Ternarizer
from rtn.kernel import PackedTernaryMatrix, _padding_mask, n_words
from rtn.nn.layers import (
    ACTIVATION_KINDS,
    ActivationQuant,
    BatchNorm,
    Conv2D,
    Dense,
    Flatten,
    ReLU,
    WeightQuantConv,
    WeightQuantDense,
)
from rtn.nn.network import Network

MAGIC = b"RTN1"
VERSION = 1
MODEL_TRAINING = 0
MODEL_QUANTIZED = 1

_HEADER = struct.Struct("<4sHHIQI")
HEADER_SIZE = _HEADER.size + 4

TAG_DENSE = 1
TAG_CONV = 2
TAG_BATCHNORM = 3
TAG_RELU = 4
TAG_FLATTEN = 5
TAG_ACT_QUANT = 6
TAG_WQ_DENSE = 7
TAG_WQ_CONV = 8
TAG_TERNARIZER = 9
TAG_QUANTIZED = 10

_FROZEN_BITS = ("k", "b", "gamma", "beta")


class ModelFormatError(ValueError):
    """Bytes that cannot be decoded as a model file."""


class BadMagicError(ModelFormatError):
    pass


class CorruptHeaderError(ModelFormatError):
    pass


class UnsupportedVersionError(ModelFormatError):
    pass


class TruncatedError(ModelFormatError):
    pass


class UnknownLayerError(ModelFormatError):
    pass


class NonCanonicalError(ModelFormatError):
    pass


class ChecksumWarning(UserWarning):
    """The payload CRC does not match; the model loaded but may be damaged."""


@dataclass(frozen=True)
class Header:
    version: int
    model_type: int
    layer_count: int
    payload_length: int
    payload_crc: int


@dataclass(frozen=True)
class VerifyReport:
    header: Header
    payload_crc_ok: bool
    layer_count: int


# ---------------------------------------------------------------- writing

class _Writer:
    def __init__(self):
        self.parts: list[bytes] = []

    def pack(self, fmt, *values):
        self.parts.append(struct.pack("<" + fmt, *values))

    def f32(self, values):
        arr = np.asarray(values, dtype=np.float64).reshape(-1)
        self.parts.append(arr.astype("<f4").tobytes())

    def u64(self, words):
        self.parts.append(np.ascontiguousarray(words, dtype="<u8").tobytes())

    def getvalue(self) -> bytes:
        return b"".join(self.parts)


def _write_dense(w, layer, tag):
    w.pack("BII", tag, layer.in_features, layer.out_features)
    if tag == TAG_DENSE:
        w.pack("B", layer.bias)
    w.f32(layer.params["weight"])
    if tag == TAG_DENSE and layer.bias:
        w.f32(layer.params["bias"])


def _write_conv(w, layer, tag):
    w.pack("BIIII", tag, layer.in_channels, layer.out_channels, layer.kernel, layer.stride)
    if tag == TAG_CONV:
        w.pack("IB", layer.padding, layer.bias)
    w.f32(layer.params["weight"])
    if tag == TAG_CONV and layer.bias:
        w.f32(layer.params["bias"])


def _write_layer(w: _Writer, layer) -> None:
    if isinstance(layer, WeightQuantDense):
        _write_dense(w, layer, TAG_WQ_DENSE)
        w.f32([layer.params["k_w"], layer.params["b_w"]])
        w.f32(layer.params["alpha"])
    elif isinstance(layer, WeightQuantConv):
        _write_conv(w, layer, TAG_WQ_CONV)
        w.f32([layer.params["k_w"], layer.params["b_w"]])
        w.f32(layer.params["alpha"])
    elif isinstance(layer, Dense):
        _write_dense(w, layer, TAG_DENSE)
    elif isinstance(layer, Conv2D):
        _write_conv(w, layer, TAG_CONV)
    elif isinstance(layer, BatchNorm):
        w.pack("BIB", TAG_BATCHNORM, layer.channels, layer.affine)
        w.f32([layer.eps, layer.momentum])
        w.f32(layer.running_mean)
        w.f32(layer.running_var)
        if layer.affine:
            w.f32(layer.params["weight"])
            w.f32(layer.params["bias"])
    elif isinstance(layer, ReLU):
        w.pack("B", TAG_RELU)
    elif isinstance(layer, Flatten):
        w.pack("B", TAG_FLATTEN)
    elif isinstance(layer, ActivationQuant):
        mask = sum(1 << i for i, name in enumerate(_FROZEN_BITS) if name in layer.frozen)
        w.pack("BBIB", TAG_ACT_QUANT, ACTIVATION_KINDS.index(layer.activation_kind), layer.pad, mask)
        w.f32([layer.params["k"], layer.params["b"], layer.gamma, layer.beta])
    elif isinstance(layer, Ternarizer):
        w.pack("BBII", TAG_TERNARIZER, ACTIVATION_KINDS.index(layer.activation_kind), layer.pad,
               layer.scale.size)
        w.f32(layer.scale)
        w.f32(layer.shift)
        w.f32([layer.gamma, layer.beta])
    elif isinstance(layer, QuantizedLayer):
        pw = layer.packed_weights
        w.pack("BBBIIIIII", TAG_QUANTIZED, layer.kind == "conv", layer.relu, pw.rows, pw.length,
               layer.in_channels, layer.kernel, layer.stride, layer.padding)
        w.f32(layer.alpha)
        w.f32([layer.gamma, layer.beta])
        w.u64(pw.presence)
        w.u64(pw.sign)
    else:
        raise TypeError(f"cannot serialize layer of type {type(layer).__name__}")


def _layers_of(net):
    if isinstance(net, QuantizedNetwork):
        return MODEL_QUANTIZED, net.stages
    if isinstance(net, Network):
        return MODEL_TRAINING, net.layers
    raise TypeError(f"cannot serialize {type(net).__name__}")


def save_model(net) -> bytes:
    model_type, layers = _layers_of(net)
    w = _Writer()
    shape = net.input_shape or ()
    w.pack("B" + "I" * len(shape), len(shape), *shape)
    for layer in layers:
        _write_layer(w, layer)
    payload = w.getvalue()
    head = _HEADER.pack(MAGIC, VERSION, model_type, len(layers), len(payload), zlib.crc32(payload))
    return head + struct.pack("<I", zlib.crc32(head)) + payload


def save_file(net, path) -> None:
    Path(path).write_bytes(save_model(net))


# ---------------------------------------------------------------- reading

class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedError(
                f"payload truncated: need {n} bytes at offset {self.pos}, "
                f"{len(self.data) - self.pos} left"
            )
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        s = struct.Struct("<" + fmt)
        return s.unpack(self.take(s.size))

    def f32(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(4 * count), dtype="<f4").astype(np.float64)

    def u64(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * count), dtype="<u8").astype(np.uint64)


def _set(layer, name, values):
    p = layer.params[name]
    p[...] = np.asarray(values, dtype=np.float64).reshape(p.shape)


def _kind(index):
    if index >= len(ACTIVATION_KINDS):
        raise ModelFormatError(f"unknown activation kind index {index}")
    return ACTIVATION_KINDS[index]


def _read_planes(r, rows, length, lenient):
    words = n_words(length)
    presence = r.u64(rows * words).reshape(rows, words)
    sign = r.u64(rows * words).reshape(rows, words)
    if np.any(presence & ~_padding_mask(length)):
        raise NonCanonicalError("presence plane has bits set beyond the logical length")
    stray = sign & ~presence
    if np.any(stray):
        if not lenient:
            raise NonCanonicalError(
                "non-canonical zero encoding (presence 0, sign 1); load with lenient=True to normalize"
            )
        sign = sign & presence
    return PackedTernaryMatrix(length, presence, sign)


def _read_layer(r: _Reader, lenient: bool):
    (tag,) = r.unpack("B")
    if tag in (TAG_DENSE, TAG_WQ_DENSE):
        n_in, n_out = r.unpack("II")
        if tag == TAG_DENSE:
            (bias,) = r.unpack("B")
            layer = Dense(n_in, n_out, bias=bool(bias))
        else:
            layer = WeightQuantDense(n_in, n_out)
        _set(layer, "weight", r.f32(n_in * n_out))
        if tag == TAG_DENSE and layer.bias:
            _set(layer, "bias", r.f32(n_out))
    elif tag in (TAG_CONV, TAG_WQ_CONV):
        c_in, c_out, kernel, stride = r.unpack("IIII")
        if tag == TAG_CONV:
            padding, bias = r.unpack("IB")
            layer = Conv2D(c_in, c_out, kernel, stride, padding, bias=bool(bias))
        else:
            layer = WeightQuantConv(c_in, c_out, kernel, stride)
        _set(layer, "weight", r.f32(c_out * c_in * kernel * kernel))
        if tag == TAG_CONV and layer.bias:
            _set(layer, "bias", r.f32(c_out))
    elif tag == TAG_BATCHNORM:
        channels, affine = r.unpack("IB")
        eps, momentum = r.f32(2)
        layer = BatchNorm(channels, affine=bool(affine), eps=eps, momentum=momentum)
        layer.running_mean = r.f32(channels)
        layer.running_var = r.f32(channels)
        if layer.affine:
            _set(layer, "weight", r.f32(channels))
            _set(layer, "bias", r.f32(channels))
    elif tag == TAG_RELU:
        layer = ReLU()
    elif tag == TAG_FLATTEN:
        layer = Flatten()
    elif tag == TAG_ACT_QUANT:
        kind_index, pad, mask = r.unpack("BIB")
        frozen = {name for i, name in enumerate(_FROZEN_BITS) if mask >> i & 1}
        layer = ActivationQuant(_kind(kind_index), pad=pad, frozen=frozen)
        k, b, gamma, beta = r.f32(4)
        _set(layer, "k", k)
        _set(layer, "b", b)
        if "gamma" in layer.params:
            _set(layer, "gamma", gamma)
            _set(layer, "beta", beta)
    elif tag == TAG_TERNARIZER:
        kind_index, pad, n = r.unpack("BII")
        scale, shift = r.f32(n), r.f32(n)
        gamma, beta = r.f32(2)
        layer = Ternarizer(scale, shift, float(gamma), float(beta), pad, _kind(kind_index))
    elif tag == TAG_QUANTIZED:
        is_conv, relu, rows, length, c_in, kernel, stride, padding = r.unpack("BBIIIIII")
        alpha = r.f32(rows)
        gamma, beta = r.f32(2)
        planes = _read_planes(r, rows, length, lenient)
        try:
            layer = QuantizedLayer(planes, alpha, float(gamma), float(beta),
                                   kind="conv" if is_conv else "dense", in_channels=c_in,
                                   kernel=kernel, stride=stride, padding=padding, relu=bool(relu))
        except ValueError as exc:
            raise ModelFormatError(f"invalid quantized layer: {exc}") from exc
    else:
        raise UnknownLayerError(f"unknown layer kind tag {tag} at offset {r.pos - 1}")
    if isinstance(layer, (WeightQuantDense, WeightQuantConv)):
        k_w, b_w = r.f32(2)
        _set(layer, "k_w", k_w)
        _set(layer, "b_w", b_w)
        _set(layer, "alpha", r.f32(layer.params["alpha"].size))
    return layer


def read_header(data: bytes) -> Header:
    """Validate magic, header checksum and version, in that order."""
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagicError(f"bad magic {bytes(data[:4])!r}, expected {MAGIC!r}")
    if len(data) < HEADER_SIZE:
        raise TruncatedError(f"file is {len(data)} bytes, shorter than the {HEADER_SIZE}-byte header")
    head = data[:_HEADER.size]
    (stored_crc,) = struct.unpack_from("<I", data, _HEADER.size)
    if zlib.crc32(head) != stored_crc:
        raise CorruptHeaderError("header checksum mismatch")
    _, version, model_type, count, length, crc = _HEADER.unpack(head)
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported format version {version}")
    if model_type not in (MODEL_TRAINING, MODEL_QUANTIZED):
        raise ModelFormatError(f"unknown model type {model_type}")
    return Header(version, model_type, count, length, crc)


def _payload(data: bytes, header: Header) -> bytes:
    payload = data[HEADER_SIZE:]
    if len(payload) < header.payload_length:
        raise TruncatedError(
            f"payload truncated: header says {header.payload_length} bytes, found {len(payload)}"
        )
    if len(payload) > header.payload_length:
        raise ModelFormatError(f"{len(payload) - header.payload_length} trailing bytes after payload")
    return payload


def load_model(data: bytes, lenient: bool = False):
    """Decode a model; a payload checksum mismatch emits ``ChecksumWarning``.

    With ``lenient=True``, non-canonical zeros (presence 0, sign 1) are
    normalized instead of rejected.
    """
    data = bytes(data)
    header = read_header(data)
    payload = _payload(data, header)
    if zlib.crc32(payload) != header.payload_crc:
        warnings.warn("payload checksum mismatch; the model may be corrupted", ChecksumWarning,
                      stacklevel=2)
    r = _Reader(payload)
    (ndim,) = r.unpack("B")
    shape = r.unpack("I" * ndim) if ndim else None
    layers = [_read_layer(r, lenient) for _ in range(header.layer_count)]
    if r.pos != len(payload):
        raise ModelFormatError(f"{len(payload) - r.pos} unread payload bytes after the last layer")
    if header.model_type == MODEL_QUANTIZED:
        return QuantizedNetwork(layers, input_shape=shape)
    return Network(layers, input_shape=shape)


def load_file(path, lenient: bool = False):
    return load_model(Path(path).read_bytes(), lenient=lenient)


def verify_model(data: bytes) -> VerifyReport:
    """Check the header and payload checksum without raising on a payload mismatch."""
    data = bytes(data)
    header = read_header(data)
    payload = _payload(data, header)
    return VerifyReport(header, zlib.crc32(payload) == header.payload_crc, header.layer_count)


# ---------------------------------------------------------------- equality

def _bits_equal(a, b) -> bool:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return a.shape == b.shape and a.tobytes() == b.tobytes()


def _geometry(layer):
    names = ("in_features", "out_features", "in_channels", "out_channels", "kernel", "stride",
             "padding", "bias", "channels", "affine", "activation_kind", "pad")
    return {n: getattr(layer, n) for n in names if hasattr(layer, n)}


def layers_equal(a, b) -> bool:
    """Structural and bit-level equality of two layers or inference stages."""
    if type(a) is not type(b):
        return False
    if isinstance(a, QuantizedLayer):
        return (
            a.packed_weights == b.packed_weights
            and _bits_equal(a.alpha, b.alpha)
            and _bits_equal([a.gamma, a.beta], [b.gamma, b.beta])
            and (a.kind, a.in_channels, a.kernel, a.stride, a.padding, a.relu)
            == (b.kind, b.in_channels, b.kernel, b.stride, b.padding, b.relu)
        )
    if isinstance(a, Ternarizer):
        return (
            _bits_equal(a.scale, b.scale)
            and _bits_equal(a.shift, b.shift)
            and _bits_equal([a.gamma, a.beta], [b.gamma, b.beta])
            and (a.pad, a.activation_kind) == (b.pad, b.activation_kind)
        )
    if _geometry(a) != _geometry(b) or a.frozen != b.frozen:
        return False
    if a.params.keys() != b.params.keys():
        return False
    if not all(_bits_equal(a.params[k], b.params[k]) for k in a.params):
        return False
    if isinstance(a, BatchNorm):
        return (
            _bits_equal([a.eps, a.momentum], [b.eps, b.momentum])
            and _bits_equal(a.running_mean, b.running_mean)
            and _bits_equal(a.running_var, b.running_var)
        )
    return True


def models_equal(a, b) -> bool:
    if type(a) is not type(b):
        return False
    _, la = _layers_of(a)
    _, lb = _layers_of(b)
    return (
        a.input_shape == b.input_shape
        and len(la) == len(lb)
        and all(layers_equal(x, y) for x, y in zip(la, lb))
    )


def to_float32(net):
    """Round every real in ``net`` to float32 in place, so it survives a save bit-exactly."""
    _, layers = _layers_of(net)
    for layer in layers:
        if isinstance(layer, QuantizedLayer):
            layer.alpha = layer.alpha.astype(np.float32).astype(np.float64)
            layer.gamma = float(np.float32(layer.gamma))
            layer.beta = float(np.float32(layer.beta))
        elif isinstance(layer, Ternarizer):
            layer.scale = layer.scale.astype(np.float32).astype(np.float64)
            layer.shift = layer.shift.astype(np.float32).astype(np.float64)
            layer.gamma = float(np.float32(layer.gamma))
            layer.beta = float(np.float32(layer.beta))
        else:
            for p in layer.params.values():
                p[...] = p.astype(np.float32)
            if isinstance(layer, BatchNorm):
                layer.running_mean = layer.running_mean.astype(np.float32).astype(np.float64)
                layer.running_var = layer.running_var.astype(np.float32).astype(np.float64)
                layer.eps = float(np.float32(layer.eps))
                layer.momentum = float(np.float32(layer.momentum))
    return net
