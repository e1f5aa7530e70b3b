"""Stateless backward rules and im2col helpers shared by the layers."""

from __future__ import annotations

import numpy as np

STE_CLIP = 1.0


def _same_shape(a, b, what):
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def ste_backward(a_bar, upstream) -> np.ndarray:
    """Clipped straight-through gradient: pass ``upstream`` where |a_bar| <= 1."""
    a_bar = np.asarray(a_bar, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    _same_shape(a_bar, upstream, "ste_backward")
    return np.where(np.abs(a_bar) <= STE_CLIP, upstream, 0.0)


def reparam_backward(a_t, upstream, gamma: float = 1.0):
    """Gradients of ``gamma * a_t + beta``.

    Returns ``(d_gamma, d_beta, d_a_t)``; the two scalars are sums over every
    element, and ``d_a_t = gamma * upstream`` is what flows on into the STE.
    """
    a_t = np.asarray(a_t, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    _same_shape(a_t, upstream, "reparam_backward")
    return float(np.sum(a_t * upstream)), float(np.sum(upstream)), gamma * upstream


def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    out = (size + 2 * pad - kernel) // stride + 1
    if out < 1:
        raise ValueError(
            f"kernel {kernel} with stride {stride}, padding {pad} does not fit input size {size}"
        )
    return out


def im2col(x: np.ndarray, kh: int, kw: int, stride: int = 1, pad: int = 0, pad_value=0):
    """Rearrange NCHW patches into rows of length ``C*kh*kw`` (ordered C, kh, kw).

    Rows are ordered (n, out_y, out_x).
    """
    n, c, h, w = x.shape
    oh = conv_output_size(h, kh, stride, pad)
    ow = conv_output_size(w, kw, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=pad_value)
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=x.dtype)
    for i in range(kh):
        i_end = i + stride * oh
        for j in range(kw):
            j_end = j + stride * ow
            cols[:, :, i, j, :, :] = x[:, :, i:i_end:stride, j:j_end:stride]
    return cols.transpose(0, 4, 5, 1, 2, 3).reshape(n * oh * ow, c * kh * kw)


def col2im(cols: np.ndarray, x_shape, kh: int, kw: int, stride: int = 1, pad: int = 0):
    """Adjoint of :func:`im2col`: scatter-add rows back onto an NCHW tensor."""
    n, c, h, w = x_shape
    oh = conv_output_size(h, kh, stride, pad)
    ow = conv_output_size(w, kw, stride, pad)
    cols = cols.reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    img = np.zeros((n, c, h + 2 * pad + stride - 1, w + 2 * pad + stride - 1), dtype=cols.dtype)
    for i in range(kh):
        i_end = i + stride * oh
        for j in range(kw):
            j_end = j + stride * ow
            img[:, :, i:i_end:stride, j:j_end:stride] += cols[:, :, i, j, :, :]
    return img[:, :, pad:pad + h, pad:pad + w]


def mse_loss(pred: np.ndarray, target: np.ndarray):
    target = np.asarray(target, dtype=np.float64).reshape(pred.shape)
    diff = pred - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


def cross_entropy_loss(logits: np.ndarray, labels: np.ndarray):
    labels = np.asarray(labels).astype(np.int64).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise ValueError(f"logits {logits.shape} do not match {labels.shape[0]} labels")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    n = labels.shape[0]
    loss = -float(log_probs[np.arange(n), labels].mean())
    grad = np.exp(log_probs)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n
