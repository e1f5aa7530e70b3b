"""Forward quantization: affine transforms, ternarization and reparameterization.

Activations go through ``a -> k*a + b -> Q(.) -> gamma*Q(.) + beta``; weights
through ``w -> k_w*w + b_w -> Q(.) -> alpha*Q(.)`` with one ``alpha`` per
output filter. ``Q`` maps to sign(x) where |x| > 0.5 and to 0 elsewhere.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

THRESHOLD = 0.5
GAMMA_FLOOR = 1e-6

__all__ = [
    "THRESHOLD",
    "GAMMA_FLOOR",
    "ActivationQuantParams",
    "WeightQuantParams",
    "ternarize",
    "transform_activation",
    "reparam_activation",
    "quantize_weights",
    "init_from_full_precision",
    "selection_mean",
]


@dataclass(frozen=True)
class ActivationQuantParams:
    k: float = 1.0
    b: float = 0.0
    gamma: float = 1.0
    beta: float = 0.0

    def __post_init__(self):
        if not self.gamma > 0:
            object.__setattr__(self, "gamma", GAMMA_FLOOR)

    def with_gamma(self, gamma: float) -> "ActivationQuantParams":
        return replace(self, gamma=max(float(gamma), GAMMA_FLOOR))


@dataclass(frozen=True, eq=False)
class WeightQuantParams:
    alpha: np.ndarray
    k_w: float = 1.0
    b_w: float = 0.0

    def __post_init__(self):
        alpha = np.atleast_1d(np.asarray(self.alpha, dtype=np.float64))
        object.__setattr__(self, "alpha", np.maximum(alpha, GAMMA_FLOOR))

    def __eq__(self, other):
        if not isinstance(other, WeightQuantParams):
            return NotImplemented
        return (
            self.k_w == other.k_w
            and self.b_w == other.b_w
            and np.array_equal(self.alpha, other.alpha)
        )


def _check_finite(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if np.isnan(x).any():
        raise ValueError("cannot ternarize NaN")
    return x


def ternarize(x) -> np.ndarray:
    """Elementwise sign(x) where |x| > 0.5, else 0. Returns float64 in {-1, 0, 1}."""
    x = _check_finite(x)
    return np.where(np.abs(x) > THRESHOLD, np.sign(x), 0.0)


def transform_activation(a, p: ActivationQuantParams) -> np.ndarray:
    return p.k * np.asarray(a, dtype=np.float64) + p.b


def reparam_activation(a_t, p: ActivationQuantParams) -> np.ndarray:
    return p.gamma * np.asarray(a_t, dtype=np.float64) + p.beta


def quantize_weights(w, p: WeightQuantParams) -> tuple[np.ndarray, np.ndarray]:
    """Ternarize weights shaped ``(filters, ...)``.

    Returns the ternary tensor and the per-filter ``alpha``; the effective
    weight of filter ``f`` is ``alpha[f] * ternary[f]``.
    """
    w = np.asarray(w, dtype=np.float64)
    ternary = ternarize(p.k_w * w + p.b_w)
    filters = w.shape[0] if w.ndim > 1 else 1
    alpha = np.broadcast_to(p.alpha, (filters,)).copy()
    return ternary, alpha


def selection_mean(x, fallback: float = 1.0) -> float:
    """Mean of |x| over entries with |x| > 0.5; ``fallback`` when none qualify."""
    mag = np.abs(_check_finite(x))
    picked = mag[mag > THRESHOLD]
    if picked.size == 0:
        return fallback
    return float(picked.mean())


def init_from_full_precision(w, a_sample) -> tuple[WeightQuantParams, ActivationQuantParams]:
    """TWN-style starting point: identity transforms, beta = 0, scales from selection means.

    ``w`` is shaped ``(filters, ...)`` (a 1-D array is one filter).
    """
    w = np.asarray(w, dtype=np.float64)
    filters = w.reshape(1, -1) if w.ndim == 1 else w.reshape(w.shape[0], -1)
    alpha = np.array([selection_mean(f) for f in filters])
    gamma = selection_mean(a_sample)
    return WeightQuantParams(alpha=alpha), ActivationQuantParams(gamma=gamma)
