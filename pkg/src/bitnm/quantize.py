"""Ternary weight quantization and int8 absmax activation quantization.

Both quantizers are pure array functions plus straight-through engine ops.
Rounding is half-away-from-zero throughout, which makes the nonzero
threshold |w| >= 0.5 * scale exact.

The stability guard floors the scale at eps (scale = max(absmean, eps))
instead of adding eps to the denominator: flooring keeps quantization
exactly scale-equivariant whenever the scale is healthy, while still
mapping all-zero inputs to all-zero outputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ShapeError

EPS = 1e-5  # numerical-stability constant shared by both quantizers

_f32 = np.float32


def round_half_away(x: np.ndarray) -> np.ndarray:
    """Round to nearest integer, ties away from zero (not banker's)."""
    return np.copysign(np.floor(np.abs(x) + _f32(0.5)), x)


@dataclass
class TernaryWeights:
    """Discrete {-1,0,+1} matrix with its per-tensor absmean scale."""

    values: np.ndarray  # int8, entries in {-1, 0, +1}
    gamma: float
    source_shape: tuple[int, int]

    def __post_init__(self):
        assert self.values.dtype == np.int8


@dataclass
class QuantizedActivations:
    """int8 matrix with one positive scale per token row."""

    values: np.ndarray  # int8 in [-128, 127]
    scale: np.ndarray  # float32, shape (rows,), scale = 127/(absmax+eps)


def absmean_scale(w: np.ndarray) -> float:
    """Mean absolute value over all entries (the ternary scale gamma)."""
    w = np.asarray(w, dtype=_f32)
    if w.size == 0:
        raise ShapeError("absmean_scale of empty tensor")
    return float(np.mean(np.abs(w), dtype=_f32))


def ternary_quantize(w: np.ndarray, eps: float = EPS) -> TernaryWeights:
    """Scale by max(absmean, eps), round half-away, clip to {-1,0,+1}."""
    w = np.asarray(w, dtype=_f32)
    if w.ndim != 2:
        raise ShapeError("ternary_quantize expects a 2-D weight matrix")
    gamma = max(absmean_scale(w), eps)
    q = np.clip(round_half_away(w / _f32(gamma)), -1, 1).astype(np.int8)
    return TernaryWeights(values=q, gamma=gamma, source_shape=w.shape)


def activation_quantize(x: np.ndarray, eps: float = EPS) -> QuantizedActivations:
    """Per-row absmax quantization to int8 in [-128, 127]."""
    x = np.asarray(x, dtype=_f32)
    if x.ndim != 2:
        raise ShapeError("activation_quantize expects a 2-D matrix (tokens x features)")
    absmax = np.maximum(np.max(np.abs(x), axis=1), _f32(eps))
    scl = (_f32(127.0) / absmax).astype(_f32)
    q = np.clip(round_half_away(x * scl[:, None]), -128, 127).astype(np.int8)
    return QuantizedActivations(values=q, scale=scl)


def dequantize(q: TernaryWeights | QuantizedActivations) -> np.ndarray:
    """Invert the scaling: gamma * values for weights, values / scale for rows."""
    if isinstance(q, TernaryWeights):
        return (q.values.astype(_f32) * _f32(q.gamma)).astype(_f32)
    return (q.values.astype(_f32) / q.scale[:, None]).astype(_f32)


def zero_fraction(q: TernaryWeights) -> float:
    """Fraction of ternary entries equal to zero."""
    return float(np.count_nonzero(q.values == 0)) / q.values.size


def zero_fraction_of(w: np.ndarray, eps: float = EPS) -> float:
    """Zero fraction the ternary quantizer would produce for this matrix.

    Uses the threshold law |w| < 0.5 * scale instead of materializing the
    quantized matrix.
    """
    w = np.asarray(w, dtype=_f32)
    gamma = max(absmean_scale(w), eps)
    return float(np.count_nonzero(np.abs(w) < _f32(0.5) * _f32(gamma))) / w.size


# ---------------------------------------------------------------------------
# straight-through engine ops
# ---------------------------------------------------------------------------

def ternary_quantize_ste(w: ad.Tensor, clip_gradient: bool = False, eps: float = EPS) -> ad.Tensor:
    """Fake-quant weights (gamma * ternary) with a straight-through backward.

    Default passes the upstream gradient unchanged (pure identity). With
    ``clip_gradient`` the gradient is gated to entries inside the clip
    range |w| <= gamma + eps.
    """
    tq = ternary_quantize(w.values, eps=eps)

    def forward(_):
        return dequantize(tq)

    def backward(g):
        if clip_gradient:
            return (g * (np.abs(w.values) <= _f32(tq.gamma)),)
        return (g,)

    return ad.custom_grad("ternary_quantize_ste", (w,), forward, backward)


def activation_quantize_ste(x: ad.Tensor, eps: float = EPS) -> ad.Tensor:
    """Fake-quant activations (int8 grid) with identity backward."""
    qa = activation_quantize(x.values, eps=eps)

    def forward(_):
        return dequantize(qa)

    def backward(g):
        return (g,)

    return ad.custom_grad("activation_quantize_ste", (x,), forward, backward)
