"""Linear layers composing ternary quantization with dynamic N:M masking.

``SparseBitLinear`` implements the quant-then-mask forward: the mask is
recomputed from the current master weights on every training forward, the
masked ternary weights multiply int8 activations in exact integer
arithmetic, and the backward treats both the quantizer and the mask as
transparent (dual STE), so every master entry receives gradient.

Three ablation variants change where the mask comes from or whether
masked entries get gradient; see ``Variant``.

``SparseFloatLinear`` is the float control: same dynamic masking and
mask-transparent backward, no quantization.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ShapeError, StateError
from .quantize import EPS, activation_quantize, round_half_away
from .sparsity import NMMask, NMPattern, generate_mask

_f32 = np.float32

# exact-integer float32 accumulation holds while 128 * d_in < 2**24
MAX_D_IN = 1 << 17


class Variant(enum.Enum):
    QUANT_THEN_MASK_DENSE_GRAD = "quant_then_mask"
    MASK_WITHOUT_GRAD = "mask_without_grad"
    MASK_FROM_QUANTIZED = "mask_from_quantized"
    SPARSE_BEFORE_QUANT = "sparse_before_quant"


@dataclass
class EffectiveWeights:
    """Masked ternary weights: zero wherever the mask bit is zero."""

    values: np.ndarray  # int8 in {-1, 0, +1}
    gamma: float
    mask: NMMask


class _MaskedLinearBase:
    """Shared mask bookkeeping: per-step recompute and flip telemetry."""

    def __init__(self, master: ad.Tensor, pattern: NMPattern):
        d_out, d_in = master.shape
        if d_in % pattern.group_size != 0:
            raise ConfigError(
                f"input dim {d_in} not divisible by group size {pattern.group_size}")
        if d_in > MAX_D_IN:
            raise ConfigError(f"input dim {d_in} exceeds exact-accumulation bound {MAX_D_IN}")
        self.master = master
        self.pattern = pattern
        self.sparsity_enabled = True
        self.last_mask: NMMask | None = None
        self.last_flip: float | None = None
        self.step_count = 0

    @property
    def d_out(self) -> int:
        return self.master.shape[0]

    @property
    def d_in(self) -> int:
        return self.master.shape[1]

    def set_sparsity_enabled(self, flag: bool) -> None:
        self.sparsity_enabled = bool(flag)

    def _ones_mask(self) -> NMMask:
        dense = NMPattern(self.pattern.group_size, self.pattern.group_size)
        return NMMask(bits=np.ones((self.d_out, self.d_in), dtype=np.uint8), pattern=dense)

    def _record_mask(self, mask: NMMask) -> None:
        prev = self.last_mask
        self.last_flip = None
        if prev is not None and prev.bits.shape == mask.bits.shape:
            self.last_flip = float(np.count_nonzero(mask.bits != prev.bits)) / mask.bits.size
        self.last_mask = mask
        self.step_count += 1


class SparseBitLinear(_MaskedLinearBase):
    """Bias-free linear layer over masked ternary weights and int8 activations."""

    def __init__(self, master: ad.Tensor, pattern: NMPattern,
                 variant: Variant = Variant.QUANT_THEN_MASK_DENSE_GRAD,
                 clip_ste: bool = False):
        super().__init__(master, pattern)
        self.variant = variant
        self.clip_ste = clip_ste
        self._saved = None

    def set_variant(self, variant: Variant) -> None:
        if self.step_count > 0 and variant != self.variant:
            raise ConfigError("variant switch mid-run is not allowed; runs are variant-homogeneous")
        self.variant = variant

    def effective_weights(self) -> EffectiveWeights:
        """Masked ternary weights for the current masters.

        Pure with respect to layer state; this is exactly what the next
        forward would use.
        """
        w = self.master.values
        if self.variant is Variant.SPARSE_BEFORE_QUANT:
            mask = generate_mask(w, self.pattern) if self.sparsity_enabled else self._ones_mask()
            masked = w * mask.bits
            gamma = max(float(np.mean(np.abs(masked), dtype=_f32)), EPS)
            w_eff = np.clip(round_half_away(masked / _f32(gamma)), -1, 1).astype(np.int8)
            return EffectiveWeights(values=w_eff, gamma=gamma, mask=mask)
        gamma = max(float(np.mean(np.abs(w), dtype=_f32)), EPS)
        w_q = np.clip(round_half_away(w / _f32(gamma)), -1, 1).astype(np.int8)
        if not self.sparsity_enabled:
            mask = self._ones_mask()
        elif self.variant is Variant.MASK_FROM_QUANTIZED:
            mask = generate_mask(w_q, self.pattern)
        else:
            mask = generate_mask(w, self.pattern)
        return EffectiveWeights(values=(w_q * mask.bits).astype(np.int8), gamma=gamma, mask=mask)

    def forward(self, x: ad.Tensor, record_mask: bool = True) -> ad.Tensor:
        """Quantize, mask, integer matmul, rescale; returns (T, d_out)."""
        if x.shape[-1] != self.d_in:
            raise ShapeError(f"input dim {x.shape[-1]} != layer d_in {self.d_in}")
        eff = self.effective_weights()
        w_eff, gamma, mask = eff.values.astype(_f32), eff.gamma, eff.mask
        if record_mask:
            self._record_mask(mask)

        qa = activation_quantize(x.values)
        x_int = qa.values.astype(_f32)  # integer-valued; float32 BLAS is exact here
        s = (_f32(gamma) / qa.scale).astype(_f32)  # per-token composed rescale
        mask_bits = mask.bits

        def fwd(_xv, _wv):
            return (x_int @ w_eff.T) * s[:, None]

        def bwd(g):
            g_master = None
            g_x = None
            if self.master.requires_grad:
                g_master = (g * s[:, None]).T @ x_int
                if self.variant is Variant.MASK_WITHOUT_GRAD:
                    g_master = g_master * mask_bits
                if self.clip_ste:
                    g_master = g_master * (np.abs(self.master.values) <= _f32(gamma))
            if x.requires_grad:
                g_x = (g @ w_eff) * _f32(gamma)
            return (g_x, g_master)

        self._saved = (x_int, s, w_eff, gamma, mask_bits)
        return ad.custom_grad("sparse_bitlinear", (x, self.master), fwd, bwd)

    def apply_backward(self, g_out: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Gradients (g_x, g_master) for the most recent forward.

        Test/introspection helper; training uses the tape.
        """
        if self._saved is None:
            raise StateError("backward before forward")
        x_int, s, w_eff, gamma, mask_bits = self._saved
        g = np.asarray(g_out, dtype=_f32)
        g_master = (g * s[:, None]).T @ x_int
        if self.variant is Variant.MASK_WITHOUT_GRAD:
            g_master = g_master * mask_bits
        if self.clip_ste:
            g_master = g_master * (np.abs(self.master.values) <= _f32(gamma))
        g_x = (g @ w_eff) * _f32(gamma)
        return g_x, g_master


class SparseFloatLinear(_MaskedLinearBase):
    """Float linear with the same dynamic N:M mask and transparent backward."""

    def forward(self, x: ad.Tensor, record_mask: bool = True) -> ad.Tensor:
        if x.shape[-1] != self.d_in:
            raise ShapeError(f"input dim {x.shape[-1]} != layer d_in {self.d_in}")
        mask = (generate_mask(self.master.values, self.pattern)
                if self.sparsity_enabled else self._ones_mask())
        if record_mask:
            self._record_mask(mask)
        w_masked = self.master.values * mask.bits

        def fwd(_xv, _wv):
            return _xv @ w_masked.T

        def bwd(g):
            g_master = g.T @ x.values if self.master.requires_grad else None
            g_x = g @ w_masked if x.requires_grad else None
            return (g_x, g_master)

        return ad.custom_grad("sparse_float_linear", (x, self.master), fwd, bwd)
