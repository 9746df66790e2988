"""N:M semi-structured mask generation and mask statistics.

Groups run along the input dimension (columns). ``generate_mask`` keeps
the N largest-magnitude entries per group of M consecutive weights with a
stable lower-index tie-break, so every run is reproducible bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import PatternError, ShapeError

_f32 = np.float32


@dataclass(frozen=True)
class NMPattern:
    """Keep ``n_keep`` out of every ``group_size`` consecutive input weights."""

    n_keep: int
    group_size: int

    def __post_init__(self):
        if not (1 <= self.n_keep <= self.group_size):
            raise PatternError(f"invalid pattern {self.n_keep}:{self.group_size}")

    @property
    def is_dense(self) -> bool:
        return self.n_keep == self.group_size

    @classmethod
    def parse(cls, text: str) -> "NMPattern":
        try:
            n, m = text.strip().split(":")
            return cls(int(n), int(m))
        except (ValueError, TypeError) as exc:
            raise PatternError(f"cannot parse pattern {text!r}") from exc

    def __str__(self) -> str:
        return f"{self.n_keep}:{self.group_size}"


@dataclass
class NMMask:
    """Binary keep-mask (uint8) whose groups each hold exactly N ones."""

    bits: np.ndarray  # uint8 of shape (d_out, d_in)
    pattern: NMPattern


def _grouped_abs(w: np.ndarray, pattern: NMPattern) -> np.ndarray:
    w = np.asarray(w)
    if w.ndim != 2:
        raise ShapeError("mask generation expects a 2-D matrix")
    d_out, d_in = w.shape
    m = pattern.group_size
    if d_in % m != 0:
        raise PatternError(f"input dim {d_in} not divisible by group size {m}")
    return np.abs(w.astype(_f32)).reshape(d_out, d_in // m, m)


def generate_mask(w: np.ndarray, pattern: NMPattern) -> NMMask:
    """Top-N-by-magnitude keep mask per group; ties prefer the lower index."""
    groups = _grouped_abs(w, pattern)
    d_out, n_groups, m = groups.shape
    n = pattern.n_keep
    # stable argsort of negated magnitudes: equal values keep ascending index
    order = np.argsort(-groups.reshape(-1, m), axis=-1, kind="stable")
    bits = np.zeros(d_out * n_groups * m, dtype=np.uint8)
    base = np.arange(d_out * n_groups, dtype=np.intp) * m
    bits[(base[:, None] + order[:, :n]).ravel()] = 1
    return NMMask(bits=bits.reshape(d_out, n_groups * m), pattern=pattern)


def validate_mask(mask: NMMask) -> bool:
    """True iff every group contains exactly N ones."""
    m = mask.pattern.group_size
    d_out, d_in = mask.bits.shape
    if d_in % m != 0:
        return False
    sums = mask.bits.reshape(d_out, d_in // m, m).sum(axis=-1)
    return bool(np.all(sums == mask.pattern.n_keep))


def flip_rate(mask_t: NMMask, mask_prev: NMMask) -> float:
    """Fraction of bits that differ between two masks of the same pattern."""
    if mask_t.bits.shape != mask_prev.bits.shape:
        raise ShapeError("flip_rate mask shapes differ")
    if mask_t.pattern != mask_prev.pattern:
        raise PatternError("flip_rate patterns differ")
    return float(np.count_nonzero(mask_t.bits != mask_prev.bits)) / mask_t.bits.size


def max_flip_rate(pattern: NMPattern) -> float:
    """Upper bound 2*min(N, M-N)/M on the flip rate for this pattern."""
    n, m = pattern.n_keep, pattern.group_size
    return 2.0 * min(n, m - n) / m


def block_thresholds(w: np.ndarray, pattern: NMPattern) -> np.ndarray:
    """Per group, the (N+1)-th largest |w|: the largest pruned magnitude."""
    if pattern.n_keep >= pattern.group_size:
        raise PatternError("block thresholds undefined for dense patterns (N = M)")
    groups = _grouped_abs(w, pattern)
    m = pattern.group_size
    # ascending sort: the (N+1)-th largest sits at index M-1-N
    return np.sort(groups, axis=-1)[..., m - 1 - pattern.n_keep].reshape(-1)
