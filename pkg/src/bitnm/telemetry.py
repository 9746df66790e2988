"""Per-step telemetry records and offline weight-statistics analyses.

Everything here is CSV-oriented; figure rendering lives in ``plots`` and
is wired up only by the CLI report paths.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError
from .sparsity import NMPattern, block_thresholds

_f32 = np.float32

TELEMETRY_HEADER = "step,train_loss,val_ppl,mean_flip_rate,near_zero_mass,zero_fraction"
LAYER_TELEMETRY_HEADER = "step,layer,flip_rate,near_zero_mass"
OVERLAY_HEADER = "bin_left,bin_right,weight_density,threshold_density"
HISTOGRAM_HEADER = "bin_left,bin_right,count"

DEFAULT_BINS = 101
DEFAULT_NORM_RANGE = (0.0, 3.0)


@dataclass
class TelemetryRecord:
    step: int
    train_loss: float
    val_ppl: float | None
    mean_flip_rate: float | None
    per_layer_flip_rate: list[float | None]
    near_zero_mass: float
    zero_fraction: float
    per_layer_near_zero: list[float] = field(default_factory=list)
    pattern: str = ""
    variant: str = ""
    weight_mode: str = ""


def near_zero_mass(w: np.ndarray) -> float:
    """Fraction of entries with |w| below half the mean absolute value.

    Returns NaN for an all-zero tensor (degenerate: mean |w| = 0).
    """
    w = np.asarray(w, dtype=_f32)
    if w.size == 0:
        raise ShapeError("near_zero_mass of empty tensor")
    mean_abs = float(np.mean(np.abs(w), dtype=_f32))
    if mean_abs == 0.0:
        return float("nan")
    return float(np.count_nonzero(np.abs(w) < _f32(0.5) * _f32(mean_abs))) / w.size


def weight_histogram(w: np.ndarray, bins: int = DEFAULT_BINS,
                     normalize_by_mean_abs: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Histogram of |w|/mean|w| (or of signed raw values); counts sum to size."""
    if bins < 2:
        raise ShapeError("histogram needs at least 2 bins")
    w = np.asarray(w, dtype=_f32).reshape(-1)
    if normalize_by_mean_abs:
        mean_abs = float(np.mean(np.abs(w), dtype=_f32))
        data = np.abs(w) / _f32(mean_abs) if mean_abs > 0 else np.abs(w)
        edges = np.linspace(DEFAULT_NORM_RANGE[0], DEFAULT_NORM_RANGE[1], bins + 1)
    else:
        data = w
        lo, hi = float(w.min()), float(w.max())
        if lo == hi:
            lo, hi = lo - 0.5, hi + 0.5
        edges = np.linspace(lo, hi, bins + 1)
    clipped = np.clip(data, edges[0], edges[-1])
    counts, _ = np.histogram(clipped, bins=edges)
    return edges, counts


def threshold_overlay(w: np.ndarray, pattern: NMPattern,
                      bins: int = DEFAULT_BINS) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """|w| histogram and per-block-threshold histogram on shared edges.

    Both axes are normalized by mean |w|; the threshold histogram totals
    the number of groups.
    """
    if bins < 2:
        raise ShapeError("histogram needs at least 2 bins")
    w = np.asarray(w, dtype=_f32)
    mean_abs = float(np.mean(np.abs(w), dtype=_f32))
    norm = _f32(mean_abs) if mean_abs > 0 else _f32(1.0)
    edges = np.linspace(DEFAULT_NORM_RANGE[0], DEFAULT_NORM_RANGE[1], bins + 1)
    mags = np.clip(np.abs(w).reshape(-1) / norm, edges[0], edges[-1])
    thr = np.clip(block_thresholds(w, pattern) / norm, edges[0], edges[-1])
    w_counts, _ = np.histogram(mags, bins=edges)
    t_counts, _ = np.histogram(thr, bins=edges)
    return edges, w_counts, t_counts


# ---------------------------------------------------------------------------
# CSV export
# ---------------------------------------------------------------------------

def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    fv = float(v)
    if math.isnan(fv):
        return "nan"
    return f"{fv:.6g}"


def export_rows_csv(path: str, header: str, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(header + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) if not isinstance(v, str) else v for v in row) + "\n")


def export_telemetry_csv(records: list[TelemetryRecord], path: str) -> None:
    rows = [(r.step, r.train_loss, r.val_ppl, r.mean_flip_rate,
             r.near_zero_mass, r.zero_fraction) for r in records]
    export_rows_csv(path, TELEMETRY_HEADER, rows)


def export_layer_telemetry_csv(records: list[TelemetryRecord],
                               layer_names: list[str], path: str) -> None:
    rows = []
    for r in records:
        for li, name in enumerate(layer_names):
            flip = r.per_layer_flip_rate[li] if r.per_layer_flip_rate else None
            nz = r.per_layer_near_zero[li] if r.per_layer_near_zero else None
            rows.append((r.step, name, flip, nz))
    export_rows_csv(path, LAYER_TELEMETRY_HEADER, rows)


def export_overlay_csv(edges: np.ndarray, w_counts: np.ndarray,
                       t_counts: np.ndarray, path: str) -> None:
    rows = [(edges[i], edges[i + 1], int(w_counts[i]), int(t_counts[i]))
            for i in range(len(w_counts))]
    export_rows_csv(path, OVERLAY_HEADER, rows)


def export_histogram_csv(edges: np.ndarray, counts: np.ndarray, path: str) -> None:
    rows = [(edges[i], edges[i + 1], int(counts[i])) for i in range(len(counts))]
    export_rows_csv(path, HISTOGRAM_HEADER, rows)


def read_csv(path: str) -> tuple[list[str], list[list[str]]]:
    """Tiny strict reader for the package's own CSV outputs."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip() != ""]
    header = lines[0].split(",")
    return header, [ln.split(",") for ln in lines[1:]]
