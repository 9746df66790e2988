"""Matplotlib figure rendering for the CLI report paths.

Every function writes a PNG next to the delimited output it visualizes.
The analysis modules themselves stay plot-free; this is presentation only.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

DPI = 150


def _save(fig, path: str) -> None:
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)


def plot_run_curves(records, ppl_curve, path: str) -> None:
    """Train loss per step with validation PPL checkpoints on a twin axis."""
    steps = [r.step for r in records]
    losses = [r.train_loss for r in records]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(steps, losses, lw=0.7, color="tab:blue", label="train loss")
    ax.set_xlabel("step")
    ax.set_ylabel("train loss")
    if ppl_curve:
        ax2 = ax.twinx()
        xs, ys = zip(*ppl_curve)
        ax2.plot(xs, ys, "o-", ms=3, color="tab:orange", label="val PPL")
        ax2.set_ylabel("val PPL")
    ax.set_title("training curves")
    _save(fig, path)


def plot_flip_rate(records, path: str) -> None:
    pts = [(r.step, r.mean_flip_rate) for r in records if r.mean_flip_rate is not None]
    fig, ax = plt.subplots(figsize=(7, 3.2))
    if pts:
        xs, ys = zip(*pts)
        ax.plot(xs, ys, lw=0.8, color="tab:green")
    ax.set_xlabel("step")
    ax.set_ylabel("mask flip rate")
    ax.set_title("mask flip rate")
    _save(fig, path)


def plot_near_zero(records, path: str) -> None:
    fig, ax = plt.subplots(figsize=(7, 3.2))
    ax.plot([r.step for r in records], [r.near_zero_mass for r in records],
            lw=0.8, color="tab:red", label="near-zero mass")
    ax.plot([r.step for r in records], [r.zero_fraction for r in records],
            lw=0.8, color="tab:purple", label="ternary zero fraction")
    ax.set_xlabel("step")
    ax.set_ylim(0, 1)
    ax.legend()
    ax.set_title("master-weight polarization")
    _save(fig, path)


def plot_sweep(rows, path: str) -> None:
    """Normalized PPL vs pattern, one line per weight family."""
    fig, ax = plt.subplots(figsize=(6.5, 4))
    families = sorted({r.family for r in rows})
    patterns = []
    for r in rows:
        if r.pattern not in patterns:
            patterns.append(r.pattern)
    for fam in families:
        ys = [next(r.norm_ppl for r in rows if r.family == fam and r.pattern == p)
              for p in patterns]
        ax.plot(range(len(patterns)), ys, "o-", label=fam)
    ax.axhline(1.10, color="gray", ls="--", lw=0.8, label="10% degradation")
    ax.set_xticks(range(len(patterns)), patterns)
    ax.set_xlabel("pattern")
    ax.set_ylabel("normalized PPL (vs own 8:8)")
    ax.legend()
    ax.set_title("sparsity friendliness")
    _save(fig, path)


def plot_ablation(results: dict, path: str) -> None:
    """Two panels: validation PPL curves and mask flip rates per variant."""
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(11, 4))
    for name, res in results.items():
        if res.ppl_curve:
            xs, ys = zip(*res.ppl_curve)
            ax1.plot(xs, ys, "o-", ms=2.5, lw=1, label=name)
        pts = [(r.step, r.mean_flip_rate) for r in res.records
               if r.mean_flip_rate is not None]
        if pts:
            xs, ys = zip(*pts)
            ax2.plot(xs, ys, lw=0.8, label=name)
    ax1.set_xlabel("step")
    ax1.set_ylabel("val PPL")
    ax1.set_title("validation perplexity")
    ax1.legend(fontsize=8)
    ax2.set_xlabel("step")
    ax2.set_ylabel("flip rate")
    ax2.set_title("mask flip rate")
    ax2.legend(fontsize=8)
    _save(fig, path)


def plot_bench(reports, path: str) -> None:
    fig, ax = plt.subplots(figsize=(6.5, 4))
    labels = [f"{r.shape[0]}x{r.shape[1]}x{r.shape[2]}\n{r.pattern}" for r in reports]
    ax.bar(range(len(reports)), [r.speedup for r in reports], color="tab:blue")
    ax.axhline(1.0, color="black", lw=0.8)
    ax.set_xticks(range(len(reports)), labels, fontsize=8)
    ax.set_ylabel("dense / sparse wall time")
    ax.set_title("packed kernel speedup")
    _save(fig, path)


def plot_histogram(edges: np.ndarray, counts: np.ndarray, path: str,
                   title: str = "weight histogram", xlabel: str = "|w| / mean|w|") -> None:
    fig, ax = plt.subplots(figsize=(6.5, 4))
    ax.stairs(counts, edges, fill=True, color="tab:blue", alpha=0.7)
    ax.set_xlabel(xlabel)
    ax.set_ylabel("count")
    ax.set_title(title)
    _save(fig, path)


def plot_overlay(edges: np.ndarray, w_counts: np.ndarray, t_counts: np.ndarray,
                 path: str, title: str = "|w| vs per-block threshold") -> None:
    fig, ax = plt.subplots(figsize=(6.5, 4))
    centers = 0.5 * (edges[:-1] + edges[1:])
    w_density = w_counts / max(1, w_counts.sum())
    t_density = t_counts / max(1, t_counts.sum())
    ax.plot(centers, w_density, color="tab:blue", label="|w| density")
    ax.plot(centers, t_density, color="tab:orange", label="threshold density")
    ax.set_xlabel("magnitude / mean|w|")
    ax.set_ylabel("density (normalized counts)")
    ax.legend()
    ax.set_title(title)
    _save(fig, path)
