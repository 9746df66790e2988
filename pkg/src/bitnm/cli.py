"""Command-line entry point: train, sweep, ablate, bench, analyze, export."""

from __future__ import annotations

import argparse
import os
import sys

from .errors import BitNMError, ConfigError

DEFAULT_PATTERNS = "8:8,6:8,2:4"
DEFAULT_BENCH_SHAPES = "512x1024x1024"


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="flat key=value config file")
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--jobs", type=int, default=1, help="concurrent member runs")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE", help="config override (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bitnm",
                                     description="ternary x N:M sparsity lab")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="single training run")
    _add_common(p)

    p = sub.add_parser("sweep", help="pattern sweep over both weight families")
    _add_common(p)
    p.add_argument("--patterns", default=DEFAULT_PATTERNS,
                   help="comma-separated N:M list; must include 8:8")

    p = sub.add_parser("ablate", help="run the four training-design variants")
    _add_common(p)

    p = sub.add_parser("bench", help="packed kernel benchmark grid")
    _add_common(p)
    p.add_argument("--shapes", default=DEFAULT_BENCH_SHAPES,
                   help="comma-separated TxD_INxD_OUT shapes")
    p.add_argument("--patterns", default=DEFAULT_PATTERNS)
    p.add_argument("--repeats", type=int, default=7)

    p = sub.add_parser("analyze", help="weight statistics from a finished run")
    _add_common(p)
    p.add_argument("--run", required=True, help="run directory with checkpoint.npz")
    p.add_argument("--layers", default=None, metavar="A:B",
                   help="restrict to transformer block range [A, B)")

    p = sub.add_parser("export", help="checkpoint -> packed inference file")
    _add_common(p)
    p.add_argument("--run", required=True, help="run directory with checkpoint.npz")

    return parser


def _load_cfg(args):
    from .config import ToyLMConfig, apply_overrides, load_config

    cfg = ToyLMConfig()
    if args.config:
        cfg = load_config(args.config, base=cfg)
    pairs = {}
    for item in args.overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, val = item.split("=", 1)
        pairs[key.strip()] = val
    cfg = apply_overrides(cfg, pairs)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    cfg.validate()
    return cfg


def _out_dir(args, cfg, command: str) -> str:
    if args.out:
        return args.out
    root = os.environ.get("SBN_OUT", "runs")
    return os.path.join(root, f"{command}_{cfg.config_hash()[:8]}")


def _cmd_train(args) -> int:
    from . import plots
    from .training import execute_run

    cfg = _load_cfg(args)
    out = _out_dir(args, cfg, "train")
    result = execute_run(cfg, out_dir=out)
    plots.plot_run_curves(result.records, result.ppl_curve,
                          os.path.join(out, "loss_curve.png"))
    plots.plot_flip_rate(result.records, os.path.join(out, "flip_rate.png"))
    plots.plot_near_zero(result.records, os.path.join(out, "near_zero.png"))
    print(f"final val ppl {result.final_val_ppl:.4f} -> {out}")
    return 0


def _cmd_sweep(args) -> int:
    from . import plots
    from .telemetry import export_rows_csv
    from .training import SWEEP_HEADER, run_sweep

    cfg = _load_cfg(args)
    patterns = [s.strip() for s in args.patterns.split(",") if s.strip()]
    out = _out_dir(args, cfg, "sweep")
    os.makedirs(out, exist_ok=True)
    rows = run_sweep(cfg, patterns, jobs=args.jobs, out_root=out)
    export_rows_csv(os.path.join(out, "normppl.csv"), SWEEP_HEADER,
                    [(r.family, r.pattern, r.val_ppl, r.norm_ppl) for r in rows])
    plots.plot_sweep(rows, os.path.join(out, "normppl.png"))
    for r in rows:
        print(f"{r.family:7s} {r.pattern:5s} ppl {r.val_ppl:8.4f} norm {r.norm_ppl:.4f}")
    print(f"-> {out}")
    return 0


def _cmd_ablate(args) -> int:
    from . import plots
    from .telemetry import export_rows_csv
    from .training import run_ablation

    cfg = _load_cfg(args)
    out = _out_dir(args, cfg, "ablate")
    os.makedirs(out, exist_ok=True)
    results = run_ablation(cfg, jobs=args.jobs, out_root=out)
    names = list(results)

    eval_steps = [int(s) for s, _ in results[names[0]].ppl_curve]
    ppl_rows = []
    for i, step in enumerate(eval_steps):
        ppl_rows.append((step, *(results[n].ppl_curve[i][1] for n in names)))
    export_rows_csv(os.path.join(out, "ablation_ppl.csv"),
                    "step," + ",".join(names), ppl_rows)

    n_steps = len(results[names[0]].records)
    flip_rows = []
    for i in range(n_steps):
        flip_rows.append((results[names[0]].records[i].step,
                          *(results[n].records[i].mean_flip_rate for n in names)))
    export_rows_csv(os.path.join(out, "ablation_flip_rate.csv"),
                    "step," + ",".join(names), flip_rows)

    plots.plot_ablation(results, os.path.join(out, "ablation.png"))
    for n in names:
        print(f"{n:28s} final val ppl {results[n].final_val_ppl:.4f}")
    print(f"-> {out}")
    return 0


def _cmd_bench(args) -> int:
    from . import plots
    from .packed import BENCH_CSV_HEADER, bench
    from .sparsity import NMPattern
    from .telemetry import export_rows_csv

    cfg = _load_cfg(args)
    out = _out_dir(args, cfg, "bench")
    os.makedirs(out, exist_ok=True)
    shapes = []
    for text in args.shapes.split(","):
        parts = text.lower().split("x")
        if len(parts) != 3:
            raise ConfigError(f"bad shape {text!r}; expected TxD_INxD_OUT")
        shapes.append(tuple(int(v) for v in parts))
    reports = []
    for shape in shapes:
        for pat in args.patterns.split(","):
            pattern = NMPattern.parse(pat)
            rep = bench(shape, pattern, repeats=args.repeats, seed=cfg.seed)
            reports.append(rep)
            print(f"{rep.shape} {rep.pattern}: dense {rep.dense_ns/1e6:.2f} ms "
                  f"sparse {rep.sparse_ns/1e6:.2f} ms speedup {rep.speedup:.3f}")
    export_rows_csv(os.path.join(out, "bench.csv"), BENCH_CSV_HEADER,
                    [r.csv_row().split(",") for r in reports])
    plots.plot_bench(reports, os.path.join(out, "bench.png"))
    print(f"-> {out}")
    return 0


def _parse_layer_range(text, n_layers: int) -> tuple[int, int]:
    if text is None:
        return 0, n_layers
    try:
        a, b = text.split(":")
        return int(a), int(b)
    except ValueError as exc:
        raise ConfigError(f"bad --layers {text!r}; expected A:B") from exc


def _cmd_analyze(args) -> int:
    import numpy as np

    from . import plots
    from .config import load_config
    from .telemetry import (export_histogram_csv, export_overlay_csv,
                            threshold_overlay, weight_histogram)
    from .training import load_checkpoint

    run_dir = args.run
    cfg = load_config(os.path.join(run_dir, "config.txt"))
    model, _, _, _ = load_checkpoint(os.path.join(run_dir, "checkpoint.npz"), cfg)
    out = args.out or os.path.join(run_dir, "analysis")
    os.makedirs(out, exist_ok=True)

    lo, hi = _parse_layer_range(args.layers, cfg.n_layers)
    masters = [layer.master.values for name, layer in model.linear_layers()
               if lo <= int(name.split(".")[1]) < hi]
    if not masters:
        raise ConfigError(f"no layers in range {lo}:{hi}")
    pooled = np.concatenate([m.reshape(-1) for m in masters])

    from .telemetry import near_zero_mass
    nz = near_zero_mass(pooled)
    with open(os.path.join(out, "near_zero_mass.csv"), "w", encoding="utf-8") as fh:
        fh.write("layer_range,near_zero_mass\n")
        fh.write(f"{lo}:{hi},{nz:.6g}\n")

    edges, counts = weight_histogram(pooled)
    export_histogram_csv(edges, counts, os.path.join(out, "weight_histogram.csv"))
    plots.plot_histogram(edges, counts, os.path.join(out, "weight_histogram.png"))

    pooled_2d = pooled.reshape(1, -1)
    pattern = cfg.nm_pattern()
    edges, w_counts, t_counts = threshold_overlay(pooled_2d, pattern)
    export_overlay_csv(edges, w_counts, t_counts,
                       os.path.join(out, "threshold_overlay.csv"))
    plots.plot_overlay(edges, w_counts, t_counts,
                       os.path.join(out, "threshold_overlay.png"))
    print(f"near-zero mass {nz:.4f} -> {out}")
    return 0


def _cmd_export(args) -> int:
    from .config import load_config
    from .packed import pack, write_packed_file
    from .training import load_checkpoint

    run_dir = args.run
    cfg = load_config(os.path.join(run_dir, "config.txt"))
    if not cfg.weight_mode.quantized:
        raise ConfigError("packed export requires a bitnet weight mode")
    model, _, step, _ = load_checkpoint(os.path.join(run_dir, "checkpoint.npz"), cfg)
    from .training import sparse_switch_step
    model.set_sparsity_enabled(cfg.weight_mode.sparse and step >= sparse_switch_step(cfg))
    packed = [pack(layer.effective_weights()) for _, layer in model.linear_layers()]
    out = args.out or os.path.join(run_dir, "packed.sbn")
    write_packed_file(out, packed)
    print(f"wrote {len(packed)} layers -> {out}")
    return 0


_COMMANDS = {
    "train": _cmd_train,
    "sweep": _cmd_sweep,
    "ablate": _cmd_ablate,
    "bench": _cmd_bench,
    "analyze": _cmd_analyze,
    "export": _cmd_export,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except BitNMError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
