"""Training loop, dense-to-sparse schedules, sweeps, and checkpoints.

One process runs one training loop; sweep/ablation orchestration may fan
runs out to spawned worker processes (each pinned to a single BLAS
thread), which keeps results identical to serial execution.
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import multiprocessing as mp

import numpy as np

from . import _mp
from .config import ToyLMConfig, WeightMode, parse_config_text
from .data import Corpus, eval_windows, load_corpus, sample_batch
from .errors import CheckpointError, ConfigError, NumericFault
from .layers import Variant
from .model import ToyLM, seed_streams
from .quantize import EPS
from .telemetry import (TelemetryRecord, export_layer_telemetry_csv,
                        export_telemetry_csv)

_f32 = np.float32


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class AdamW:
    """Decoupled weight decay; decay applies to matrices, not gains."""

    def __init__(self, params, lr: float, betas=(0.9, 0.95), eps: float = 1e-5,
                 weight_decay: float = 0.1):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {name: np.zeros_like(p.values) for name, p in self.params}
        self.v = {name: np.zeros_like(p.values) for name, p in self.params}

    def step(self, lr_t: float, grad_scale: float = 1.0) -> None:
        self.t += 1
        b1, b2 = _f32(self.beta1), _f32(self.beta2)
        c1 = _f32(1.0 - self.beta1 ** self.t)
        c2 = _f32(1.0 - self.beta2 ** self.t)
        lr_t = _f32(lr_t)
        scale = _f32(grad_scale)
        for name, p in self.params:
            if p.grad is None:
                continue
            g = p.grad * scale
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * np.square(g)
            update = (m / c1) / (np.sqrt(v / c2) + _f32(self.eps))
            if self.weight_decay and p.values.ndim >= 2:
                update = update + _f32(self.weight_decay) * p.values
            p.values = (p.values - lr_t * update).astype(_f32)

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None


def lr_at(step: int, cfg: ToyLMConfig) -> float:
    """Linear warmup then cosine decay to zero. ``step`` is 0-based."""
    warmup = max(1, math.ceil(cfg.warmup_frac * cfg.total_steps))
    if step < warmup:
        return cfg.lr * (step + 1) / warmup
    span = max(1, cfg.total_steps - warmup)
    progress = (step - warmup) / span
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def global_grad_norm(params) -> float:
    total = 0.0
    for _, p in params:
        if p.grad is not None:
            total += float(np.sum(np.square(p.grad, dtype=np.float64)))
    return math.sqrt(total)


# ---------------------------------------------------------------------------
# pooled master statistics
# ---------------------------------------------------------------------------

def pooled_master_stats(model: ToyLM) -> tuple[float, float, list[float]]:
    """(near_zero_mass, zero_fraction, per-layer near_zero) over linear masters.

    Near-zero mass pools all linear masters against the global mean |w|;
    zero fraction counts entries below each layer's own ternary threshold.
    """
    layers = model.linear_layers()
    abs_list = [np.abs(layer.master.values) for _, layer in layers]
    total_n = sum(a.size for a in abs_list)
    global_mean = sum(float(a.sum(dtype=np.float64)) for a in abs_list) / total_n
    near = 0
    zero = 0
    per_layer_near = []
    for a in abs_list:
        near += int(np.count_nonzero(a < _f32(0.5 * global_mean)))
        layer_mean = float(np.mean(a, dtype=_f32))
        per_layer_near.append(
            float(np.count_nonzero(a < _f32(0.5 * layer_mean))) / a.size)
        zero += int(np.count_nonzero(a < _f32(0.5) * _f32(layer_mean + EPS)))
    return near / total_n, zero / total_n, per_layer_near


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def evaluate_ppl(model: ToyLM, windows: np.ndarray, batch_size: int) -> float:
    """exp(mean NLL) over the given (context+1)-wide windows; mutates nothing."""
    total_nll = 0.0
    total_tok = 0
    for lo in range(0, len(windows), batch_size):
        chunk = windows[lo:lo + batch_size]
        ids, targets = chunk[:, :-1], chunk[:, 1:]
        loss = model.loss(ids, targets, record_mask=False)
        total_nll += float(loss.values) * ids.size
        total_tok += ids.size
    return math.exp(total_nll / total_tok)


# ---------------------------------------------------------------------------
# run result
# ---------------------------------------------------------------------------

@dataclass
class RunResult:
    config_hash: str
    final_val_ppl: float
    ppl_curve: list[list[float]]
    telemetry_path: str | None
    records: list[TelemetryRecord] = field(default_factory=list)
    out_dir: str | None = None

    def to_json(self) -> str:
        return json.dumps({
            "config_hash": self.config_hash,
            "final_val_ppl": self.final_val_ppl,
            "ppl_curve": self.ppl_curve,
            "telemetry_path": self.telemetry_path,
        }, indent=2)


# ---------------------------------------------------------------------------
# checkpointing
# ---------------------------------------------------------------------------

def save_checkpoint(path: str, cfg: ToyLMConfig, model: ToyLM, opt: AdamW,
                    step: int, batch_rng: np.random.Generator) -> None:
    arrays: dict[str, np.ndarray] = {}
    for name, p in model.parameters():
        arrays[f"param:{name}"] = p.values
        arrays[f"adam_m:{name}"] = opt.m[name]
        arrays[f"adam_v:{name}"] = opt.v[name]
    for name, layer in model.linear_layers():
        if layer.last_mask is not None:
            arrays[f"mask:{name}"] = layer.last_mask.bits
            arrays[f"mask_nm:{name}"] = np.array(
                [layer.last_mask.pattern.n_keep, layer.last_mask.pattern.group_size])
        arrays[f"layer_steps:{name}"] = np.array([layer.step_count])
    meta = {
        "config_hash": cfg.config_hash(),
        "config_text": cfg.to_text(),
        "step": step,
        "opt_t": opt.t,
        "vocab_size": model.vocab_size,
        "rng_state": batch_rng.bit_generator.state,
    }
    arrays["meta_json"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    np.savez(path, **arrays)


def load_checkpoint(path: str, cfg: ToyLMConfig):
    """Restore (model, opt, step, batch_rng) bit-exactly for the same config."""
    from .sparsity import NMMask, NMPattern

    try:
        data = np.load(path)
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if "meta_json" not in data:
        raise CheckpointError(f"{path} is not a training checkpoint")
    meta = json.loads(bytes(data["meta_json"].tobytes()).decode())
    if meta["config_hash"] != cfg.config_hash():
        raise CheckpointError("checkpoint config hash does not match the supplied config")
    model = ToyLM(cfg, int(meta["vocab_size"]), np.random.default_rng(0))
    opt = AdamW(model.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2),
                eps=cfg.adam_eps, weight_decay=cfg.weight_decay)
    for name, p in model.parameters():
        p.values = data[f"param:{name}"].astype(_f32)
        opt.m[name] = data[f"adam_m:{name}"].astype(_f32)
        opt.v[name] = data[f"adam_v:{name}"].astype(_f32)
    for name, layer in model.linear_layers():
        key = f"mask:{name}"
        if key in data:
            n, m = (int(v) for v in data[f"mask_nm:{name}"])
            layer.last_mask = NMMask(bits=data[key].astype(np.uint8),
                                     pattern=NMPattern(n, m))
        layer.step_count = int(data[f"layer_steps:{name}"][0])
    opt.t = int(meta["opt_t"])
    batch_rng = np.random.default_rng(0)
    batch_rng.bit_generator.state = meta["rng_state"]
    return model, opt, int(meta["step"]), batch_rng


# ---------------------------------------------------------------------------
# the training loop
# ---------------------------------------------------------------------------

def sparse_switch_step(cfg: ToyLMConfig) -> int:
    """First 0-based step with the N:M constraint active (= total when never)."""
    if not cfg.weight_mode.sparse:
        return cfg.total_steps
    return math.ceil((1.0 - cfg.sparse_ratio / 100.0) * cfg.total_steps)


class Trainer:
    def __init__(self, cfg: ToyLMConfig, corpus: Corpus | None = None):
        cfg.validate()
        self.cfg = cfg
        self.corpus = corpus or load_corpus(cfg.corpus_path, cfg.vocab_size)
        self.vocab_size = cfg.vocab_size or self.corpus.vocab_size
        init_rng, self.batch_rng = seed_streams(cfg.seed)
        self.model = ToyLM(cfg, self.vocab_size, init_rng)
        self.opt = AdamW(self.model.parameters(), lr=cfg.lr,
                         betas=(cfg.beta1, cfg.beta2), eps=cfg.adam_eps,
                         weight_decay=cfg.weight_decay)
        self.step = 0
        self.records: list[TelemetryRecord] = []
        self.ppl_curve: list[list[float]] = []
        self._switch = sparse_switch_step(cfg)
        self._eval_interval = max(1, round(cfg.eval_every_frac * cfg.total_steps))
        self._val_windows = eval_windows(self.corpus.val_ids, cfg.context_length)

    def _apply_schedule(self) -> None:
        # after the last step (final eval) keep the last training step's state,
        # so rho=0 stays dense end to end
        effective = min(self.step, self.cfg.total_steps - 1)
        enabled = self.cfg.weight_mode.sparse and effective >= self._switch
        self.model.set_sparsity_enabled(enabled)

    def train_step(self) -> float:
        """One optimization step; appends one telemetry record."""
        cfg = self.cfg
        self._apply_schedule()
        ids, targets = sample_batch(self.batch_rng, self.corpus.train_ids,
                                    cfg.batch_size, cfg.context_length)
        try:
            loss = self.model.loss(ids, targets, record_mask=True)
            loss.backward()
        except NumericFault as exc:
            raise NumericFault(f"step {self.step}: {exc}") from exc
        gnorm = global_grad_norm(self.opt.params)
        if not math.isfinite(gnorm):
            raise NumericFault(f"step {self.step}: non-finite gradient norm")
        scale = 1.0 if gnorm <= cfg.grad_clip else cfg.grad_clip / gnorm

        flips = [layer.last_flip for _, layer in self.model.linear_layers()]
        near, zero_frac, per_layer_near = pooled_master_stats(self.model)
        mean_flip = None if any(f is None for f in flips) else float(np.mean(flips))

        self.opt.step(lr_at(self.step, cfg), grad_scale=scale)
        self.opt.zero_grad()
        self.step += 1

        self.records.append(TelemetryRecord(
            step=self.step, train_loss=float(loss.values), val_ppl=None,
            mean_flip_rate=mean_flip, per_layer_flip_rate=flips,
            near_zero_mass=near, zero_fraction=zero_frac,
            per_layer_near_zero=per_layer_near, pattern=cfg.pattern,
            variant=cfg.variant.value, weight_mode=cfg.weight_mode.value))
        return float(loss.values)

    def _interim_eval(self) -> float:
        cfg = self.cfg
        n = min(len(self._val_windows), cfg.eval_batches * cfg.batch_size)
        self._apply_schedule()
        return evaluate_ppl(self.model, self._val_windows[:n], cfg.batch_size)

    def final_eval(self) -> float:
        self._apply_schedule()
        return evaluate_ppl(self.model, self._val_windows, self.cfg.batch_size)

    def run(self) -> None:
        cfg = self.cfg
        while self.step < cfg.total_steps:
            self.train_step()
            if self.step % self._eval_interval == 0 and self.step < cfg.total_steps:
                ppl = self._interim_eval()
                self.records[-1].val_ppl = ppl
                self.ppl_curve.append([self.step, ppl])
        final = self.final_eval()
        self.records[-1].val_ppl = final
        self.ppl_curve.append([self.step, final])
        self.final_val_ppl = final


def execute_run(cfg: ToyLMConfig, out_dir: str | None = None,
                corpus: Corpus | None = None) -> RunResult:
    """Run a full schedule; optionally write the run artifacts to a directory."""
    trainer = Trainer(cfg, corpus=corpus)
    trainer.run()
    telemetry_path = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "config.txt"), "w", encoding="utf-8") as fh:
            fh.write(cfg.to_text())
        telemetry_path = os.path.join(out_dir, "telemetry.csv")
        export_telemetry_csv(trainer.records, telemetry_path)
        export_layer_telemetry_csv(
            trainer.records, [n for n, _ in trainer.model.linear_layers()],
            os.path.join(out_dir, "telemetry_layers.csv"))
        save_checkpoint(os.path.join(out_dir, "checkpoint.npz"), cfg,
                        trainer.model, trainer.opt, trainer.step, trainer.batch_rng)
    result = RunResult(config_hash=cfg.config_hash(),
                       final_val_ppl=trainer.final_val_ppl,
                       ppl_curve=trainer.ppl_curve,
                       telemetry_path=telemetry_path,
                       records=trainer.records, out_dir=out_dir)
    if out_dir is not None:
        with open(os.path.join(out_dir, "result.json"), "w", encoding="utf-8") as fh:
            fh.write(result.to_json())
    return result


# ---------------------------------------------------------------------------
# parallel orchestration
# ---------------------------------------------------------------------------

def _worker_run(cfg_text: str, out_dir: str | None) -> RunResult:
    cfg = parse_config_text(cfg_text)
    return execute_run(cfg, out_dir)


def run_many(cfgs: list[ToyLMConfig], jobs: int = 1,
             out_dirs: list[str | None] | None = None) -> list[RunResult]:
    """Execute runs serially or across spawned single-BLAS-thread workers."""
    if out_dirs is None:
        out_dirs = [None] * len(cfgs)
    if jobs <= 1 or len(cfgs) <= 1:
        return [execute_run(c, d) for c, d in zip(cfgs, out_dirs)]
    ctx = mp.get_context("spawn")
    with ProcessPoolExecutor(max_workers=jobs, mp_context=ctx,
                             initializer=_mp.limit_worker_threads) as ex:
        futures = [ex.submit(_worker_run, c.to_text(), d)
                   for c, d in zip(cfgs, out_dirs)]
        return [f.result() for f in futures]


SWEEP_HEADER = "family,pattern,val_ppl,norm_ppl"
FAMILY_MODES = {"float": WeightMode.FLOAT_SPARSE, "bitnet": WeightMode.BITNET_SPARSE}


@dataclass
class SweepRow:
    family: str
    pattern: str
    val_ppl: float
    norm_ppl: float


def run_sweep(base_cfg: ToyLMConfig, patterns: list[str],
              families: tuple[str, ...] = ("float", "bitnet"), jobs: int = 1,
              out_root: str | None = None) -> list[SweepRow]:
    """One run per (family, pattern); normalized PPL against the family's 8:8."""
    if "8:8" not in patterns:
        raise ConfigError("sweep pattern list must include the dense anchor 8:8")
    for fam in families:
        if fam not in FAMILY_MODES:
            raise ConfigError(f"unknown weight family '{fam}'")
    jobs_cfgs = []
    keys = []
    dirs = []
    for fam in families:
        for pat in patterns:
            cfg = base_cfg.replace(weight_mode=FAMILY_MODES[fam], pattern=pat)
            jobs_cfgs.append(cfg)
            keys.append((fam, pat))
            dirs.append(None if out_root is None
                        else os.path.join(out_root, f"{fam}_{pat.replace(':', 'of')}"))
    results = run_many(jobs_cfgs, jobs=jobs, out_dirs=dirs)
    by_key = {k: r for k, r in zip(keys, results)}
    rows = []
    for fam in families:
        anchor = by_key[(fam, "8:8")].final_val_ppl
        for pat in patterns:
            ppl = by_key[(fam, pat)].final_val_ppl
            rows.append(SweepRow(family=fam, pattern=pat, val_ppl=ppl,
                                 norm_ppl=ppl / anchor))
    return rows


ABLATION_VARIANTS = (Variant.QUANT_THEN_MASK_DENSE_GRAD, Variant.MASK_WITHOUT_GRAD,
                     Variant.MASK_FROM_QUANTIZED, Variant.SPARSE_BEFORE_QUANT)


def run_ablation(base_cfg: ToyLMConfig,
                 variants: tuple[Variant, ...] = ABLATION_VARIANTS, jobs: int = 1,
                 out_root: str | None = None) -> dict[str, RunResult]:
    """The four training-design variants under one base config."""
    cfgs = [base_cfg.replace(weight_mode=WeightMode.BITNET_SPARSE, variant=v)
            for v in variants]
    dirs = [None if out_root is None else os.path.join(out_root, v.value)
            for v in variants]
    results = run_many(cfgs, jobs=jobs, out_dirs=dirs)
    return {v.value: r for v, r in zip(variants, results)}
