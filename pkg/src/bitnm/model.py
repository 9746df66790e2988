"""Char-level decoder-only toy transformer over masked/quantized linears.

Pre-norm blocks; attention internals (softmax, QK product) and the
embedding, norms, and output head stay full precision. Only the six
linear projections per block go through the masked ternary (or masked
float) layers, selected by the config's weight mode.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .config import ToyLMConfig, WeightMode
from .errors import ConfigError
from .layers import SparseBitLinear, SparseFloatLinear, Variant
from .sparsity import NMPattern

_f32 = np.float32


def _init_linear(rng: np.random.Generator, d_out: int, d_in: int, std: float) -> ad.Tensor:
    return ad.Tensor(rng.normal(0.0, std, size=(d_out, d_in)).astype(_f32), requires_grad=True)


class Block:
    def __init__(self, cfg: ToyLMConfig, pattern: NMPattern, rng: np.random.Generator,
                 make_linear):
        d, ff = cfg.d_model, cfg.d_model * cfg.ff_mult
        res_std = 0.02 / np.sqrt(2 * cfg.n_layers)  # damp residual writes
        self.attn_gain = ad.Tensor(np.ones(d, dtype=_f32), requires_grad=True)
        self.q = make_linear(_init_linear(rng, d, d, 0.02))
        self.k = make_linear(_init_linear(rng, d, d, 0.02))
        self.v = make_linear(_init_linear(rng, d, d, 0.02))
        self.o = make_linear(_init_linear(rng, d, d, res_std))
        self.mlp_gain = ad.Tensor(np.ones(d, dtype=_f32), requires_grad=True)
        self.up = make_linear(_init_linear(rng, ff, d, 0.02))
        self.down = make_linear(_init_linear(rng, d, ff, res_std))

    def linears(self):
        return [("q", self.q), ("k", self.k), ("v", self.v), ("o", self.o),
                ("up", self.up), ("down", self.down)]


class ToyLM:
    def __init__(self, cfg: ToyLMConfig, vocab_size: int, rng: np.random.Generator):
        cfg.validate()
        if vocab_size < 2:
            raise ConfigError(f"vocab size {vocab_size} too small")
        self.cfg = cfg
        self.vocab_size = vocab_size
        pattern = cfg.nm_pattern()
        self.pattern = pattern

        if cfg.weight_mode.quantized:
            def make_linear(master: ad.Tensor):
                layer = SparseBitLinear(master, pattern, variant=cfg.variant,
                                        clip_ste=cfg.clip_ste)
                layer.set_sparsity_enabled(False)
                return layer
        else:
            def make_linear(master: ad.Tensor):
                layer = SparseFloatLinear(master, pattern)
                layer.set_sparsity_enabled(False)
                return layer

        d = cfg.d_model
        self.embed = ad.Tensor(rng.normal(0.0, 0.02, size=(vocab_size, d)).astype(_f32),
                               requires_grad=True)
        self.blocks = [Block(cfg, pattern, rng, make_linear) for _ in range(cfg.n_layers)]
        self.final_gain = ad.Tensor(np.ones(d, dtype=_f32), requires_grad=True)
        self.head = ad.Tensor(rng.normal(0.0, 0.02, size=(d, vocab_size)).astype(_f32),
                              requires_grad=True)

        t = cfg.context_length
        upper = np.triu(np.ones((t, t), dtype=bool), k=1)
        self._causal_bias = np.where(upper, _f32(-1e9), _f32(0.0)).reshape(1, 1, t, t)
        self._head_dim = d // cfg.n_heads

    # -- parameter access -----------------------------------------------------

    def parameters(self) -> list[tuple[str, ad.Tensor]]:
        params = [("embed", self.embed)]
        for i, blk in enumerate(self.blocks):
            params.append((f"blocks.{i}.attn_gain", blk.attn_gain))
            for name, layer in blk.linears():
                params.append((f"blocks.{i}.{name}", layer.master))
            params.append((f"blocks.{i}.mlp_gain", blk.mlp_gain))
        params.append(("final_gain", self.final_gain))
        params.append(("head", self.head))
        return params

    def linear_layers(self):
        out = []
        for i, blk in enumerate(self.blocks):
            for name, layer in blk.linears():
                out.append((f"blocks.{i}.{name}", layer))
        return out

    def param_count(self) -> int:
        return sum(p.size for _, p in self.parameters())

    def set_sparsity_enabled(self, flag: bool) -> None:
        for _, layer in self.linear_layers():
            layer.set_sparsity_enabled(flag)

    # -- forward ----------------------------------------------------------------

    def loss(self, ids: np.ndarray, targets: np.ndarray, record_mask: bool = True) -> ad.Tensor:
        logits = self.logits(ids, record_mask=record_mask)
        return ad.cross_entropy_loss(logits, targets.reshape(-1))

    def logits(self, ids: np.ndarray, record_mask: bool = True) -> ad.Tensor:
        b, t = ids.shape
        if t > self.cfg.context_length:
            raise ConfigError(f"sequence length {t} exceeds context {self.cfg.context_length}")
        d, h, dh = self.cfg.d_model, self.cfg.n_heads, self._head_dim
        x = ad.embedding_gather(self.embed, ids.reshape(-1))  # (b*t, d)

        for blk in self.blocks:
            hh = ad.rmsnorm(x, blk.attn_gain)
            q = blk.q.forward(hh, record_mask=record_mask)
            k = blk.k.forward(hh, record_mask=record_mask)
            v = blk.v.forward(hh, record_mask=record_mask)

            def heads(tensor):  # (b*t, d) -> (b, h, t, dh)
                return ad.transpose(ad.reshape(tensor, (b, t, h, dh)), (0, 2, 1, 3))

            qh, kh, vh = heads(q), heads(k), heads(v)
            scores = ad.scale(ad.matmul(qh, ad.transpose(kh, (0, 1, 3, 2))),
                              1.0 / np.sqrt(dh))
            scores = ad.add_const(scores, self._causal_bias[..., :t, :t])
            att = ad.softmax(scores)
            ctx = ad.matmul(att, vh)  # (b, h, t, dh)
            merged = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (b * t, d))
            x = ad.add(x, blk.o.forward(merged, record_mask=record_mask))

            hh2 = ad.rmsnorm(x, blk.mlp_gain)
            u = ad.silu(blk.up.forward(hh2, record_mask=record_mask))
            x = ad.add(x, blk.down.forward(u, record_mask=record_mask))

        x = ad.rmsnorm(x, self.final_gain)
        return ad.matmul(x, self.head)  # (b*t, V)


def expected_param_count(cfg: ToyLMConfig, vocab_size: int) -> int:
    """Closed-form parameter count for the architecture above."""
    d, ff = cfg.d_model, cfg.d_model * cfg.ff_mult
    per_block = 2 * d + 4 * d * d + 2 * d * ff
    return vocab_size * d + cfg.n_layers * per_block + d + d * vocab_size


def seed_streams(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    """Independent (init, batch-sampling) generators from one run seed."""
    init_ss, batch_ss = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(init_ss), np.random.default_rng(batch_ss)


def build_model(cfg: ToyLMConfig, vocab_size: int) -> ToyLM:
    """Construct the model with its init RNG derived from the config seed."""
    init_rng, _ = seed_streams(cfg.seed)
    return ToyLM(cfg, vocab_size, init_rng)
