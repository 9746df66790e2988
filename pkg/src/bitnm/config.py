"""Run configuration: defaults, flat key=value parsing, canonical hashing."""

from __future__ import annotations

import dataclasses
import enum
import hashlib
from dataclasses import dataclass

from .errors import ConfigError
from .layers import Variant
from .sparsity import NMPattern

VALID_SPARSE_RATIOS = (0, 25, 50, 75, 100)


class WeightMode(enum.Enum):
    FLOAT_DENSE = "float_dense"
    FLOAT_SPARSE = "float_sparse"
    BITNET_DENSE = "bitnet_dense"
    BITNET_SPARSE = "bitnet_sparse"

    @property
    def quantized(self) -> bool:
        return self in (WeightMode.BITNET_DENSE, WeightMode.BITNET_SPARSE)

    @property
    def sparse(self) -> bool:
        return self in (WeightMode.FLOAT_SPARSE, WeightMode.BITNET_SPARSE)


@dataclass
class ToyLMConfig:
    vocab_size: int = 0  # 0 = derive from the corpus
    context_length: int = 64
    d_model: int = 128
    n_layers: int = 2
    n_heads: int = 4
    ff_mult: int = 2
    weight_mode: WeightMode = WeightMode.BITNET_SPARSE
    pattern: str = "6:8"
    variant: Variant = Variant.QUANT_THEN_MASK_DENSE_GRAD
    sparse_ratio: int = 100  # percent of total steps trained sparse
    clip_ste: bool = False
    total_steps: int = 2000
    batch_size: int = 8
    lr: float = 3e-4
    warmup_frac: float = 0.05
    weight_decay: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.95
    adam_eps: float = 1e-5
    grad_clip: float = 1.0
    eval_every_frac: float = 0.05
    eval_batches: int = 16
    seed: int = 0
    corpus_path: str = ""  # empty = bundled corpus

    def nm_pattern(self) -> NMPattern:
        return NMPattern.parse(self.pattern)

    def validate(self) -> None:
        p = self.nm_pattern()
        if self.d_model % self.n_heads != 0:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.d_model % p.group_size != 0:
            raise ConfigError(f"d_model {self.d_model} not divisible by group size {p.group_size}")
        if self.sparse_ratio not in VALID_SPARSE_RATIOS:
            raise ConfigError(f"sparse_ratio must be one of {VALID_SPARSE_RATIOS}")
        for field, low in (("total_steps", 1), ("batch_size", 1), ("context_length", 2),
                           ("n_layers", 1), ("ff_mult", 1), ("eval_batches", 1)):
            if getattr(self, field) < low:
                raise ConfigError(f"{field} must be >= {low}")

    # -- flat key=value round-trip -------------------------------------------

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, enum.Enum):
                v = v.value
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]

    def replace(self, **kwargs) -> "ToyLMConfig":
        return dataclasses.replace(self, **kwargs)


def _coerce(field: dataclasses.Field, raw: str):
    t = field.type
    raw = raw.strip()
    try:
        if t == "int":
            return int(raw)
        if t == "float":
            return float(raw)
        if t == "bool":
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if t == "WeightMode":
            return WeightMode(raw)
        if t == "Variant":
            return Variant(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value {raw!r} for config key '{field.name}'") from exc


def apply_overrides(cfg: ToyLMConfig, pairs: dict[str, str]) -> ToyLMConfig:
    fields = {f.name: f for f in dataclasses.fields(ToyLMConfig)}
    updates = {}
    for key, raw in pairs.items():
        if key not in fields:
            raise ConfigError(f"unknown config key '{key}'")
        updates[key] = _coerce(fields[key], raw)
    return cfg.replace(**updates)


def parse_config_text(text: str, base: ToyLMConfig | None = None) -> ToyLMConfig:
    pairs: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        key, raw = stripped.split("=", 1)
        pairs[key.strip()] = raw
    return apply_overrides(base or ToyLMConfig(), pairs)


def load_config(path: str, base: ToyLMConfig | None = None) -> ToyLMConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read(), base=base)
