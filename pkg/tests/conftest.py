import os

import numpy as np
import pytest

from bitnm.config import ToyLMConfig


def make_tiny_corpus(path: str, size: int = 60_000, seed: int = 7) -> str:
    """Small synthetic corpus with learnable character structure."""
    rng = np.random.default_rng(seed)
    words = ["alpha", "beta", "gamma", "delta", "epsilon", "zeta", "theta",
             "kappa", "lambda", "sigma", "omega", "quant", "sparse", "mask"]
    parts = []
    total = 0
    while total < size:
        sentence = " ".join(rng.choice(words, size=rng.integers(4, 9))) + ".\n"
        parts.append(sentence)
        total += len(sentence)
    text = "".join(parts)[:size]
    with open(path, "w", encoding="ascii") as fh:
        fh.write(text)
    return path


@pytest.fixture(scope="session")
def tiny_corpus_path(tmp_path_factory) -> str:
    path = tmp_path_factory.mktemp("corpus") / "tiny.txt"
    return make_tiny_corpus(str(path))


def tiny_config(corpus_path: str, **overrides) -> ToyLMConfig:
    base = dict(
        context_length=16, d_model=32, n_layers=1, n_heads=2, ff_mult=2,
        total_steps=12, batch_size=4, eval_batches=2, eval_every_frac=0.5,
        corpus_path=corpus_path, seed=0,
    )
    base.update(overrides)
    return ToyLMConfig(**base)


@pytest.fixture
def tiny_cfg(tiny_corpus_path):
    return tiny_config(tiny_corpus_path)
