import numpy as np
import pytest

from bitnm.config import ToyLMConfig, WeightMode
from bitnm.errors import ConfigError
from bitnm.layers import SparseBitLinear, SparseFloatLinear
from bitnm.model import ToyLM, build_model, expected_param_count

F32 = np.float32


def small_cfg(**overrides):
    base = dict(context_length=16, d_model=32, n_layers=2, n_heads=2,
                ff_mult=2, total_steps=10, batch_size=2)
    base.update(overrides)
    return ToyLMConfig(**base)


def test_param_count_matches_closed_form():
    for cfg in (small_cfg(), small_cfg(d_model=64, n_layers=1, ff_mult=4)):
        model = build_model(cfg, vocab_size=41)
        assert model.param_count() == expected_param_count(cfg, 41)


def test_default_config_param_count():
    cfg = ToyLMConfig()
    model = build_model(cfg, vocab_size=97)
    # V*d + L*(2d + 4d^2 + 2*d*ff) + d + d*V
    assert model.param_count() == 97 * 128 + 2 * (2 * 128 + 4 * 128 * 128 + 2 * 128 * 256) + 128 + 128 * 97


def test_weight_mode_selects_layer_class():
    bit = build_model(small_cfg(weight_mode=WeightMode.BITNET_SPARSE), 17)
    flt = build_model(small_cfg(weight_mode=WeightMode.FLOAT_SPARSE), 17)
    assert all(isinstance(l, SparseBitLinear) for _, l in bit.linear_layers())
    assert all(isinstance(l, SparseFloatLinear) for _, l in flt.linear_layers())


def test_initial_loss_near_log_vocab():
    vocab = 53
    cfg = small_cfg(weight_mode=WeightMode.FLOAT_DENSE)
    model = build_model(cfg, vocab)
    rng = np.random.default_rng(0)
    ids = rng.integers(0, vocab, size=(4, 16))
    targets = rng.integers(0, vocab, size=(4, 16))
    loss = float(model.loss(ids, targets).values)
    assert loss == pytest.approx(np.log(vocab), rel=0.05)


def test_dense_bitnet_equals_sparse_with_dense_pattern_bit_exact():
    ids = np.random.default_rng(1).integers(0, 19, size=(2, 16))
    outs = []
    for mode in (WeightMode.BITNET_DENSE, WeightMode.BITNET_SPARSE):
        cfg = small_cfg(weight_mode=mode, pattern="8:8", seed=3)
        model = build_model(cfg, 19)
        model.set_sparsity_enabled(mode is WeightMode.BITNET_SPARSE)
        outs.append(model.logits(ids).values.tobytes())
    assert outs[0] == outs[1]


def test_invalid_configs_rejected():
    with pytest.raises(ConfigError):
        build_model(small_cfg(d_model=30), 17)  # not divisible by heads*M
    with pytest.raises(ConfigError):
        build_model(small_cfg(n_heads=3), 17)
    with pytest.raises(ConfigError):
        build_model(small_cfg(sparse_ratio=40), 17)
    with pytest.raises(ConfigError):
        ToyLM(small_cfg(), 1, np.random.default_rng(0))


def test_sequence_longer_than_context_rejected():
    model = build_model(small_cfg(), 17)
    with pytest.raises(ConfigError):
        model.logits(np.zeros((1, 17), dtype=np.int64))


def test_logits_deterministic_and_grad_reaches_all_masters():
    cfg = small_cfg(weight_mode=WeightMode.BITNET_SPARSE)
    model = build_model(cfg, 23)
    model.set_sparsity_enabled(True)
    rng = np.random.default_rng(2)
    ids = rng.integers(0, 23, size=(2, 16))
    targets = rng.integers(0, 23, size=(2, 16))
    loss = model.loss(ids, targets)
    loss.backward()
    for name, p in model.parameters():
        assert p.grad is not None, name
        assert np.any(p.grad != 0), name
    again = model.loss(ids, targets, record_mask=False)
    assert again.values.tobytes() == loss.values.tobytes()
