import numpy as np
import pytest

from bitnm import autodiff as ad
from bitnm.errors import ConfigError, ShapeError, StateError
from bitnm.layers import SparseBitLinear, SparseFloatLinear, Variant
from bitnm.quantize import activation_quantize, dequantize, ternary_quantize
from bitnm.sparsity import NMPattern, validate_mask

F32 = np.float32


def make_layer(d_out=8, d_in=16, pattern=(6, 8), seed=0, variant=Variant.QUANT_THEN_MASK_DENSE_GRAD,
               sparse=True, clip_ste=False):
    rng = np.random.default_rng(seed)
    master = ad.Tensor(rng.standard_normal((d_out, d_in)).astype(F32), requires_grad=True)
    layer = SparseBitLinear(master, NMPattern(*pattern), variant=variant, clip_ste=clip_ste)
    layer.set_sparsity_enabled(sparse)
    return layer, rng


# ---------------------------------------------------------------------------
# forward semantics
# ---------------------------------------------------------------------------

def test_dense_mask_is_identity_on_composition():
    layer, rng = make_layer(sparse=False)
    x = ad.Tensor(rng.standard_normal((4, 16)).astype(F32))
    out = layer.forward(x)
    # all-ones mask: effective weights equal the plain ternary quantization
    eff = layer.effective_weights()
    assert np.array_equal(eff.values, ternary_quantize(layer.master.values).values)
    assert np.all(eff.mask.bits == 1)
    assert out.shape == (4, 8)


def test_effective_weights_hand_case():
    master = ad.Tensor(np.array([[0.9, 0.05, -0.45, 0.0]], F32), requires_grad=True)
    layer = SparseBitLinear(master, NMPattern(2, 4))
    eff = layer.effective_weights()
    assert eff.mask.bits.tolist() == [[1, 0, 1, 0]]  # keeps 0.9 and 0.45
    assert eff.values.tolist() == [[1, 0, -1, 0]]


def test_effective_weights_satisfy_mask_invariants():
    for seed in range(20):
        layer, _ = make_layer(seed=seed)
        eff = layer.effective_weights()
        assert validate_mask(eff.mask)
        assert np.all(eff.values[eff.mask.bits == 0] == 0)


def test_integer_path_matches_float_reference_path():
    # dual-path oracle: dequantized float forward within 1e-4 relative
    for seed in range(10):
        layer, rng = make_layer(seed=seed)
        x = ad.Tensor(rng.standard_normal((5, 16)).astype(F32))
        out = layer.forward(x).values
        eff = layer.effective_weights()
        qa = activation_quantize(x.values)
        ref = dequantize(qa) @ (eff.values.astype(F32) * F32(eff.gamma)).T
        np.testing.assert_allclose(out, ref, rtol=1e-4, atol=1e-5)


def test_forward_shape_error():
    layer, rng = make_layer()
    with pytest.raises(ShapeError):
        layer.forward(ad.Tensor(rng.standard_normal((4, 8)).astype(F32)))


def test_mask_from_quantized_selects_on_discrete_values():
    w = np.array([[0.9, 0.8, 0.7, 0.6, 0.5, 0.05, 0.04, 0.03]], F32)
    master = ad.Tensor(w, requires_grad=True)
    layer = SparseBitLinear(master, NMPattern(2, 8), variant=Variant.MASK_FROM_QUANTIZED)
    eff = layer.effective_weights()
    # ternary values: first five quantize to 1, rest to 0; ties resolved by index
    assert eff.mask.bits.tolist() == [[1, 1, 0, 0, 0, 0, 0, 0]]


def test_mask_from_quantized_stable_under_value_preserving_perturbation():
    # a master nudge that keeps its ternary value cannot change this mask
    w = np.array([[0.9, 0.8, 0.7, 0.6, 0.5, 0.05, 0.04, 0.03]], F32)
    layer_a = SparseBitLinear(ad.Tensor(w, requires_grad=True), NMPattern(2, 8),
                              variant=Variant.MASK_FROM_QUANTIZED)
    w2 = w.copy()
    w2[0, 2] = 0.72  # still quantizes to +1
    layer_b = SparseBitLinear(ad.Tensor(w2, requires_grad=True), NMPattern(2, 8),
                              variant=Variant.MASK_FROM_QUANTIZED)
    a, b = layer_a.effective_weights(), layer_b.effective_weights()
    assert np.array_equal(ternary_quantize(w).values, ternary_quantize(w2).values)
    assert np.array_equal(a.mask.bits, b.mask.bits)


def test_sparse_before_quant_gamma_from_masked_matrix():
    layer_default, _ = make_layer(seed=3)
    layer_sbq, _ = make_layer(seed=3, variant=Variant.SPARSE_BEFORE_QUANT)
    eff_d = layer_default.effective_weights()
    eff_s = layer_sbq.effective_weights()
    # masked-out mass is excluded from gamma, so the scales differ
    assert eff_s.gamma < eff_d.gamma
    masked = layer_sbq.master.values * eff_s.mask.bits
    assert eff_s.gamma == pytest.approx(float(np.mean(np.abs(masked))), rel=1e-6)
    # with the mask forced to all-ones the two variants coincide
    layer_default.set_sparsity_enabled(False)
    layer_sbq.set_sparsity_enabled(False)
    assert layer_default.effective_weights().gamma == layer_sbq.effective_weights().gamma


# ---------------------------------------------------------------------------
# backward semantics (dual STE)
# ---------------------------------------------------------------------------

def test_dual_ste_gradient_matches_hand_chain_rule():
    # single neuron, d_in = M = 4, N = 2: G = (g*s)^T @ x_int entrywise
    layer, rng = make_layer(d_out=1, d_in=4, pattern=(2, 4), seed=4)
    x = ad.Tensor(rng.standard_normal((3, 4)).astype(F32), requires_grad=True)
    out = layer.forward(x)
    g = rng.standard_normal((3, 1)).astype(F32)
    out.backward(seed=g)
    qa = activation_quantize(x.values)
    eff = layer.effective_weights()
    s = F32(eff.gamma) / qa.scale
    expected = (g * s[:, None]).T @ qa.values.astype(F32)
    assert np.array_equal(layer.master.grad, expected)


def test_dual_ste_mask_contributes_nothing_to_backward():
    # same upstream gradient: sparse and all-ones paths give identical g_master
    for seed in range(30):
        layer_sparse, rng = make_layer(seed=seed)
        layer_dense, _ = make_layer(seed=seed, sparse=False)
        xv = rng.standard_normal((4, 16)).astype(F32)
        g = rng.standard_normal((4, 8)).astype(F32)
        for layer in (layer_sparse, layer_dense):
            x = ad.Tensor(xv, requires_grad=True)
            layer.forward(x).backward(seed=g)
        assert layer_sparse.master.grad.tobytes() == layer_dense.master.grad.tobytes()


def test_mask_without_grad_gates_exactly():
    layer_default, rng = make_layer(seed=7)
    layer_gated, _ = make_layer(seed=7, variant=Variant.MASK_WITHOUT_GRAD)
    xv = rng.standard_normal((4, 16)).astype(F32)
    g = rng.standard_normal((4, 8)).astype(F32)
    for layer in (layer_default, layer_gated):
        layer.forward(ad.Tensor(xv, requires_grad=True)).backward(seed=g)
    mask = layer_gated.effective_weights().mask.bits
    assert np.all(layer_gated.master.grad[mask == 0] == 0)
    np.testing.assert_array_equal(layer_gated.master.grad[mask == 1],
                                  layer_default.master.grad[mask == 1])


def test_activation_ste_grad_flows_to_input():
    layer, rng = make_layer(seed=8)
    x = ad.Tensor(rng.standard_normal((4, 16)).astype(F32), requires_grad=True)
    out = layer.forward(x)
    g = rng.standard_normal((4, 8)).astype(F32)
    out.backward(seed=g)
    eff = layer.effective_weights()
    expected = (g @ eff.values.astype(F32)) * F32(eff.gamma)
    assert np.array_equal(x.grad, expected)


def test_apply_backward_requires_forward():
    layer, _ = make_layer()
    with pytest.raises(StateError):
        layer.apply_backward(np.ones((2, 8), F32))


def test_variant_switch_mid_run_rejected():
    layer, rng = make_layer()
    layer.forward(ad.Tensor(rng.standard_normal((2, 16)).astype(F32)))
    with pytest.raises(ConfigError):
        layer.set_variant(Variant.MASK_WITHOUT_GRAD)
    layer.set_variant(layer.variant)  # same variant is a no-op


# ---------------------------------------------------------------------------
# mask telemetry
# ---------------------------------------------------------------------------

def test_disabled_layer_flip_rate_zero_after_first_step():
    layer, rng = make_layer(sparse=False)
    x1 = ad.Tensor(rng.standard_normal((2, 16)).astype(F32))
    layer.forward(x1)
    assert layer.last_flip is None  # no previous mask yet
    layer.forward(x1)
    assert layer.last_flip == 0.0


def test_eval_forward_does_not_touch_mask_state():
    layer, rng = make_layer()
    layer.forward(ad.Tensor(rng.standard_normal((2, 16)).astype(F32)))
    saved_bits = layer.last_mask.bits.copy()
    steps = layer.step_count
    layer.master.values = (layer.master.values * 1.5).astype(F32)
    layer.forward(ad.Tensor(rng.standard_normal((2, 16)).astype(F32)), record_mask=False)
    assert layer.step_count == steps
    assert np.array_equal(layer.last_mask.bits, saved_bits)


# ---------------------------------------------------------------------------
# float control layer
# ---------------------------------------------------------------------------

def test_float_layer_masked_forward_and_dense_backward():
    rng = np.random.default_rng(9)
    master = ad.Tensor(rng.standard_normal((8, 16)).astype(F32), requires_grad=True)
    layer = SparseFloatLinear(master, NMPattern(2, 4))
    x = ad.Tensor(rng.standard_normal((4, 16)).astype(F32), requires_grad=True)
    out = layer.forward(x)
    mask = layer.last_mask.bits
    np.testing.assert_allclose(out.values, x.values @ (master.values * mask).T, rtol=1e-6)
    g = rng.standard_normal((4, 8)).astype(F32)
    out.backward(seed=g)
    # dense gradient flow: masked entries still receive gradient
    assert np.array_equal(master.grad, g.T @ x.values)
    assert np.array_equal(x.grad, g @ (master.values * mask))
