import numpy as np
import pytest

from bitnm import packed as pk
from bitnm.errors import CheckpointError, ConfigError, PackError, ShapeError
from bitnm.layers import EffectiveWeights
from bitnm.quantize import QuantizedActivations, activation_quantize
from bitnm.sparsity import NMMask, NMPattern

F32 = np.float32

PATTERNS = [NMPattern(2, 4), NMPattern(2, 8), NMPattern(3, 8), NMPattern(4, 8),
            NMPattern(5, 8), NMPattern(6, 8), NMPattern(7, 8)]


def test_pack_layout_hand_case():
    # group values under a 6:8 mask; kept indices ascend, zeros stay encodable
    values = np.array([[1, 0, -1, 0, 1, 1, 0, -1]], np.int8)
    bits = np.array([[1, 0, 1, 0, 1, 1, 1, 1]], np.uint8)
    eff = EffectiveWeights(values=values, gamma=0.5,
                           mask=NMMask(bits=bits, pattern=NMPattern(6, 8)))
    p = pk.pack(eff)
    vals, cols = pk._decode(p)
    assert cols.tolist() == [0, 2, 4, 5, 6, 7]
    assert vals.tolist() == [1, -1, 1, 1, 0, -1]
    back = pk.unpack(p)
    assert np.array_equal(back.values, values)
    assert np.array_equal(back.mask.bits, bits)
    assert back.gamma == 0.5


def test_pack_all_zero_kept_values():
    values = np.zeros((2, 8), np.int8)
    bits = np.zeros((2, 8), np.uint8)
    bits[:, :2] = 1
    eff = EffectiveWeights(values=values, gamma=1.0,
                           mask=NMMask(bits=bits, pattern=NMPattern(2, 8)))
    assert np.array_equal(pk.unpack(pk.pack(eff)).values, values)


def test_pack_rejects_constraint_violations():
    bits = np.ones((1, 8), np.uint8)  # 8 ones under 6:8
    eff = EffectiveWeights(values=np.zeros((1, 8), np.int8), gamma=1.0,
                           mask=NMMask(bits=bits, pattern=NMPattern(6, 8)))
    with pytest.raises(PackError):
        pk.pack(eff)
    bits = np.array([[1, 1, 0, 0, 0, 0, 0, 0]], np.uint8)
    values = np.array([[0, 0, 1, 0, 0, 0, 0, 0]], np.int8)  # nonzero off-mask
    eff = EffectiveWeights(values=values, gamma=1.0,
                           mask=NMMask(bits=bits, pattern=NMPattern(2, 8)))
    with pytest.raises(PackError):
        pk.pack(eff)


def test_unpack_rejects_malformed_metadata():
    values = np.array([[1, -1, 0, 0, 0, 0, 0, 0]], np.int8)
    bits = np.array([[1, 1, 0, 0, 0, 0, 0, 0]], np.uint8)
    eff = EffectiveWeights(values=values, gamma=1.0,
                           mask=NMMask(bits=bits, pattern=NMPattern(2, 8)))
    p = pk.pack(eff)
    # descending indices: [1, 0] packed as 3-bit fields 001 000 -> 0b00100000
    bad = pk.PackedNMWeights(d_out=p.d_out, d_in=p.d_in, pattern=p.pattern,
                             value_bits=p.value_bits,
                             index_meta=np.array([0b00100000], np.uint8),
                             gamma=p.gamma)
    with pytest.raises(PackError):
        pk.unpack(bad)


@pytest.mark.parametrize("pattern", PATTERNS, ids=str)
def test_round_trip_fuzz(pattern):
    rng = np.random.default_rng(pattern.n_keep * 31 + pattern.group_size)
    for _ in range(300):
        d_out = int(rng.integers(1, 9))
        d_in = pattern.group_size * int(rng.integers(1, 5))
        eff = pk.random_effective(d_out, d_in, pattern, rng)
        back = pk.unpack(pk.pack(eff))
        assert np.array_equal(back.values, eff.values)
        assert np.array_equal(back.mask.bits, eff.mask.bits)
        assert back.gamma == pytest.approx(eff.gamma, rel=1e-7)


def test_payload_sizes_exact():
    for pattern in PATTERNS:
        d_out, d_in = 16, pattern.group_size * 6
        eff = pk.random_effective(d_out, d_in, pattern, np.random.default_rng(0))
        p = pk.pack(eff)
        groups = d_out * d_in // pattern.group_size
        value_bits = 2 * pattern.n_keep * groups
        index_bits = pattern.n_keep * p.index_bit_width * groups
        assert p.value_bits.nbytes == (value_bits + 7) // 8
        assert p.index_meta.nbytes == (index_bits + 7) // 8
        assert pk.payload_nbytes(d_out, d_in, pattern) == (p.value_bits.nbytes,
                                                           p.index_meta.nbytes)


def test_spmm_hand_case_single_group():
    values = np.array([[1, 0, -1, 0]], np.int8)
    bits = np.array([[1, 0, 1, 0]], np.uint8)
    eff = EffectiveWeights(values=values, gamma=1.0,
                           mask=NMMask(bits=bits, pattern=NMPattern(2, 4)))
    p = pk.pack(eff)
    x = np.array([[10, 20, 30, 40]], np.int8)
    assert pk.spmm_int(p, x).tolist() == [[10 - 30]]


def test_spmm_identity_like():
    n = 8
    values = np.eye(n, dtype=np.int8)
    bits = np.zeros((n, n), np.uint8)
    bits[np.arange(n), np.arange(n)] = 1
    # 1:8 pattern keeps exactly the diagonal entry per group
    eff = EffectiveWeights(values=values, gamma=2.0,
                           mask=NMMask(bits=bits, pattern=NMPattern(1, 8)))
    p = pk.pack(eff)
    x = np.arange(-4, 4, dtype=np.int8).reshape(1, 8)
    assert np.array_equal(pk.spmm_int(p, x), x.astype(np.int32))
    qa = QuantizedActivations(values=x, scale=np.array([0.5], F32))
    out = pk.spmm(p, qa)
    np.testing.assert_allclose(out, x.astype(F32) * (2.0 / 0.5))


@pytest.mark.parametrize("pattern", PATTERNS, ids=str)
def test_spmm_equals_dense_reference(pattern):
    rng = np.random.default_rng(pattern.n_keep * 7 + pattern.group_size)
    for _ in range(100):
        d_out = int(rng.integers(1, 12))
        d_in = pattern.group_size * int(rng.integers(1, 5))
        t = int(rng.integers(1, 9))
        eff = pk.random_effective(d_out, d_in, pattern, rng)
        x = rng.integers(-128, 128, size=(t, d_in)).astype(np.int8)
        assert np.array_equal(pk.spmm_int(pk.pack(eff), x),
                              pk.dense_reference(eff, x))


def test_spmm_partition_independence():
    # stitching row-partitioned outputs reproduces the one-shot result
    pattern = NMPattern(6, 8)
    rng = np.random.default_rng(42)
    eff = pk.random_effective(16, 32, pattern, rng)
    x = rng.integers(-128, 128, size=(6, 32)).astype(np.int8)
    whole = pk.spmm_int(pk.pack(eff), x)
    parts = []
    for rows in (slice(0, 5), slice(5, 11), slice(11, 16)):
        sub = EffectiveWeights(values=eff.values[rows], gamma=eff.gamma,
                               mask=NMMask(bits=eff.mask.bits[rows], pattern=pattern))
        parts.append(pk.spmm_int(pk.pack(sub), x))
    assert np.array_equal(whole, np.concatenate(parts, axis=1))


def test_spmm_shape_error():
    eff = pk.random_effective(4, 8, NMPattern(6, 8), np.random.default_rng(0))
    with pytest.raises(ShapeError):
        pk.spmm_int(pk.pack(eff), np.zeros((2, 16), np.int8))


def test_spmm_matches_layer_forward_rescale():
    # packed inference path reproduces the training layer's output
    from bitnm import autodiff as ad
    from bitnm.layers import SparseBitLinear

    rng = np.random.default_rng(11)
    master = ad.Tensor(rng.standard_normal((8, 16)).astype(F32), requires_grad=True)
    layer = SparseBitLinear(master, NMPattern(6, 8))
    xv = rng.standard_normal((4, 16)).astype(F32)
    out = layer.forward(ad.Tensor(xv)).values
    p = pk.pack(layer.effective_weights())
    np.testing.assert_allclose(pk.spmm(p, activation_quantize(xv)), out, rtol=1e-6)


# ---------------------------------------------------------------------------
# benchmark protocol
# ---------------------------------------------------------------------------

def test_bench_rejects_too_few_repeats():
    with pytest.raises(ConfigError):
        pk.bench((8, 32, 8), NMPattern(6, 8), repeats=1)


def test_bench_smoke_and_csv_row():
    rep = pk.bench((16, 64, 16), NMPattern(6, 8), repeats=5, warmup=1)
    assert rep.speedup > 0
    assert len(rep.checksum) == 16
    row = rep.csv_row().split(",")
    assert row[0] == "16x64x16" and row[1] == "6:8"
    assert int(row[2]) > 0 and int(row[3]) > 0


def test_bench_dense_pattern_speedup_near_one():
    # no skipped work: only timing noise plus the small in-kernel metadata read
    rep = pk.bench((256, 1024, 256), NMPattern(8, 8), repeats=7, warmup=2)
    assert 0.75 < rep.speedup < 1.25


# ---------------------------------------------------------------------------
# export file format
# ---------------------------------------------------------------------------

def test_packed_file_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    layers = [pk.random_effective(8, 16, NMPattern(6, 8), rng),
              pk.random_effective(4, 32, NMPattern(2, 4), rng)]
    packed = [pk.pack(e) for e in layers]
    path = str(tmp_path / "weights.sbn")
    pk.write_packed_file(path, packed)
    back = pk.read_packed_file(path)
    assert len(back) == 2
    for orig, loaded in zip(layers, back):
        restored = pk.unpack(loaded)
        assert np.array_equal(restored.values, orig.values)
        assert np.array_equal(restored.mask.bits, orig.mask.bits)
        assert loaded.gamma == pytest.approx(orig.gamma, rel=1e-7)


def test_packed_file_bad_magic(tmp_path):
    path = str(tmp_path / "bad.sbn")
    with open(path, "wb") as fh:
        fh.write(b"NOTMAGIC" + b"\0" * 32)
    with pytest.raises(CheckpointError):
        pk.read_packed_file(path)
