"""Bit-packed ternary N:M inference format, sparse integer matmul, benchmark.

Layout per group of M consecutive input weights (groups in row-major
order): the N kept ternary values, 2 bits each (00=0, 01=+1, 10=-1), and
the N kept positions inside the M-window, ceil(log2 M) bits each, strictly
ascending. Both streams are MSB-first within each byte and zero-padded to
a byte boundary at the end of the whole payload.

``spmm`` decodes the metadata and accumulates int32 partial sums only over
kept positions; ``dense_reference`` is the naive triple-loop oracle over
the zero-filled matrix. ``bench`` times ``spmm`` against a matched dense
kernel with the same axpy loop structure, so the speedup reflects the
skipped work.
"""

from __future__ import annotations

import hashlib
import math
import struct
import time
from dataclasses import dataclass

import numpy as np
from numba import njit

from .errors import ConfigError, PackError, ShapeError
from .layers import EffectiveWeights
from .quantize import QuantizedActivations
from .sparsity import NMMask, NMPattern

_f32 = np.float32

_VALUE_CODE = {0: 0b00, 1: 0b01, -1: 0b10}
_CODE_VALUE = np.array([0, 1, -1, 0], dtype=np.int8)  # code 0b11 unused

MAGIC = b"SBNPACK1"
FORMAT_VERSION = 1


@dataclass
class PackedNMWeights:
    d_out: int
    d_in: int
    pattern: NMPattern
    value_bits: np.ndarray  # uint8 payload, 2 bits per kept value
    index_meta: np.ndarray  # uint8 payload, ceil(log2 M) bits per kept index
    gamma: float

    @property
    def n_groups(self) -> int:
        return self.d_out * self.d_in // self.pattern.group_size

    @property
    def index_bit_width(self) -> int:
        return max(1, math.ceil(math.log2(self.pattern.group_size)))


def _pack_bits(fields: np.ndarray, width: int) -> np.ndarray:
    """Pack unsigned ints < 2**width into an MSB-first bitstream."""
    shifts = np.arange(width - 1, -1, -1, dtype=np.uint8)
    bits = (fields[:, None].astype(np.uint32) >> shifts) & 1
    return np.packbits(bits.astype(np.uint8).reshape(-1))


def _unpack_bits(payload: np.ndarray, count: int, width: int) -> np.ndarray:
    """Inverse of ``_pack_bits``: first ``count`` fields of ``width`` bits."""
    bits = np.unpackbits(payload, count=count * width)
    shifts = np.arange(width - 1, -1, -1, dtype=np.uint32)
    return (bits.reshape(count, width).astype(np.uint32) << shifts).sum(axis=1)


def payload_nbytes(d_out: int, d_in: int, pattern: NMPattern) -> tuple[int, int]:
    """Exact byte lengths of (value_bits, index_meta) for the dimensions."""
    groups = d_out * d_in // pattern.group_size
    n = pattern.n_keep
    width = max(1, math.ceil(math.log2(pattern.group_size)))
    return (groups * n * 2 + 7) // 8, (groups * n * width + 7) // 8


def pack(w_eff: EffectiveWeights) -> PackedNMWeights:
    """Lossless packing of masked ternary weights into the N:M layout."""
    values, mask = w_eff.values, w_eff.mask
    pattern = mask.pattern
    d_out, d_in = values.shape
    m, n = pattern.group_size, pattern.n_keep
    if d_in % m != 0:
        raise PackError(f"input dim {d_in} not divisible by group size {m}")
    bits = mask.bits.reshape(-1, m).astype(bool)
    if not np.all(bits.sum(axis=1) == n):
        raise PackError("mask violates the exact-N constraint")
    vals_grouped = values.reshape(-1, m)
    if np.any(vals_grouped[~bits] != 0):
        raise PackError("nonzero value at a masked position")

    kept_local = np.nonzero(bits)[1].reshape(-1)  # ascending within each group
    kept_vals = vals_grouped[bits].reshape(-1)
    codes = np.zeros_like(kept_vals, dtype=np.uint8)
    codes[kept_vals == 1] = _VALUE_CODE[1]
    codes[kept_vals == -1] = _VALUE_CODE[-1]

    width = max(1, math.ceil(math.log2(m)))
    return PackedNMWeights(
        d_out=d_out, d_in=d_in, pattern=pattern,
        value_bits=_pack_bits(codes, 2),
        index_meta=_pack_bits(kept_local.astype(np.uint32), width),
        gamma=w_eff.gamma,
    )


def _decode(p: PackedNMWeights) -> tuple[np.ndarray, np.ndarray]:
    """Kept ternary values (int8) and absolute column indices (int64)."""
    groups, n, m = p.n_groups, p.pattern.n_keep, p.pattern.group_size
    codes = _unpack_bits(p.value_bits, groups * n, 2)
    if np.any(codes == 0b11):
        raise PackError("invalid 2-bit value code 11")
    vals = _CODE_VALUE[codes]
    local = _unpack_bits(p.index_meta, groups * n, p.index_bit_width).astype(np.int64)
    if np.any(local >= m):
        raise PackError("kept index out of the M-window")
    local2d = local.reshape(groups, n)
    if n > 1 and not np.all(local2d[:, 1:] > local2d[:, :-1]):
        raise PackError("kept indices not strictly ascending within a group")
    group_base = (np.arange(groups, dtype=np.int64) * m) % p.d_in
    cols = (local2d + group_base[:, None]).reshape(-1)
    return vals, cols


def unpack(p: PackedNMWeights) -> EffectiveWeights:
    """Rebuild the dense masked ternary matrix; exact inverse of ``pack``."""
    vals, cols = _decode(p)
    n = p.pattern.n_keep
    rows = np.repeat(np.arange(p.d_out, dtype=np.int64),
                     (p.d_in // p.pattern.group_size) * n)
    dense = np.zeros((p.d_out, p.d_in), dtype=np.int8)
    dense[rows, cols] = vals
    bits = np.zeros((p.d_out, p.d_in), dtype=np.uint8)
    bits[rows, cols] = 1
    return EffectiveWeights(values=dense, gamma=p.gamma,
                            mask=NMMask(bits=bits, pattern=p.pattern))


# ---------------------------------------------------------------------------
# compute kernels
# ---------------------------------------------------------------------------

@njit(cache=True)
def _spmm_packed_kernel(val_payload, idx_payload, idx_width, n_keep, m,
                        groups_per_row, x_t, y_t):
    # reads both packed payloads in-kernel: per entry, a stateless MSB-first
    # bit-window extract (payloads are padded by one byte by the caller),
    # amortized over the unit-stride token axpy
    d_out = y_t.shape[0]
    t = y_t.shape[1]
    e = 0
    for j in range(d_out):
        for g in range(groups_per_row):
            base = g * m
            for _ in range(n_keep):
                code = (val_payload[(2 * e) >> 3] >> (6 - ((2 * e) & 7))) & 3
                bitpos = idx_width * e
                bi = bitpos >> 3
                w16 = (np.int32(idx_payload[bi]) << 8) | np.int32(idx_payload[bi + 1])
                idx = (w16 >> (16 - (bitpos & 7) - idx_width)) & ((1 << idx_width) - 1)
                if idx >= m:  # malformed metadata: clamp instead of reading OOB
                    idx = m - 1
                v = np.int32(code & 1) - np.int32((code >> 1) & 1)
                c = base + idx
                e += 1
                for i in range(t):
                    y_t[j, i] += v * x_t[c, i]


@njit(cache=True)
def _dense_axpy_kernel(w, x_t, y_t):
    # matched dense path: identical loop structure, no skipping
    d_out, d_in = w.shape
    t = y_t.shape[1]
    for j in range(d_out):
        for k in range(d_in):
            v = np.int32(w[j, k])
            for i in range(t):
                y_t[j, i] += v * x_t[k, i]


@njit(cache=True)
def _dense_reference_kernel(w, x, y):
    t, d_in = x.shape
    d_out = w.shape[0]
    for i in range(t):
        for j in range(d_out):
            acc = np.int32(0)
            for k in range(d_in):
                acc += np.int32(w[j, k]) * np.int32(x[i, k])
            y[i, j] = acc


def spmm_int(p: PackedNMWeights, x_int8: np.ndarray) -> np.ndarray:
    """Integer stage of the sparse matmul: int32 (t, d_out) accumulators.

    Reads the packed payloads directly; malformed metadata is the loader's
    concern (``unpack`` / ``read_packed_file`` validate).
    """
    x_int8 = np.asarray(x_int8)
    if x_int8.ndim != 2 or x_int8.shape[1] != p.d_in:
        raise ShapeError(f"activation shape {x_int8.shape} vs d_in {p.d_in}")
    x_t = np.ascontiguousarray(x_int8.T.astype(np.int32))
    y_t = np.zeros((p.d_out, x_int8.shape[0]), dtype=np.int32)
    pad = np.zeros(1, dtype=np.uint8)  # one spare byte for the 16-bit window
    _spmm_packed_kernel(np.concatenate((p.value_bits, pad)),
                        np.concatenate((p.index_meta, pad)),
                        p.index_bit_width, p.pattern.n_keep, p.pattern.group_size,
                        p.d_in // p.pattern.group_size, x_t, y_t)
    return np.ascontiguousarray(y_t.T)


def spmm(p: PackedNMWeights, qa: QuantizedActivations) -> np.ndarray:
    """Sparse matmul with the composed rescale gamma / row_scale."""
    y_int = spmm_int(p, qa.values)
    s = (_f32(p.gamma) / qa.scale).astype(_f32)
    return (y_int.astype(_f32) * s[:, None]).astype(_f32)


def dense_reference(w_eff: EffectiveWeights, x_int8: np.ndarray) -> np.ndarray:
    """Naive triple-loop int32 matmul over the zero-filled ternary matrix."""
    x_int8 = np.asarray(x_int8)
    if x_int8.ndim != 2 or x_int8.shape[1] != w_eff.values.shape[1]:
        raise ShapeError(f"activation shape {x_int8.shape} vs weights {w_eff.values.shape}")
    y = np.zeros((x_int8.shape[0], w_eff.values.shape[0]), dtype=np.int32)
    _dense_reference_kernel(w_eff.values, x_int8.astype(np.int8), y)
    return y


def _dense_axpy(w_values: np.ndarray, x_int8: np.ndarray) -> np.ndarray:
    x_t = np.ascontiguousarray(x_int8.T.astype(np.int32))
    y_t = np.zeros((w_values.shape[0], x_int8.shape[0]), dtype=np.int32)
    _dense_axpy_kernel(w_values, x_t, y_t)
    return np.ascontiguousarray(y_t.T)


# ---------------------------------------------------------------------------
# benchmark
# ---------------------------------------------------------------------------

@dataclass
class BenchReport:
    shape: tuple[int, int, int]  # (t, d_in, d_out)
    pattern: NMPattern
    dense_ns: int
    sparse_ns: int
    speedup: float
    checksum: str

    def csv_row(self) -> str:
        t, d_in, d_out = self.shape
        return (f"{t}x{d_in}x{d_out},{self.pattern},{self.dense_ns},"
                f"{self.sparse_ns},{self.speedup:.6g},{self.checksum}")


BENCH_CSV_HEADER = "shape,pattern,dense_ns,sparse_ns,speedup,checksum"


def random_effective(d_out: int, d_in: int, pattern: NMPattern,
                     rng: np.random.Generator) -> EffectiveWeights:
    """Random masked ternary matrix respecting the N:M constraint."""
    from .sparsity import generate_mask

    w = rng.standard_normal((d_out, d_in), dtype=np.float32)
    mask = generate_mask(w, pattern)
    tern = rng.integers(-1, 2, size=(d_out, d_in)).astype(np.int8)
    values = (tern * mask.bits).astype(np.int8)
    return EffectiveWeights(values=values, gamma=float(np.mean(np.abs(w))), mask=mask)


def bench(shape: tuple[int, int, int], pattern: NMPattern, repeats: int = 9,
          warmup: int = 2, seed: int = 0) -> BenchReport:
    """Median-of-repeats timing of the matched dense path vs ``spmm``.

    Asserts output equivalence before timing. Dense and sparse samples are
    interleaved pairwise so slow machine drift hits both paths alike;
    kernels are single-threaded.
    """
    if repeats < 5:
        raise ConfigError("bench requires repeats >= 5")
    t, d_in, d_out = shape
    rng = np.random.default_rng(seed)
    w_eff = random_effective(d_out, d_in, pattern, rng)
    x = rng.integers(-128, 128, size=(t, d_in)).astype(np.int8)
    packed = pack(w_eff)
    w_dense = unpack(packed).values

    y_dense = _dense_axpy(w_dense, x)
    y_sparse = spmm_int(packed, x)
    if not np.array_equal(y_dense, y_sparse):
        raise PackError("bench aborted: sparse output differs from the dense path")
    checksum = hashlib.sha256(np.ascontiguousarray(y_dense).tobytes()).hexdigest()[:16]

    for _ in range(warmup):
        _dense_axpy(w_dense, x)
        spmm_int(packed, x)
    dense_samples = []
    sparse_samples = []
    for _ in range(repeats):
        t0 = time.perf_counter_ns()
        _dense_axpy(w_dense, x)
        t1 = time.perf_counter_ns()
        spmm_int(packed, x)
        t2 = time.perf_counter_ns()
        dense_samples.append(t1 - t0)
        sparse_samples.append(t2 - t1)
    dense_ns = int(np.median(dense_samples))
    sparse_ns = int(np.median(sparse_samples))
    return BenchReport(shape=shape, pattern=pattern, dense_ns=dense_ns,
                       sparse_ns=sparse_ns, speedup=dense_ns / sparse_ns,
                       checksum=checksum)


# ---------------------------------------------------------------------------
# export file format
# ---------------------------------------------------------------------------

_LAYER_HEADER = struct.Struct("<IIHHfQQ")


def write_packed_file(path: str, layers: list[PackedNMWeights]) -> None:
    """Binary export: magic, version, layer count, per-layer header, payloads."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(layers)))
        for p in layers:
            fh.write(_LAYER_HEADER.pack(p.d_out, p.d_in, p.pattern.n_keep,
                                        p.pattern.group_size, p.gamma,
                                        p.value_bits.nbytes, p.index_meta.nbytes))
        for p in layers:
            fh.write(p.value_bits.tobytes())
            fh.write(p.index_meta.tobytes())


def read_packed_file(path: str) -> list[PackedNMWeights]:
    from .errors import CheckpointError

    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != MAGIC:
            raise CheckpointError(f"bad magic {magic!r}; expected {MAGIC!r}")
        version, count = struct.unpack("<II", fh.read(8))
        if version != FORMAT_VERSION:
            raise CheckpointError(f"unsupported format version {version}")
        headers = [_LAYER_HEADER.unpack(fh.read(_LAYER_HEADER.size)) for _ in range(count)]
        layers = []
        for d_out, d_in, n, m, gamma, len_vals, len_idx in headers:
            pattern = NMPattern(n, m)
            expect = payload_nbytes(d_out, d_in, pattern)
            if (len_vals, len_idx) != expect:
                raise CheckpointError(f"payload lengths {(len_vals, len_idx)} != expected {expect}")
            value_bits = np.frombuffer(fh.read(len_vals), dtype=np.uint8)
            index_meta = np.frombuffer(fh.read(len_idx), dtype=np.uint8)
            if value_bits.size != len_vals or index_meta.size != len_idx:
                raise CheckpointError("truncated payload")
            layers.append(PackedNMWeights(d_out=d_out, d_in=d_in, pattern=pattern,
                                          value_bits=value_bits, index_meta=index_meta,
                                          gamma=float(gamma)))
        return layers
