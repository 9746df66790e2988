"""Minimal reverse-mode autodiff over dense float32 numpy arrays.

Define-by-run: every op appends a node to an implicit tape held by the
output tensors themselves (micrograd style). ``Tensor.backward()`` walks
the DAG once in reverse topological order and accumulates gradients.

Ops that need a hand-written backward (quantizers, masks) go through
``custom_grad``, which installs the caller's rule verbatim and bypasses
autodiff of the forward's interior.
"""

from __future__ import annotations

import numpy as np

from .errors import NumericFault, ShapeError

_f32 = np.float32


def _as_f32(x) -> np.ndarray:
    arr = np.asarray(x, dtype=_f32)
    if arr.ndim > 0 and not arr.flags["C_CONTIGUOUS"]:
        arr = np.ascontiguousarray(arr)
    return arr


def _check_finite(op: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericFault(f"op '{op}' produced non-finite values")


class Tensor:
    """Dense float32 tensor with an optional grad slot.

    Values are stored row-major; ``grad`` has the same shape once backward
    has run. Tensors are immutable once written by their producing op
    (parameter updates replace ``values`` wholesale between steps).
    """

    __slots__ = ("values", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, values, requires_grad: bool = False, _parents=(), _op: str = "leaf"):
        self.values = _as_f32(values)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = _parents
        self._backward = None
        self._op = _op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, seed: np.ndarray | None = None) -> None:
        """Backpropagate from this tensor through the recorded DAG.

        Each node is visited exactly once in reverse topological order;
        gradients of shared subexpressions accumulate by summation.
        """
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))

        if seed is None:
            seed = np.ones_like(self.values)
        else:
            seed = _as_f32(seed)
            if seed.shape != self.values.shape:
                raise ShapeError(f"backward seed shape {seed.shape} != {self.values.shape}")
        self.grad = seed
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if g.shape != t.values.shape:
        raise ShapeError(f"gradient shape {g.shape} != tensor shape {t.values.shape}")
    g = g.astype(_f32, copy=False)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad = t.grad + g


def _make(op: str, values: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    _check_finite(op, values)
    req = any(p.requires_grad for p in parents)
    out = Tensor(values, requires_grad=req, _parents=parents if req else (), _op=op)
    if req:
        out._backward = backward
    return out


# ---------------------------------------------------------------------------
# ops
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; 2-D or batched with identical leading dims."""
    av, bv = a.values, b.values
    if av.ndim < 2 or bv.ndim < 2:
        raise ShapeError("matmul requires >=2-D operands")
    if av.shape[-1] != bv.shape[-2]:
        raise ShapeError(f"matmul inner dims {av.shape} x {bv.shape}")
    if av.ndim != bv.ndim or av.shape[:-2] != bv.shape[:-2]:
        raise ShapeError(f"matmul batch dims differ: {av.shape} x {bv.shape}")
    out_values = np.matmul(av, bv)

    def backward(g):
        if a.requires_grad:
            _accum(a, np.matmul(g, bv.swapaxes(-1, -2)))
        if b.requires_grad:
            _accum(b, np.matmul(av.swapaxes(-1, -2), g))

    return _make("matmul", out_values, (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add shapes {a.shape} != {b.shape}")
    out_values = a.values + b.values

    def backward(g):
        if a.requires_grad:
            _accum(a, g)
        if b.requires_grad:
            _accum(b, g)

    return _make("add", out_values, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul shapes {a.shape} != {b.shape}")
    out_values = a.values * b.values

    def backward(g):
        if a.requires_grad:
            _accum(a, g * b.values)
        if b.requires_grad:
            _accum(b, g * a.values)

    return _make("mul", out_values, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    c = _f32(c)

    def backward(g):
        if a.requires_grad:
            _accum(a, g * c)

    return _make("scale", a.values * c, (a,), backward)


def add_const(a: Tensor, const: np.ndarray) -> Tensor:
    """Add a non-differentiable constant array (broadcastable to a)."""
    const = _as_f32(const)
    out_values = a.values + const
    if out_values.shape != a.shape:
        raise ShapeError("add_const must not change the shape")

    def backward(g):
        if a.requires_grad:
            _accum(a, g)

    return _make("add_const", out_values, (a,), backward)


def relu(a: Tensor) -> Tensor:
    out_values = np.maximum(a.values, 0)

    def backward(g):
        if a.requires_grad:
            _accum(a, g * (a.values > 0))

    return _make("relu", out_values, (a,), backward)


def silu(a: Tensor) -> Tensor:
    sig = 1.0 / (1.0 + np.exp(-a.values))
    out_values = a.values * sig

    def backward(g):
        if a.requires_grad:
            _accum(a, g * (sig * (1.0 + a.values * (1.0 - sig))))

    return _make("silu", out_values, (a,), backward)


def rmsnorm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    """RMS normalization over the last axis, scaled by a learned gain."""
    if gain.shape != (x.shape[-1],):
        raise ShapeError(f"rmsnorm gain shape {gain.shape} vs feature dim {x.shape[-1]}")
    xv = x.values
    d = xv.shape[-1]
    inv = 1.0 / np.sqrt(np.mean(np.square(xv), axis=-1, keepdims=True) + _f32(eps))
    xhat = xv * inv
    out_values = xhat * gain.values

    def backward(g):
        if gain.requires_grad:
            _accum(gain, np.sum(g * xhat, axis=tuple(range(xv.ndim - 1))))
        if x.requires_grad:
            t = g * gain.values
            corr = np.sum(t * xhat, axis=-1, keepdims=True) / _f32(d)
            _accum(x, inv * (t - xhat * corr))

    return _make("rmsnorm", out_values, (x, gain), backward)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    if x.shape[-1] == 0:
        raise ShapeError("softmax over empty axis")
    z = x.values - np.max(x.values, axis=-1, keepdims=True)
    e = np.exp(z)
    out_values = e / np.sum(e, axis=-1, keepdims=True)

    def backward(g):
        if x.requires_grad:
            dot = np.sum(g * out_values, axis=-1, keepdims=True)
            _accum(x, out_values * (g - dot))

    return _make("softmax", out_values, (x,), backward)


def embedding_gather(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather from an embedding table; backward scatter-adds."""
    ids = np.asarray(ids)
    if ids.min(initial=0) < 0 or (ids.size and ids.max() >= table.shape[0]):
        raise ShapeError("embedding ids out of range")
    out_values = table.values[ids]

    def backward(g):
        if table.requires_grad:
            gt = np.zeros_like(table.values)
            np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
            _accum(table, gt)

    return _make("embedding_gather", out_values, (table,), backward)


def cross_entropy_loss(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer targets under the logits."""
    lv = logits.values
    if lv.ndim != 2:
        raise ShapeError("cross_entropy expects 2-D logits (tokens x classes)")
    targets = np.asarray(targets).reshape(-1)
    if targets.shape[0] != lv.shape[0]:
        raise ShapeError("cross_entropy target count mismatch")
    n = lv.shape[0]
    m = np.max(lv, axis=-1, keepdims=True)
    z = lv - m
    lse = np.log(np.sum(np.exp(z), axis=-1))
    nll = lse - z[np.arange(n), targets]
    out_values = np.asarray(np.mean(nll), dtype=_f32)

    def backward(g):
        if logits.requires_grad:
            p = np.exp(z - lse[:, None])
            p[np.arange(n), targets] -= 1.0
            _accum(logits, p * (np.asarray(g, dtype=_f32) / _f32(n)))

    return _make("cross_entropy", out_values, (logits,), backward)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out_values = a.values.reshape(shape)

    def backward(g):
        if a.requires_grad:
            _accum(a, g.reshape(a.shape))

    return _make("reshape", out_values, (a,), backward)


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    inv = np.argsort(axes)
    out_values = np.ascontiguousarray(a.values.transpose(axes))

    def backward(g):
        if a.requires_grad:
            _accum(a, np.ascontiguousarray(g.transpose(inv)))

    return _make("transpose", out_values, (a,), backward)


def custom_grad(op: str, inputs: tuple[Tensor, ...], forward_fn, backward_fn) -> Tensor:
    """Attach a caller-supplied backward rule to an opaque forward.

    ``forward_fn`` maps the input value arrays to the output array.
    ``backward_fn`` maps the output gradient to one gradient array per
    input (``None`` to skip); shapes must match the inputs exactly.
    Autodiff never looks inside ``forward_fn`` — this is the STE hook.
    """
    out_values = _as_f32(forward_fn(*[t.values for t in inputs]))

    def backward(g):
        grads = backward_fn(g)
        if not isinstance(grads, (tuple, list)):
            grads = (grads,)
        if len(grads) != len(inputs):
            raise ShapeError(f"custom op '{op}' returned {len(grads)} grads for {len(inputs)} inputs")
        for t, gi in zip(inputs, grads):
            if gi is None:
                continue
            gi = np.asarray(gi, dtype=_f32)
            if gi.shape != t.values.shape:
                raise ShapeError(f"custom op '{op}' grad shape {gi.shape} != input shape {t.values.shape}")
            if t.requires_grad:
                _accum(t, gi)

    return _make(op, out_values, inputs, backward)
