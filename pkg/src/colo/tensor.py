"""Dense tensors with reverse-mode automatic differentiation.

Define-by-run: operations executed inside a ``with Tape():`` block record
their backward rules onto the active tape; :func:`backward` replays the tape
in reverse and accumulates gradients additively into ``.grad`` buffers.
Tensors are float32 by default; pass ``dtype=np.float64`` at creation for
gradient-check precision.  The tape stack is thread-local, so independent
tapes may run concurrently as long as they share no tensors.
"""

import os
import threading
from contextlib import contextmanager

import numpy as np

from . import kernels


class TensorError(Exception):
    """Base class for numeric-core errors."""


class ShapeError(TensorError):
    """Operand shapes are incompatible."""


class RankError(TensorError):
    """Operation requires a scalar (rank-0) tensor."""


class DegenerateVectorError(TensorError):
    """Cosine similarity received a zero-norm vector."""


class EmptyPoolError(TensorError):
    """Masked pooling received an all-false mask."""


class VocabularyError(TensorError):
    """A target token id lies outside the vocabulary."""


class NonFiniteError(TensorError):
    """A forward operation produced NaN or Inf."""


COSINE_EPS = 1e-8
_CHECK_FINITE = os.environ.get("COLO_CHECK_FINITE", "0") == "1"

_TLS = threading.local()


def _tape_stack():
    if not hasattr(_TLS, "stack"):
        _TLS.stack = []
    return _TLS.stack


class Tape:
    """Ordered record of operations for one forward pass."""

    def __init__(self):
        self.ops = []

    @staticmethod
    def current():
        stack = _tape_stack()
        return stack[-1] if stack else None

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        assert popped is self
        return False


@contextmanager
def no_grad():
    """Suspend recording: ops inside run as plain numpy forward passes."""
    _tape_stack().append(None)
    try:
        yield
    finally:
        _tape_stack().pop()


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node_id")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node_id = None

    # -- introspection ------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"

    # -- gradient plumbing --------------------------------------------

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g):
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    # -- operator sugar ------------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    def __rmul__(self, other):
        return mul(_as_tensor(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other, self.dtype))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x, dtype):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


class _Op:
    __slots__ = ("inputs", "output", "bwd")

    def __init__(self, inputs, output, bwd):
        self.inputs = inputs
        self.output = output
        self.bwd = bwd


def _make(out_data, inputs, bwd):
    """Wrap an op result; record it if a tape is active and grads are needed."""
    if _CHECK_FINITE and not np.all(np.isfinite(out_data)):
        raise NonFiniteError("operation produced a non-finite value")
    out = Tensor(out_data)
    tape = Tape.current()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node_id = len(tape.ops)
        tape.ops.append(_Op(inputs, out, bwd))
    return out


def backward(loss):
    """Populate ``.grad`` on every tensor reachable from ``loss``.

    Visits the active tape once in reverse recording order; gradients from
    multiple uses of the same tensor accumulate additively.
    """
    if loss.data.ndim != 0:
        raise RankError(f"backward needs a scalar root, got shape {loss.shape}")
    tape = Tape.current()
    if tape is None:
        raise TensorError("backward called with no active tape")
    loss.accumulate_grad(np.ones((), dtype=loss.dtype))
    for op in reversed(tape.ops):
        g = op.output.grad
        if g is None:
            continue
        contribs = op.bwd(g)
        for t, gc in zip(op.inputs, contribs):
            if gc is not None and t.requires_grad:
                t.accumulate_grad(gc)


def _unbroadcast(g, shape):
    """Reduce a broadcast gradient back to the operand's shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.astype(np.result_type(g.dtype), copy=False)


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b):
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), bwd)


def sub(a, b):
    out = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(out, (a, b), bwd)


def mul(a, b):
    out = a.data * b.data

    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), bwd)


def div(a, b):
    out = a.data / b.data

    def bwd(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * out / b.data, b.shape),
        )

    return _make(out, (a, b), bwd)


def neg(a):
    return _make(-a.data, (a,), lambda g: (-g,))


def sqrt(a):
    out = np.sqrt(a.data)

    def bwd(g):
        return (g * 0.5 / out,)

    return _make(out, (a,), bwd)


def tanh(a):
    out = np.tanh(a.data)

    def bwd(g):
        return (g * (1.0 - out * out),)

    return _make(out, (a,), bwd)


def relu(a):
    out = np.maximum(a.data, 0.0)

    def bwd(g):
        return (g * (a.data > 0.0),)

    return _make(out, (a,), bwd)


def gelu(a):
    out = kernels.gelu_fwd(a.data)

    def bwd(g):
        return (kernels.gelu_bwd(g, a.data),)

    return _make(out.astype(a.dtype, copy=False), (a,), bwd)


# ---------------------------------------------------------------------------
# shape ops


def reshape(a, shape):
    out = a.data.reshape(shape)

    def bwd(g):
        return (g.reshape(a.shape),)

    return _make(out, (a,), bwd)


def swapaxes(a, ax1, ax2):
    out = np.swapaxes(a.data, ax1, ax2)

    def bwd(g):
        return (np.swapaxes(g, ax1, ax2),)

    return _make(out, (a,), bwd)


def sum_(a, axis=None, keepdims=False):
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=False),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).astype(a.dtype, copy=False),)

    return _make(out, (a,), bwd)


def mean_(a, axis=None, keepdims=False):
    n = a.size if axis is None else a.shape[axis]
    return mul(sum_(a, axis=axis, keepdims=keepdims), _as_tensor(1.0 / n, a.dtype))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    """Matrix product with numpy's batched-matmul broadcasting (operands >= 2-D)."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    out = np.matmul(a.data, b.data)

    def bwd(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make(out, (a, b), bwd)


def take_rows(table, ids):
    """Gather rows of a 2-D table; the gradient scatter-adds back."""
    if table.ndim != 2:
        raise ShapeError("take_rows expects a 2-D table")
    ids = np.asarray(ids)
    out = table.data[ids]

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _make(out, (table,), bwd)


def slice0(a, start, stop):
    """Contiguous slice along axis 0; the gradient pads back with zeros."""
    out = a.data[start:stop]

    def bwd(g):
        ga = np.zeros_like(a.data)
        ga[start:stop] = g
        return (ga,)

    return _make(out, (a,), bwd)


# ---------------------------------------------------------------------------
# fused kernel ops


def softmax_last(a):
    """Softmax over the final axis."""
    flat = a.data.reshape(-1, a.shape[-1])
    p = kernels.softmax_fwd(flat)

    def bwd(g):
        dx = kernels.softmax_bwd(g.reshape(-1, a.shape[-1]), p)
        return (dx.reshape(a.shape),)

    return _make(p.reshape(a.shape).astype(a.dtype, copy=False), (a,), bwd)


def layer_norm(x, gain, bias, eps=1e-5):
    """Per-row zero-mean/unit-variance normalization followed by an affine map."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError("layer_norm gain/bias must match the feature width")
    flat = np.ascontiguousarray(x.data.reshape(-1, d))
    out, xhat, rstd = kernels.layer_norm_fwd(flat, gain.data, bias.data, eps)

    def bwd(g):
        dx, dgain, dbias = kernels.layer_norm_bwd(g.reshape(-1, d), xhat, rstd, gain.data)
        return dx.reshape(x.shape), dgain, dbias

    return _make(out.reshape(x.shape), (x, gain, bias), bwd)


def cross_entropy_rows(logits, targets):
    """Per-row softmax NLL of target ids; log-sum-exp stabilized."""
    if logits.ndim != 2:
        raise ShapeError("cross_entropy_rows expects 2-D logits")
    targets = np.asarray(targets, dtype=np.int64)
    v = logits.shape[1]
    if targets.min(initial=0) < 0 or targets.max(initial=0) >= v:
        raise VocabularyError(f"target id outside vocabulary of size {v}")
    nll, probs = kernels.xent_fwd(np.ascontiguousarray(logits.data), targets)

    def bwd(g):
        return (kernels.xent_bwd(np.ascontiguousarray(g), probs, targets),)

    return _make(nll.astype(logits.dtype, copy=False), (logits,), bwd)


# ---------------------------------------------------------------------------
# pooling / similarity surfaces


def masked_mean_pool(states, mask):
    """Mean of the rows selected by a boolean mask.

    ``states`` is (T, d) with ``mask`` (T,), or batched (B, T, d) with
    (B, T); masked-out rows contribute nothing.
    """
    m = np.asarray(mask, dtype=bool)
    if m.shape != states.shape[:-1]:
        raise ShapeError(f"mask shape {m.shape} does not match states {states.shape}")
    counts = m.sum(axis=-1)
    if np.any(counts == 0):
        raise EmptyPoolError("masked_mean_pool needs at least one unmasked position")
    mf = Tensor(m.astype(states.dtype)[..., None])
    inv = Tensor((1.0 / counts).astype(states.dtype))
    pooled = sum_(mul(states, mf), axis=-2)
    if pooled.ndim == 1:
        return mul(pooled, inv)
    return mul(pooled, reshape(inv, (-1, 1)))


def maximum_floor(a, floor):
    """Elementwise max(a, floor) for a constant floor."""
    return add(relu(sub(a, _as_tensor(floor, a.dtype))), _as_tensor(floor, a.dtype))


def _cosine(u, v, axis):
    nu = np.sqrt((u.data * u.data).sum(axis=axis))
    nv = np.sqrt((v.data * v.data).sum(axis=axis))
    if np.any(nu == 0.0) or np.any(nv == 0.0):
        raise DegenerateVectorError("cosine similarity of a zero-norm vector")
    dot = sum_(mul(u, v), axis=axis)
    denom = maximum_floor(mul(sqrt(sum_(mul(u, u), axis=axis)), sqrt(sum_(mul(v, v), axis=axis))), COSINE_EPS)
    return div(dot, denom)


def cosine_similarity(u, v):
    """Cosine similarity of two 1-D tensors (scalar output, in [-1, 1])."""
    if u.ndim != 1 or v.ndim != 1 or u.shape != v.shape:
        raise ShapeError("cosine_similarity expects matching 1-D tensors")
    return _cosine(u, v, axis=None)


def cosine_rows(u, v):
    """Row-wise cosine similarity of two (B, d) tensors, returning (B,)."""
    if u.ndim != 2 or u.shape != v.shape:
        raise ShapeError("cosine_rows expects matching 2-D tensors")
    return _cosine(u, v, axis=-1)


def softmax_cross_entropy(logits, targets, mask):
    """Mean NLL over unmasked positions of a (T, V) logit matrix."""
    m = np.asarray(mask, dtype=bool)
    if m.shape != (logits.shape[0],):
        raise ShapeError("mask length must match the number of rows")
    if not m.any():
        raise EmptyPoolError("softmax_cross_entropy needs an unmasked position")
    nll = cross_entropy_rows(logits, targets)
    mf = Tensor(m.astype(logits.dtype))
    return div(sum_(mul(nll, mf)), _as_tensor(float(m.sum()), logits.dtype))


# ---------------------------------------------------------------------------
# gradient checking


def finite_diff_check(f, at, eps=1e-5):
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps a tensor to a scalar tensor.  The relative error per
    coordinate is |a - n| / (|a| + |n| + 1e-12); use float64 inputs for
    meaningful thresholds.
    """
    at.zero_grad()
    with Tape():
        out = f(at)
        if out.data.ndim != 0:
            raise RankError("finite_diff_check needs a scalar-valued function")
        backward(out)
    analytic = np.zeros_like(at.data) if at.grad is None else at.grad.copy()

    flat = at.data.reshape(-1)
    numeric = np.zeros_like(flat)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(f(at).data)
            flat[i] = orig - eps
            lo = float(f(at).data)
            flat[i] = orig
            numeric[i] = (hi - lo) / (2.0 * eps)
    a = analytic.reshape(-1)
    rel = np.abs(a - numeric) / (np.abs(a) + np.abs(numeric) + 1e-12)
    return float(rel.max())
