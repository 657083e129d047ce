"""Dense tensors with tape-based reverse-mode differentiation.

Operations executed while a :class:`Tape` is active, and touching at least one
tensor with ``requires_grad=True``, are appended to that tape.  Calling
:meth:`Tape.backward` walks the record once in reverse and accumulates
gradients into every participating tensor.  Outside a tape nothing is
recorded, which is how inference runs.

Broadcasting is deliberately limited to matrix + row-vector and
tensor + scalar.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np

from ..exceptions import InvalidInputError

_DEFAULT_DTYPE = np.float32
_TAPES: list["Tape"] = []


def get_default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype):
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise InvalidInputError(f"unsupported precision {dtype!r}")
    _DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default floating point precision."""
    previous = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


class Tensor:
    """A numpy array plus an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        arr = np.array(data, dtype=dtype or _DEFAULT_DTYPE, copy=True)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name

    @classmethod
    def _wrap(cls, arr):
        t = cls.__new__(cls)
        t.data = arr
        t.grad = None
        t.requires_grad = False
        t.name = None
        return t

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

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return len(self.data)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise InvalidInputError("division is only supported by a scalar")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self):
        return transpose(self)


class Tape:
    """Ordered record of differentiable operations.

    Records are appended in execution order, which is always a valid
    topological order, so a single reverse sweep suffices.
    """

    def __init__(self):
        self._records = []
        self._consumed = False

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def __len__(self):
        return len(self._records)

    def record(self, out, parents, backward):
        if self._consumed:
            raise RuntimeError("cannot record onto a tape that has been replayed")
        self._records.append((out, parents, backward))

    def backward(self, loss):
        if self._consumed:
            raise RuntimeError("tape has already been replayed")
        if loss.size != 1:
            raise InvalidInputError("backward() needs a scalar loss")
        self._consumed = True
        loss.grad = np.ones_like(loss.data)
        for out, parents, fn in reversed(self._records):
            g = out.grad
            if g is None:
                continue
            grads = fn(g)
            for p, pg in zip(parents, grads):
                if pg is None or not p.requires_grad:
                    continue
                if p.grad is None:
                    p.grad = np.array(pg, dtype=p.dtype, copy=True)
                else:
                    p.grad = p.grad + pg
        self._records.clear()


def _active_tape():
    return _TAPES[-1] if _TAPES else None


def _as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=dtype or _DEFAULT_DTYPE))


def _result(data, parents, backward):
    out = Tensor._wrap(data)
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.record(out, parents, backward)
    return out


# ---------------------------------------------------------------------------
# elementwise and structural primitives
# ---------------------------------------------------------------------------


def add(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    if a.shape == b.shape:
        return _result(a.data + b.data, (a, b), lambda g: (g, g))
    if b.ndim == 0 or b.size == 1 and b.ndim <= 1:
        return _result(a.data + b.data.reshape(()), (a, b), lambda g: (g, g.sum().reshape(b.shape)))
    if a.ndim == 0:
        return add(b, a)
    if a.ndim == 2 and b.ndim == 1 and b.shape[0] == a.shape[1]:
        return _result(a.data + b.data, (a, b), lambda g: (g, g.sum(axis=0)))
    if b.ndim == 2 and a.ndim == 1 and a.shape[0] == b.shape[1]:
        return add(b, a)
    raise InvalidInputError(f"cannot add shapes {a.shape} and {b.shape}")


def neg(a):
    return _result(-a.data, (a,), lambda g: (-g,))


def mul(a, b):
    """Elementwise product of equal shapes, or scaling by a constant scalar."""
    a = _as_tensor(a)
    if np.isscalar(b):
        c = float(b)
        return _result(a.data * a.dtype.type(c), (a,), lambda g: (g * c,))
    b = _as_tensor(b, a.dtype)
    if a.shape != b.shape:
        raise InvalidInputError(f"mul needs equal shapes, got {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def matmul(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise InvalidInputError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _result(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def transpose(a):
    if a.ndim != 2:
        raise InvalidInputError("transpose needs a matrix")
    return _result(a.data.T.copy(), (a,), lambda g: (g.T,))


def reshape(a, shape):
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def getitem(a, index):
    shape, dtype = a.shape, a.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, index, g)
        return (full,)

    return _result(np.array(a.data[index], copy=True), (a,), backward)


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))
        )

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def total(a):
    """Sum of all entries."""
    shape = a.shape
    return _result(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape),))


def mean(a, axis=None):
    """Mean over all entries, or over rows when ``axis=0`` (matrix -> row vector)."""
    if axis is None:
        n = a.size
        shape = a.shape
        return _result(np.asarray(a.data.mean()), (a,), lambda g: (np.broadcast_to(g / n, shape),))
    if axis != 0 or a.ndim != 2:
        raise InvalidInputError("mean supports axis=None or axis=0 on matrices")
    n = a.shape[0]
    return _result(a.data.mean(axis=0), (a,), lambda g: (np.broadcast_to(g / n, a.shape),))


def tanh(a):
    y = np.tanh(a.data)
    return _result(y, (a,), lambda g: (g * (1.0 - y * y),))


def relu(a):
    pos = a.data > 0
    return _result(a.data * pos, (a,), lambda g: (g * pos,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a):
    """GELU, tanh approximation."""
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * (x + 0.044715 * x2 * x))
    y = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _result(y, (a,), backward)


def softmax(a):
    """Row-wise softmax of a matrix (or of a vector)."""
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, (a,), backward)


def layer_norm(x, gain, bias, eps=1e-5):
    """Per-row normalisation followed by an affine map."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    y = xhat * gain.data + bias.data

    def backward(g):
        dxhat = g * gain.data
        dx = rstd * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _result(y, (x, gain, bias), backward)


def embedding(table, ids):
    """Gather rows of ``table``; an id of -1 yields a zero row."""
    ids = np.asarray(ids, dtype=np.int64)
    n = table.shape[0]
    if ids.size and (ids.max() >= n or ids.min() < -1):
        raise InvalidInputError(f"embedding id out of range for table with {n} rows")
    valid = ids >= 0
    out = np.zeros((len(ids), table.shape[1]), dtype=table.dtype)
    out[valid] = table.data[ids[valid]]

    def backward(g):
        gt = np.zeros(table.shape, dtype=table.dtype)
        np.add.at(gt, ids[valid], g[valid])
        return (gt,)

    return _result(out, (table,), backward)


def unfold1d(x, kernel):
    """Stack ``kernel`` time-shifted copies of a (T, C) signal -> (T, kernel*C).

    Zero "same" padding; with a weight matrix this is a 1-D convolution.
    """
    if kernel % 2 != 1:
        raise InvalidInputError("unfold1d needs an odd kernel")
    T, C = x.shape
    half = kernel // 2
    padded = np.zeros((T + 2 * half, C), dtype=x.dtype)
    padded[half : half + T] = x.data
    out = np.concatenate([padded[j : j + T] for j in range(kernel)], axis=1)

    def backward(g):
        gp = np.zeros_like(padded)
        for j in range(kernel):
            gp[j : j + T] += g[:, j * C : (j + 1) * C]
        return (gp[half : half + T],)

    return _result(out, (x,), backward)


def straight_through(z, quantized):
    """Forward value ``quantized``; the gradient flows to ``z`` unchanged."""
    q = np.asarray(quantized, dtype=z.dtype)
    if q.shape != z.shape:
        raise InvalidInputError("straight_through shape mismatch")
    return _result(q.copy(), (z,), lambda g: (g,))


def dropout(x, p, rng):
    if p <= 0.0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return _result(x.data * keep, (x,), lambda g: (g * keep,))


def causal_attention(q, k, v, n_heads, allowed):
    """Multi-head scaled dot-product attention with a boolean visibility mask.

    ``allowed[i, j]`` says whether query ``i`` may attend to key ``j``; every
    row must allow at least one key.
    """
    T, d = q.shape
    if d % n_heads:
        raise InvalidInputError("model width must be divisible by the head count")
    allowed = np.asarray(allowed, dtype=bool)
    if allowed.shape != (T, T) or not allowed.any(axis=1).all():
        raise InvalidInputError("attention mask must be (T, T) with a visible key per row")
    hd = d // n_heads
    scale = 1.0 / math.sqrt(hd)

    def heads(a):
        return a.reshape(T, n_heads, hd).transpose(1, 0, 2)

    qh, kh, vh = heads(q.data), heads(k.data), heads(v.data)
    scores = np.matmul(qh, kh.transpose(0, 2, 1)) * scale
    scores = np.where(allowed, scores, -np.inf)
    scores -= scores.max(axis=-1, keepdims=True)
    w = np.exp(scores)
    w /= w.sum(axis=-1, keepdims=True)
    out = np.matmul(w, vh).transpose(1, 0, 2).reshape(T, d)

    def backward(g):
        gh = heads(g)
        gw = np.matmul(gh, vh.transpose(0, 2, 1))
        gv = np.matmul(w.transpose(0, 2, 1), gh)
        gs = w * (gw - (gw * w).sum(axis=-1, keepdims=True)) * scale
        gq = np.matmul(gs, kh)
        gk = np.matmul(gs.transpose(0, 2, 1), qh)

        def merge(a):
            return a.transpose(1, 0, 2).reshape(T, d)

        return merge(gq), merge(gk), merge(gv)

    return _result(out, (q, k, v), backward)


def cross_entropy_logits(logits, targets, mask, allowed=None, reduction="sum"):
    """Summed negative log-likelihood of ``targets`` over masked-in rows.

    ``allowed`` optionally restricts each row's softmax to a subset of the
    vocabulary (a (T, V) boolean array); excluded classes take no part in the
    normaliser and receive zero gradient.  With ``reduction="none"`` the
    per-row losses are returned (zero on masked-out rows).
    """
    z = logits.data
    if z.ndim != 2:
        raise InvalidInputError("logits must be a (T, V) matrix")
    T, V = z.shape
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    mask = np.asarray(mask, dtype=bool).reshape(-1)
    if targets.shape != (T,) or mask.shape != (T,):
        raise InvalidInputError("targets and mask must have one entry per logit row")
    if not mask.any():
        raise InvalidInputError("loss mask selects no positions")
    rows = np.nonzero(mask)[0]
    ty = targets[rows]
    if (ty < 0).any() or (ty >= V).any():
        raise InvalidInputError(f"target id out of range for vocabulary of {V}")
    zr = z[rows]
    if allowed is not None:
        allowed = np.asarray(allowed, dtype=bool)
        if allowed.shape != (T, V):
            raise InvalidInputError("allowed mask must match logits")
        ar = allowed[rows]
        if not ar[np.arange(len(rows)), ty].all():
            raise InvalidInputError("a target lies outside its row's allowed classes")
        zr = np.where(ar, zr, -np.inf)
    m = zr.max(axis=1, keepdims=True)
    e = np.exp(zr - m)
    s = e.sum(axis=1, keepdims=True)
    lse = (m + np.log(s))[:, 0]
    nll = lse - zr[np.arange(len(rows)), ty]
    probs = e / s

    def grad_rows(weights):
        gz = np.zeros_like(z)
        p = probs * weights[:, None]
        p[np.arange(len(rows)), ty] -= weights
        gz[rows] = p
        return gz

    if reduction == "sum":
        value = np.asarray(nll.sum(), dtype=z.dtype)
        return _result(value, (logits,), lambda g: (grad_rows(np.full(len(rows), g, dtype=z.dtype)),))
    if reduction == "none":
        per_row = np.zeros(T, dtype=z.dtype)
        per_row[rows] = nll
        return _result(per_row, (logits,), lambda g: (grad_rows(g[rows]),))
    raise InvalidInputError(f"unknown reduction {reduction!r}")


def mse(a, b):
    """Mean squared difference; ``b`` may be a constant array."""
    diff = add(a, neg(_as_tensor(b, a.dtype)))
    return mean(mul(diff, diff))
