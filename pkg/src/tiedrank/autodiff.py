"""Dense tensors with reverse-mode automatic differentiation.

A small numpy-backed engine: just enough machinery for a tied transformer
encoder, the two retrieval losses, and finite-difference gradient checking.

A ``Tape`` records operations in execution order; ``backward`` replays the
records in reverse, accumulating vector-Jacobian products. Gradients only
flow into tensors attached to a tape (watched parameters and intermediate
results), so tensors built from plain data act as constants and the whole
op set doubles as a plain numpy forward path when no tape is active.

Two precisions are supported: float32 for training, float64 for gradient
checking. Tensor-tensor operations require matching dtypes.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import ContractError, EmptySequenceError, ShapeError

_ALLOWED_DTYPES = (np.float32, np.float64)

# tanh-approximation GELU constants
_GELU_C0 = math.sqrt(2.0 / math.pi)
_GELU_C1 = 0.044715

# additive attention-mask bias; exp(-1e9 - max) underflows to exactly 0
MASK_BIAS = -1e9

# debug hook: when True, backward() accumulates the WRONG sign into watched
# leaves. Exists only so the gradient-check harness can prove it catches a
# broken gradient; never set outside that path.
DEBUG_FLIP_LEAF_GRAD = False


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype in (np.dtype(np.float32), np.dtype(np.float64)):
        return arr
    return arr.astype(np.float32)


class Tensor:
    """Dense n-dimensional float array, optionally attached to a Tape."""

    __slots__ = ("data", "grad", "tape")

    def __init__(self, data, dtype=None, tape: Optional["Tape"] = None):
        self.data = _as_array(data, dtype)
        self.grad: Optional[np.ndarray] = None
        self.tape = tape

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """Copy of this tensor's value with no tape attachment."""
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype})"

    # operator sugar
    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


class _Record:
    """One tape entry: the op output plus per-input gradient rules."""

    __slots__ = ("out", "inputs", "vjps")

    def __init__(self, out: Tensor, inputs: tuple, vjps: tuple):
        self.out = out
        self.inputs = inputs  # tracked input tensors only
        self.vjps = vjps      # callables grad_out -> grad_input, aligned


class Tape:
    """Ordered record of operations; execution order is a topological order.

    Use as a context manager. Watched tensors are detached from the tape on
    exit so stale references never leak records into later forward passes.
    """

    def __init__(self):
        self._records: list[_Record] = []
        self._watched: list[Tensor] = []
        self._closed = False

    def watch(self, *tensors: Tensor) -> None:
        for t in tensors:
            if t.tape is not None and t.tape is not self:
                raise ContractError("tensor is already watched by another tape")
            if t.tape is None:
                t.tape = self
                self._watched.append(t)

    def __len__(self):
        return len(self._records)

    def __enter__(self) -> "Tape":
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        self.close()

    def close(self) -> None:
        if self._closed:
            return
        for t in self._watched:
            t.tape = None
        for rec in self._records:
            rec.out.tape = None
        self._closed = True


def _result(data: np.ndarray, pairs: Sequence[tuple]) -> Tensor:
    """Wrap an op result; record it if any input is on a tape.

    ``pairs`` is a sequence of (tensor, vjp) tuples. Entries whose tensor is
    not on a tape are dropped, so constants never receive gradients.
    """
    tape = None
    for t, _ in pairs:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise ContractError("operation mixes tensors from two tapes")
            tape = t.tape
    out = Tensor(data, tape=tape)
    if tape is not None:
        tracked = [(t, fn) for t, fn in pairs if t.tape is not None]
        inputs = tuple(t for t, _ in tracked)
        vjps = tuple(fn for _, fn in tracked)
        tape._records.append(_Record(out, inputs, vjps))
    return out


def _check_same_dtype(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.dtype != b.data.dtype:
        raise ShapeError(f"{op}: dtype mismatch {a.data.dtype} vs {b.data.dtype}")


def backward(loss: Tensor) -> dict:
    """Reverse-replay the tape from a scalar loss.

    Accumulates gradients into every tracked tensor's ``.grad``; repeated
    calls without zeroing keep accumulating on watched leaves. Returns a
    map from watched tensor to its gradient array.
    """
    tape = loss.tape
    if tape is None:
        raise ContractError("backward: loss is not attached to a tape")
    if loss.data.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
    # fresh intermediate grads; watched-leaf grads persist across calls
    for rec in tape._records:
        rec.out.grad = None
    loss.grad = np.ones_like(loss.data)
    flipped = set(map(id, tape._watched)) if DEBUG_FLIP_LEAF_GRAD else ()
    for rec in reversed(tape._records):
        g = rec.out.grad
        if g is None:
            continue
        for t, vjp in zip(rec.inputs, rec.vjps):
            gi = vjp(g)
            if id(t) in flipped:
                gi = -gi
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
            np.add(t.grad, gi, out=t.grad)
    return {t: t.grad for t in tape._watched}


def zero_grad(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. Supports 2D x 2D, batched x batched with equal
    leading dims, and batched x 2D (shared right operand)."""
    _check_same_dtype(a, b, "matmul")
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2D, got {ad.shape} @ {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ: {ad.shape} @ {bd.shape}")
    if ad.ndim == bd.ndim:
        if ad.shape[:-2] != bd.shape[:-2]:
            raise ShapeError(f"matmul: leading dimensions differ: {ad.shape} @ {bd.shape}")
        out = ad @ bd
        return _result(out, [
            (a, lambda g: g @ bd.swapaxes(-1, -2)),
            (b, lambda g: ad.swapaxes(-1, -2) @ g),
        ])
    if bd.ndim == 2:
        k = ad.shape[-1]
        out = ad @ bd
        return _result(out, [
            (a, lambda g: g @ bd.T),
            (b, lambda g: ad.reshape(-1, k).T @ g.reshape(-1, bd.shape[1])),
        ])
    raise ShapeError(f"matmul: unsupported operand ranks: {ad.shape} @ {bd.shape}")


def transpose(x: Tensor, axes: Optional[tuple] = None) -> Tensor:
    ax = tuple(axes) if axes is not None else tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(ax))
    return _result(np.transpose(x.data, ax), [(x, lambda g: np.transpose(g, inv))])


def reshape(x: Tensor, shape) -> Tensor:
    orig = x.data.shape
    return _result(np.reshape(x.data, shape), [(x, lambda g: np.reshape(g, orig))])


def _binary_shapes_ok(a: np.ndarray, b: np.ndarray) -> bool:
    # equal-shape or one operand scalar (size 1); no general broadcasting
    return a.shape == b.shape or a.size == 1 or b.size == 1


def _scalar_reduce(g: np.ndarray, shape) -> np.ndarray:
    return np.reshape(np.sum(g), shape)


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = float(b)
        return _result(a.data + c, [(a, lambda g: g)])
    _check_same_dtype(a, b, "add")
    if not _binary_shapes_ok(a.data, b.data):
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")
    out = a.data + b.data
    ash, bsh = a.shape, b.shape
    return _result(out, [
        (a, (lambda g: g) if ash == out.shape else (lambda g: _scalar_reduce(g, ash))),
        (b, (lambda g: g) if bsh == out.shape else (lambda g: _scalar_reduce(g, bsh))),
    ])


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = float(b)
        return _result(a.data - c, [(a, lambda g: g)])
    _check_same_dtype(a, b, "sub")
    if not _binary_shapes_ok(a.data, b.data):
        raise ShapeError(f"sub: incompatible shapes {a.shape} and {b.shape}")
    out = a.data - b.data
    ash, bsh = a.shape, b.shape
    return _result(out, [
        (a, (lambda g: g) if a.data.shape == out.shape else (lambda g: _scalar_reduce(g, ash))),
        (b, (lambda g: -g) if b.data.shape == out.shape else (lambda g: _scalar_reduce(-g, bsh))),
    ])


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return scale(a, float(b))
    _check_same_dtype(a, b, "mul")
    if not _binary_shapes_ok(a.data, b.data):
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    out = ad * bd
    ash, bsh = a.shape, b.shape
    return _result(out, [
        (a, (lambda g: g * bd) if ad.shape == out.shape else (lambda g: _scalar_reduce(g * bd, ash))),
        (b, (lambda g: g * ad) if bd.shape == out.shape else (lambda g: _scalar_reduce(g * ad, bsh))),
    ])


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(x.data * c, [(x, lambda g: g * c)])


def div_scalar(x: Tensor, c: float) -> Tensor:
    """True division by a constant (exact where x is a float multiple of c,
    unlike multiplying by the rounded reciprocal)."""
    c = float(c)
    return _result(x.data / c, [(x, lambda g: g / c)])


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0.0), [(x, lambda g: g * mask)])


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    xd = x.data
    inner = _GELU_C0 * (xd + _GELU_C1 * xd ** 3)
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def vjp(g):
        dinner = _GELU_C0 * (1.0 + 3.0 * _GELU_C1 * xd ** 2)
        return g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t ** 2) * dinner)

    return _result(out, [(x, vjp)])


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _result(out, [(x, lambda g: g * out)])


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _result(np.log(xd), [(x, lambda g: g / xd)])


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-stabilized softmax along ``axis``; rows sum to one."""
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax: axis {axis} invalid for shape {x.shape}")
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / np.sum(e, axis=axis, keepdims=True)

    def vjp(g):
        return y * (g - np.sum(g * y, axis=axis, keepdims=True))

    return _result(y, [(x, vjp)])


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"log_softmax: axis {axis} invalid for shape {x.shape}")
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    y = shifted - lse

    def vjp(g):
        return g - np.exp(y) * np.sum(g, axis=axis, keepdims=True)

    return _result(y, [(x, vjp)])


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean, unit population variance,
    then apply the affine (gamma, beta)."""
    d = x.shape[-1] if x.ndim else 0
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(
            f"layer_norm: gamma/beta shapes {gamma.shape}/{beta.shape} do not match last extent {d}"
        )
    _check_same_dtype(x, gamma, "layer_norm")
    _check_same_dtype(x, beta, "layer_norm")
    xd = x.data
    mu = np.mean(xd, axis=-1, keepdims=True)
    var = np.mean((xd - mu) ** 2, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    out = xhat * gamma.data + beta.data
    lead = tuple(range(xd.ndim - 1))

    def vjp_x(g):
        gg = g * gamma.data
        return (gg - np.mean(gg, axis=-1, keepdims=True)
                - xhat * np.mean(gg * xhat, axis=-1, keepdims=True)) * inv

    return _result(out, [
        (x, vjp_x),
        (gamma, lambda g: np.sum(g * xhat, axis=lead)),
        (beta, lambda g: np.sum(g, axis=lead)),
    ])


def masked_mean_pool(x: Tensor, mask: np.ndarray) -> Tensor:
    """Mean over valid sequence positions.

    ``x`` is [..., T, d] and ``mask`` a binary array of shape [..., T];
    every row must have at least one valid position.
    """
    m = np.asarray(mask)
    if m.shape != x.shape[:-1]:
        raise ShapeError(f"masked_mean_pool: mask shape {m.shape} does not match {x.shape[:-1]}")
    m = m.astype(x.data.dtype)
    counts = np.sum(m, axis=-1, keepdims=True)  # [..., 1]
    if np.any(counts == 0):
        raise EmptySequenceError("masked_mean_pool: a sequence has no valid positions")
    weights = m / counts  # [..., T]
    out = np.sum(x.data * weights[..., None], axis=-2)

    def vjp(g):
        return g[..., None, :] * weights[..., None]

    return _result(out, [(x, vjp)])


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add ``b`` across the trailing dims of ``x`` (e.g. a bias vector to
    every row). Gradient for ``b`` sums over the leading dims."""
    _check_same_dtype(x, b, "add_bias")
    if b.ndim > x.ndim or x.shape[x.ndim - b.ndim:] != b.shape:
        raise ShapeError(f"add_bias: bias shape {b.shape} does not match trailing dims of {x.shape}")
    lead = tuple(range(x.ndim - b.ndim))
    return _result(x.data + b.data, [
        (x, lambda g: g),
        (b, (lambda g: np.sum(g, axis=lead)) if lead else (lambda g: g)),
    ])


def add_col(x: Tensor, c: Tensor) -> Tensor:
    """Add a length-m column vector to every column of an m x n matrix."""
    _check_same_dtype(x, c, "add_col")
    if x.ndim != 2 or c.shape != (x.shape[0],):
        raise ShapeError(f"add_col: expected [m, n] and [m], got {x.shape} and {c.shape}")
    return _result(x.data + c.data[:, None], [
        (x, lambda g: g),
        (c, lambda g: np.sum(g, axis=1)),
    ])


def diag_part(x: Tensor) -> Tensor:
    if x.ndim != 2 or x.shape[0] != x.shape[1]:
        raise ShapeError(f"diag_part: expected a square matrix, got {x.shape}")
    n = x.shape[0]

    def vjp(g):
        out = np.zeros_like(x.data)
        np.fill_diagonal(out, g)
        return out

    return _result(np.diagonal(x.data).copy(), [(x, vjp)])


def l2_normalize_rows(x: Tensor) -> Tensor:
    """Scale along the last axis to unit Euclidean norm."""
    xd = x.data
    n = np.sqrt(np.sum(xd * xd, axis=-1, keepdims=True))
    n = np.maximum(n, 1e-12)
    y = xd / n

    def vjp(g):
        return (g - y * np.sum(g * y, axis=-1, keepdims=True)) / n

    return _result(y, [(x, vjp)])


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    dtype = x.data.dtype
    return _result(np.asarray(np.sum(x.data), dtype=dtype),
                   [(x, lambda g: np.full(shape, g, dtype=dtype))])


def mean_all(x: Tensor) -> Tensor:
    return scale(sum_all(x), 1.0 / x.size)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    if x.ndim < 1 or not 0 <= start < stop <= x.shape[0]:
        raise ShapeError(f"slice_rows: [{start}:{stop}] invalid for shape {x.shape}")

    def vjp(g):
        out = np.zeros_like(x.data)
        out[start:stop] = g
        return out

    return _result(x.data[start:stop].copy(), [(x, vjp)])


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5,
               floor: float = 1e-8) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must be scalar-valued. The relative error per coordinate is
    |analytic - numeric| / max(|analytic|, |numeric|, floor). Central
    differences carry rounding noise of about ulp(f)/(2*eps), so when f
    has coordinates with mathematically zero gradient the floor must sit
    above that noise or the check fails on noise alone.
    """
    x.grad = None
    with Tape() as tape:
        tape.watch(x)
        y = f(x)
        if y.data.size != 1:
            raise ContractError("grad_check: f must be scalar-valued")
        backward(y)
    analytic = x.grad.copy() if x.grad is not None else np.zeros_like(x.data)
    x.grad = None

    base = x.data.copy()
    numeric = np.zeros_like(base)
    for i in range(base.size):
        xp = base.copy()
        xp.flat[i] += eps
        fp = float(f(Tensor(xp)).data)
        xm = base.copy()
        xm.flat[i] -= eps
        fm = float(f(Tensor(xm)).data)
        numeric.flat[i] = (fp - fm) / (2.0 * eps)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))
