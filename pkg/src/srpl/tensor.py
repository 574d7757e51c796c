"""Dense float64 tensors with a dynamic reverse-mode gradient tape.

Every op records onto the currently active :class:`GradTape` (if any) in
execution order, which is already a topological order of the graph.
``backward(loss)`` replays the tape in reverse, accumulating gradients into
``.grad`` of every ``requires_grad`` tensor reachable from the loss.

Broadcasting is deliberately narrow: elementwise ops accept equal shapes, or
a right operand whose shape is a trailing suffix of the left operand's shape
(bias rows, per-pair vectors, causal masks). Anything else is a shape error.
"""

from __future__ import annotations

import math
import threading
import weakref
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)

_debug_checks = False


def set_debug_checks(enabled: bool) -> None:
    """Toggle per-op NaN/Inf validation. Raises instead of propagating."""
    global _debug_checks
    _debug_checks = bool(enabled)


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class Tensor:
    """A dense f64 array plus gradient bookkeeping.

    ``data`` is a row-major (C-order) float64 ndarray; ``grad`` is either
    None or an ndarray of the same shape. Leaves are built directly; op
    results carry a reference to the tape they were recorded on.
    """

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        if _debug_checks and not np.all(np.isfinite(arr)):
            raise ArithmeticError("non-finite values in tensor literal")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        # weak: the tape owns its outputs, so a strong back-reference would
        # form cycles of step-sized arrays that only the gc could reclaim
        self._tape: Optional[weakref.ref] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # Convenience operators; the module-level functions are the primary API.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return scale(self, float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def parameter(data, requires_grad: bool = True) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


class GradTape:
    """Ordered record of executed ops.

    Execution order is a valid topological order (an op's inputs exist
    before it runs), so reverse iteration visits each node exactly once
    with its output gradient fully accumulated.
    """

    def __init__(self):
        # (output, inputs tuple, backward fn: out_grad -> tuple of in grads)
        self._ops: list[tuple[Tensor, tuple, Callable]] = []
        self._selfref = weakref.ref(self)

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _stack().pop()
        if popped is not self:
            raise RuntimeError("gradient tapes exited out of order")
        return False

    def __len__(self):
        return len(self._ops)

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
        # Per-call gradient buffers; .grad on requires_grad tensors
        # accumulates across calls (two backwards => exactly 2x).
        # Buffers enter `pending` unowned (they may alias forward data or an
        # upstream gradient); the first extra accumulation materializes a
        # private copy, so single-consumer nodes never pay for one.
        pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        holders: dict[int, Tensor] = {id(loss): loss}
        owned: set[int] = set()
        for out, inputs, backward_fn in reversed(self._ops):
            key = id(out)
            g = pending.pop(key, None)
            if g is None:
                continue
            holders.pop(key, None)
            owned.discard(key)
            if out.requires_grad:
                _accumulate_param(out, g)
            in_grads = backward_fn(g)
            for inp, gi in zip(inputs, in_grads):
                if gi is None or not _tracked(inp, self):
                    continue
                key = id(inp)
                if key not in pending:
                    pending[key] = gi
                    holders[key] = inp
                elif key in owned:
                    pending[key] += gi
                else:
                    pending[key] = pending[key] + gi
                    owned.add(key)
        for key, g in pending.items():
            t = holders[key]
            if t.requires_grad:
                _accumulate_param(t, g)


# per-thread stack: tapes may not be shared across threads, but independent
# threads may each run their own
_tls = threading.local()


def _stack() -> list:
    stack = getattr(_tls, "tapes", None)
    if stack is None:
        stack = _tls.tapes = []
    return stack


def _active_tape() -> Optional[GradTape]:
    stack = _stack()
    return stack[-1] if stack else None


def _tracked(t: Tensor, tape: GradTape) -> bool:
    return t.requires_grad or (t._tape is not None and t._tape() is tape)


def _accumulate_param(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def record_op(out_data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable,
              op_name: str = "op") -> Tensor:
    """Wrap an op result and register its backward rule on the active tape.

    ``backward_fn(out_grad)`` must return one gradient (or None) per input,
    in order. Exposed so other modules can define fused ops.
    """
    if _debug_checks and not np.all(np.isfinite(out_data)):
        raise ArithmeticError(f"non-finite values produced by {op_name}")
    out = Tensor.__new__(Tensor)
    out.data = out_data  # views are fine here; leaves stay C-contiguous
    out.requires_grad = False
    out.grad = None
    tape = _active_tape()
    if tape is not None and any(_tracked(t, tape) for t in inputs):
        out._tape = tape._selfref
        tape._ops.append((out, tuple(inputs), backward_fn))
    else:
        out._tape = None
    return out


def backward(loss: Tensor) -> None:
    """Run reverse-mode accumulation from a scalar loss to its tape's leaves."""
    tape = loss._tape() if loss._tape is not None else None
    if tape is None:
        raise ValueError("loss was not produced under an active gradient tape")
    tape.backward(loss)


def _suffix_broadcast_ok(a_shape: tuple, b_shape: tuple) -> bool:
    if a_shape == b_shape:
        return True
    nb = len(b_shape)
    return nb < len(a_shape) and a_shape[-nb:] == b_shape


def _reduce_to_suffix(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum leading axes of g so the result has the given trailing shape."""
    extra = g.ndim - len(shape)
    if extra == 0:
        return g
    return g.sum(axis=tuple(range(extra)))


# ---------------------------------------------------------------------------
# elementwise ops


def add(a: Tensor, b: Tensor) -> Tensor:
    if not _suffix_broadcast_ok(a.shape, b.shape):
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} are not compatible")

    def bwd(g):
        return g, _reduce_to_suffix(g, b.shape)

    return record_op(a.data + b.data, (a, b), bwd, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    if not _suffix_broadcast_ok(a.shape, b.shape):
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} are not compatible")

    def bwd(g):
        return g, -_reduce_to_suffix(g, b.shape)

    return record_op(a.data - b.data, (a, b), bwd, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if not _suffix_broadcast_ok(a.shape, b.shape):
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} are not compatible")
    a_data, b_data = a.data, b.data

    def bwd(g):
        return g * b_data, _reduce_to_suffix(g * a_data, b.shape)

    return record_op(a_data * b_data, (a, b), bwd, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    def bwd(g):
        return (g * c,)

    return record_op(a.data * c, (a,), bwd, "scale")


def add_const(a: Tensor, arr: np.ndarray) -> Tensor:
    """Add a non-differentiable constant array (suffix-broadcast allowed)."""
    if not _suffix_broadcast_ok(a.shape, np.shape(arr)):
        raise ShapeError(f"add_const: shapes {a.shape} and {np.shape(arr)} are not compatible")

    def bwd(g):
        return (g,)

    return record_op(a.data + arr, (a,), bwd, "add_const")


# ---------------------------------------------------------------------------
# structural ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. 2D x 2D, ND x 2D (shared right matrix), or batched
    ND x ND with identical leading dimensions."""
    ash, bsh = a.shape, b.shape
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {ash} and {bsh}")
    if ash[-1] != bsh[-2]:
        raise ShapeError(f"matmul: inner dimensions disagree for shapes {ash} and {bsh}")
    a_data, b_data = a.data, b.data

    if b_data.ndim == 2:
        lead = ash[:-2]
        a2 = a_data.reshape(-1, ash[-1])
        out = (a2 @ b_data).reshape(*lead, ash[-2], bsh[-1])

        def bwd(g):
            g2 = g.reshape(-1, bsh[-1])
            ga = (g2 @ b_data.T).reshape(ash)
            gb = a2.T @ g2
            return ga, gb

        return record_op(out, (a, b), bwd, "matmul")

    if ash[:-2] != bsh[:-2]:
        raise ShapeError(f"matmul: batch dimensions disagree for shapes {ash} and {bsh}")

    def bwd(g):
        ga = g @ b_data.swapaxes(-1, -2)
        gb = a_data.swapaxes(-1, -2) @ g
        return ga, gb

    return record_op(a_data @ b_data, (a, b), bwd, "matmul")


def reshape(a: Tensor, shape) -> Tensor:
    old_shape = a.shape

    def bwd(g):
        return (g.reshape(old_shape),)

    return record_op(np.ascontiguousarray(a.data.reshape(shape)), (a,), bwd, "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = np.argsort(axes)

    def bwd(g):
        return (g.transpose(inv),)

    return record_op(a.data.transpose(axes), (a,), bwd, "transpose")


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather: out[..., :] = table[ids[...], :]."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ValueError(f"embedding: index out of range for table with {table.shape[0]} rows")
    dim = table.shape[1]

    def bwd(g):
        gt = np.zeros(table.shape)
        np.add.at(gt, ids.ravel(), g.reshape(-1, dim))
        return (gt,)

    return record_op(table.data[ids], (table,), bwd, "embedding")


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape

    def bwd(g):
        return (np.broadcast_to(g.reshape(()), shape),)

    return record_op(np.asarray(a.data.sum()), (a,), bwd, "sum_all")


# ---------------------------------------------------------------------------
# nonlinearities and normalization


def gelu(a: Tensor) -> Tensor:
    x = a.data
    phi = x * _INV_SQRT2
    erf(phi, out=phi)
    phi += 1.0
    phi *= 0.5
    out = x * phi

    def bwd(g):
        # single fresh buffer: d/dx = phi + x * pdf(x), then scale by g
        d = np.multiply(x, x)
        d *= -0.5
        np.exp(d, out=d)
        d *= _INV_SQRT2PI
        d *= x
        d += phi
        d *= g
        return (d,)

    return record_op(out, (a,), bwd, "gelu")


def rms_norm(a: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    """Root-mean-square normalization over the last axis, scaled by gain."""
    if gain.shape != (a.shape[-1],):
        raise ShapeError(f"rms_norm: gain shape {gain.shape} does not match features {a.shape[-1]}")
    x = a.data
    n = x.shape[-1]
    inv = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    normed = x * inv
    g_data = gain.data

    def bwd(g):
        gg = g * g_data
        dot = np.sum(gg * x, axis=-1, keepdims=True)
        gg *= inv
        scaled = x * (inv ** 3)
        scaled *= dot / n
        gg -= scaled
        ggain = _reduce_to_suffix(g * normed, gain.shape)
        return gg, ggain

    return record_op(normed * g_data, (a, gain), bwd, "rms_norm")


def softmax_rows(a: Tensor, bias: Optional[np.ndarray] = None) -> Tensor:
    """Softmax over the last axis, computed with max subtraction.

    ``bias`` is an optional non-differentiable additive constant
    (suffix-broadcast), applied before normalization; it folds attention
    masks into this op without materializing a separate graph node.
    """
    if a.data.ndim < 1 or a.shape[-1] < 1:
        raise ShapeError(f"softmax_rows: need a non-empty last axis, got shape {a.shape}")
    x = a.data
    if bias is not None:
        if not _suffix_broadcast_ok(a.shape, np.shape(bias)):
            raise ShapeError(
                f"softmax_rows: bias shape {np.shape(bias)} does not suffix-broadcast to {a.shape}")
        shifted = x + bias
        shifted -= shifted.max(axis=-1, keepdims=True)
    else:
        shifted = x - x.max(axis=-1, keepdims=True)
    np.exp(shifted, out=shifted)
    shifted /= shifted.sum(axis=-1, keepdims=True)
    y = shifted

    def bwd(g):
        gy = g * y
        gy -= y * gy.sum(axis=-1, keepdims=True)
        return (gy,)

    return record_op(y, (a,), bwd, "softmax_rows")


def cross_entropy(logits: Tensor, targets: np.ndarray, ignore_index: int = -1) -> Tensor:
    """Mean negative log-likelihood over rows whose target != ignore_index.

    ``logits`` is (batch, vocab); ``targets`` is an integer vector of length
    batch. Rows flagged with the sentinel are excluded from the mean.
    """
    targets = np.asarray(targets)
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy: logits must be 2-D, got shape {logits.shape}")
    if targets.shape != (logits.shape[0],):
        raise ShapeError(
            f"cross_entropy: targets shape {targets.shape} does not match batch {logits.shape[0]}")
    vocab = logits.shape[1]
    active = targets != ignore_index
    if not active.any():
        raise ValueError("cross_entropy: every position is masked")
    act_targets = targets[active]
    if act_targets.min() < 0 or act_targets.max() >= vocab:
        raise IndexError(f"cross_entropy: target index out of range for vocab {vocab}")

    x = logits.data[active]
    m = x.max(axis=-1, keepdims=True)
    ex = np.exp(x - m)
    lse = m[:, 0] + np.log(ex.sum(axis=-1))
    picked = x[np.arange(x.shape[0]), act_targets]
    count = x.shape[0]
    loss = (lse - picked).sum() / count
    probs = ex / ex.sum(axis=-1, keepdims=True)

    def bwd(g):
        gl = np.zeros(logits.shape)
        rows = probs.copy()
        rows[np.arange(count), act_targets] -= 1.0
        gl[active] = rows * (float(g.reshape(())) / count)
        return (gl,)

    return record_op(np.asarray(loss), (logits,), bwd, "cross_entropy")
