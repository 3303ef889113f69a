"""Reverse-mode automatic differentiation on dense 2-D float64 tensors.

The engine is deliberately small. A Tensor wraps a (rows, cols) float64
array; a Tape records operations in execution order; backward() replays
their adjoints in reverse. Gradient roots are declared explicitly with
Tape.watch(), everything else is treated as a constant. A tape is meant
to live for a single training step and is released afterwards.

Scalars are 1x1 tensors. Broadcasting is limited to row-vector bias
addition (add_bias) and per-row scaling (scale_rows); anything wider is
out of scope.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .errors import (
    ContractError,
    DegenerateInputError,
    DomainError,
    NumericError,
    ShapeError,
)

# Guard added to norm denominators so masked-out (all-zero) rows stay finite
# inside losses; the public row_cosine still rejects exact-zero rows.
NORM_EPS = 1e-12


class Tensor:
    """Dense 2-D float64 value with an optional gradient and tape linkage."""

    __slots__ = ("data", "grad", "tape", "node_id")

    def __init__(self, data):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, arr.size)
        elif arr.ndim != 2:
            raise ShapeError(f"tensors are 2-D, got array of shape {arr.shape}")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.tape: Optional["Tape"] = None
        self.node_id: Optional[int] = None

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def is_scalar(self) -> bool:
        return self.data.shape == (1, 1)

    def item(self) -> float:
        if not self.is_scalar():
            raise ContractError(f"item() requires a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def detach(self) -> "Tensor":
        """Copy of the value with no tape linkage and no gradient."""
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    # Operator sugar; the module-level functions do the real work.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, on_tape={self.tape is not None})"


class _Node:
    __slots__ = ("out", "inputs", "backward_fn")

    def __init__(self, out, inputs, backward_fn):
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn

    @property
    def is_leaf(self) -> bool:
        return self.backward_fn is None and not self.inputs


class Tape:
    """Ordered record of operations; inputs of a node always precede it."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def watch(self, t: Tensor) -> Tensor:
        """Mark ``t`` as a gradient root on this tape."""
        if t.tape is self:
            return t
        if t.tape is not None:
            raise ContractError("tensor is already recorded on another tape")
        t.tape = self
        t.node_id = len(self.nodes)
        self.nodes.append(_Node(t, (), None))
        return t

    def release(self) -> None:
        """Drop tape linkage from every recorded tensor; grads survive."""
        for node in self.nodes:
            node.out.tape = None
            node.out.node_id = None
        self.nodes.clear()


def _tape_of(*tensors: Tensor) -> Optional[Tape]:
    tape = None
    for t in tensors:
        if t.tape is not None:
            if tape is None:
                tape = t.tape
            elif tape is not t.tape:
                raise ContractError("operands are recorded on different tapes")
    return tape


def _record(tape, out_data, inputs, backward_fn) -> Tensor:
    out = Tensor(out_data)
    if tape is not None:
        out.tape = tape
        out.node_id = len(tape.nodes)
        tape.nodes.append(_Node(out, inputs, backward_fn))
    return out


def _require_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op} requires equal shapes, got {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# core operations
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.cols != b.rows:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        return g @ bd.T, ad.T @ g

    return _record(_tape_of(a, b), ad @ bd, (a, b), back)


def transpose(x: Tensor) -> Tensor:
    def back(g):
        return (g.T,)

    return _record(_tape_of(x), x.data.T.copy(), (x,), back)


def add(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "add")

    def back(g):
        return g, g

    return _record(_tape_of(a, b), a.data + b.data, (a, b), back)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "sub")

    def back(g):
        return g, -g

    return _record(_tape_of(a, b), a.data - b.data, (a, b), back)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "mul")
    ad, bd = a.data, b.data

    def back(g):
        return g * bd, g * ad

    return _record(_tape_of(a, b), ad * bd, (a, b), back)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a 1 x d row vector to every row of an n x d tensor."""
    if b.shape != (1, x.cols):
        raise ShapeError(f"add_bias needs a (1, {x.cols}) bias, got {b.shape}")

    def back(g):
        return g, g.sum(axis=0, keepdims=True)

    return _record(_tape_of(x, b), x.data + b.data, (x, b), back)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)

    def back(g):
        return (g * c,)

    return _record(_tape_of(x), x.data * c, (x,), back)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def back(g):
        return (g * mask,)

    return _record(_tape_of(x), np.where(mask, x.data, 0.0), (x,), back)


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)

    def back(g):
        return (g * (1.0 - t * t),)

    return _record(_tape_of(x), t, (x,), back)


def exp(x: Tensor) -> Tensor:
    e = np.exp(x.data)

    def back(g):
        return (g * e,)

    return _record(_tape_of(x), e, (x,), back)


def log(x: Tensor) -> Tensor:
    bad = np.argwhere(x.data <= 0)
    if bad.size:
        i, j = bad[0]
        raise DomainError(
            f"log of non-positive entry at ({i}, {j}): {x.data[i, j]!r}"
        )
    xd = x.data

    def back(g):
        return (g / xd,)

    return _record(_tape_of(x), np.log(xd), (x,), back)


def abs_val(x: Tensor) -> Tensor:
    s = np.sign(x.data)

    def back(g):
        return (g * s,)

    return _record(_tape_of(x), np.abs(x.data), (x,), back)


def softmax_rows(x: Tensor, temperature: float = 1.0) -> Tensor:
    """Row-wise softmax of x / temperature, computed with max subtraction."""
    if temperature <= 0:
        raise ContractError(f"softmax temperature must be positive, got {temperature}")
    if not np.all(np.isfinite(x.data)):
        raise NumericError("non-finite input to softmax_rows")
    t = float(temperature)
    xs = x.data / t
    p = np.exp(xs - xs.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)

    def back(g):
        # Jacobian p_j (1{j=k} - p_k) per row, divided by the temperature.
        return (p * (g - (g * p).sum(axis=1, keepdims=True)) / t,)

    return _record(_tape_of(x), p, (x,), back)


def log_softmax_rows(x: Tensor, temperature: float = 1.0) -> Tensor:
    if temperature <= 0:
        raise ContractError(f"softmax temperature must be positive, got {temperature}")
    if not np.all(np.isfinite(x.data)):
        raise NumericError("non-finite input to log_softmax_rows")
    t = float(temperature)
    xs = x.data / t
    shifted = xs - xs.max(axis=1, keepdims=True)
    lsm = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    p = np.exp(lsm)

    def back(g):
        return ((g - p * g.sum(axis=1, keepdims=True)) / t,)

    return _record(_tape_of(x), lsm, (x,), back)


def entropy_rows(p: Tensor) -> Tensor:
    """Per-row Shannon entropy (natural log) of nonnegative entries, 0*log0 = 0."""
    if np.any(p.data < 0):
        bad = np.argwhere(p.data < 0)[0]
        raise DomainError(f"entropy_rows got a negative entry at {tuple(bad)}")
    pd = p.data
    pos = pd > 0
    logp = np.where(pos, np.log(np.where(pos, pd, 1.0)), 0.0)
    h = -(pd * logp).sum(axis=1, keepdims=True)

    def back(g):
        # dH/dp = -(log p + 1); zero entries use the 0 subgradient.
        return (g * np.where(pos, -(logp + 1.0), 0.0),)

    return _record(_tape_of(p), h, (p,), back)


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape

    def back(g):
        return (np.full(shape, g[0, 0]),)

    return _record(_tape_of(x), [[x.data.sum()]], (x,), back)


def mean_all(x: Tensor) -> Tensor:
    shape = x.shape
    size = x.data.size

    def back(g):
        return (np.full(shape, g[0, 0] / size),)

    return _record(_tape_of(x), [[x.data.mean()]], (x,), back)


def l2_norm_sq(x: Tensor) -> Tensor:
    """Sum of squared entries, as a scalar tensor."""
    xd = x.data

    def back(g):
        return (2.0 * xd * g[0, 0],)

    return _record(_tape_of(x), [[(xd * xd).sum()]], (x,), back)


def row_sum(x: Tensor) -> Tensor:
    cols = x.cols

    def back(g):
        return (np.repeat(g, cols, axis=1),)

    return _record(_tape_of(x), x.data.sum(axis=1, keepdims=True), (x,), back)


def row_cosine(x: Tensor, y: Tensor) -> Tensor:
    """Per-row cosine similarity in [-1, 1].

    Rejects exact-zero rows; loss code that must tolerate masked-out rows
    goes through normalize_rows instead, which shares the same NORM_EPS
    denominator guard.
    """
    _require_same_shape(x, y, "row_cosine")
    xd, yd = x.data, y.data
    nx = np.sqrt((xd * xd).sum(axis=1, keepdims=True))
    ny = np.sqrt((yd * yd).sum(axis=1, keepdims=True))
    for name, n in (("x", nx), ("y", ny)):
        zero = np.argwhere(n[:, 0] == 0.0)
        if zero.size:
            raise DegenerateInputError(
                f"row_cosine: zero-norm row {int(zero[0, 0])} in {name}"
            )
    dx, dy = nx + NORM_EPS, ny + NORM_EPS
    s = (xd * yd).sum(axis=1, keepdims=True)
    c = s / (dx * dy)

    def back(g):
        gx = g * (yd / (dx * dy) - (s / (dx * dx * dy)) * (xd / nx))
        gy = g * (xd / (dx * dy) - (s / (dy * dy * dx)) * (yd / ny))
        return gx, gy

    return _record(_tape_of(x, y), c, (x, y), back)


def normalize_rows(x: Tensor) -> Tensor:
    """Rows scaled to unit norm with a NORM_EPS-guarded denominator.

    Zero rows map to zero rows and receive a zero gradient there.
    """
    xd = x.data
    n = np.sqrt((xd * xd).sum(axis=1, keepdims=True))
    d = n + NORM_EPS
    y = xd / d
    safe_n = np.where(n > 0, n, 1.0)

    def back(g):
        dot = (g * xd).sum(axis=1, keepdims=True)
        return (g / d - xd * np.where(n > 0, dot / (safe_n * d * d), 0.0),)

    return _record(_tape_of(x), y, (x,), back)


def scale_rows(x: Tensor, col: Tensor) -> Tensor:
    """Multiply each row of x by the matching entry of an n x 1 column."""
    if col.shape != (x.rows, 1):
        raise ShapeError(f"scale_rows needs a ({x.rows}, 1) column, got {col.shape}")
    xd, cd = x.data, col.data

    def back(g):
        return g * cd, (g * xd).sum(axis=1, keepdims=True)

    return _record(_tape_of(x, col), xd * cd, (x, col), back)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ContractError("concat_cols needs at least one tensor")
    rows = parts[0].rows
    for p in parts:
        if p.rows != rows:
            raise ShapeError(
                f"concat_cols row mismatch: {p.shape} vs {parts[0].shape}"
            )
    widths = [p.cols for p in parts]
    offsets = np.cumsum([0] + widths)

    def back(g):
        return tuple(g[:, offsets[i]:offsets[i + 1]] for i in range(len(widths)))

    out = np.hstack([p.data for p in parts])
    return _record(_tape_of(*parts), out, tuple(parts), back)


# ---------------------------------------------------------------------------
# backward pass and gradient utilities
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(tensor) into .grad for every tensor on the tape.

    Repeated calls without zero_grad accumulate. Watched leaves with no
    path to the loss receive explicit zeros.
    """
    if loss.tape is None:
        raise ContractError("backward: loss is not recorded on a tape")
    if not loss.is_scalar():
        raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
    tape = loss.tape
    buf: dict[int, np.ndarray] = {loss.node_id: np.ones((1, 1))}
    for nid in range(loss.node_id, -1, -1):
        g = buf.pop(nid, None)
        if g is None:
            continue
        node = tape.nodes[nid]
        out = node.out
        out.grad = g.copy() if out.grad is None else out.grad + g
        if node.backward_fn is None:
            continue
        grads = node.backward_fn(g)
        for t, gi in zip(node.inputs, grads):
            if gi is None or t.tape is not tape:
                continue
            held = buf.get(t.node_id)
            buf[t.node_id] = gi if held is None else held + gi
    for node in tape.nodes:
        if node.is_leaf and node.out.grad is None:
            node.out.grad = np.zeros_like(node.out.data)


def grad_of_scalar_wrt(x: Tensor, loss: Tensor, retain: bool = True) -> Tensor:
    """Return d(loss)/dx as a fresh detached tensor.

    The sweep uses its own buffers, so existing .grad values and the tape
    itself are untouched; ``retain`` documents that the tape stays usable
    for further recording (it always does in this implementation, the
    flag exists for call-site clarity). Gradients obtained this way are
    stop-gradient values: callers that need a differentiable-through term
    compose it from on-tape operations instead.
    """
    if loss.tape is None:
        raise ContractError("grad_of_scalar_wrt: loss is not recorded on a tape")
    if x.tape is not loss.tape:
        raise ContractError("grad_of_scalar_wrt: x is not on the loss's tape")
    if not loss.is_scalar():
        raise ContractError(f"grad_of_scalar_wrt needs a scalar loss, got {loss.shape}")
    tape = loss.tape
    buf: dict[int, np.ndarray] = {loss.node_id: np.ones((1, 1))}
    for nid in range(loss.node_id, x.node_id, -1):
        g = buf.pop(nid, None)
        if g is None:
            continue
        node = tape.nodes[nid]
        if node.backward_fn is None:
            continue
        grads = node.backward_fn(g)
        for t, gi in zip(node.inputs, grads):
            if gi is None or t.tape is not tape:
                continue
            held = buf.get(t.node_id)
            buf[t.node_id] = gi if held is None else held + gi
    g = buf.get(x.node_id)
    return Tensor(np.zeros_like(x.data) if g is None else g.copy())


def grad_check(
    f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5
) -> float:
    """Max relative error between backward() and central finite differences.

    The relative error uses max(|analytic|, |numeric|, 1e-8) per entry as
    the denominator. ``f`` must be deterministic and scalar-valued.
    """
    if not (1e-7 <= eps <= 1e-3):
        raise ContractError(f"grad_check eps must lie in [1e-7, 1e-3], got {eps}")
    tape = Tape()
    xw = Tensor(x.data.copy())
    tape.watch(xw)
    loss = f(xw)
    if not loss.is_scalar():
        raise ContractError("grad_check requires a scalar-valued function")
    backward(loss)
    analytic = xw.grad.copy()
    tape.release()

    base = x.data.copy()
    numeric = np.zeros_like(base)
    for i in range(base.shape[0]):
        for j in range(base.shape[1]):
            hi = base.copy()
            hi[i, j] += eps
            lo = base.copy()
            lo[i, j] -= eps
            numeric[i, j] = (f(Tensor(hi)).item() - f(Tensor(lo)).item()) / (2 * eps)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
