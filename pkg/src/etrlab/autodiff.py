"""Reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Record` is an append-only tape. Tensors either live on a record
(they carry a node id and participate in ``backward``) or are free
constants (``node is None``); operations among constants stay off the
tape. Only scalar-vs-tensor broadcasting is allowed, so shape bugs fail
loudly instead of silently broadcasting.

Subgradient conventions are fixed so that every value path equals its
naive non-differentiable definition bit for bit:

* ``clip_gated`` passes gradient wherever ``lo <= x <= hi``; boundary
  points are treated as interior.
* ``min_pair`` routes the whole gradient to the smaller operand; exact
  ties go to the first operand.

Records are single-owner and not thread-safe. Identical inputs applied in
identical order produce bit-identical values and gradients.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = [
    "ContractViolation",
    "DomainError",
    "Record",
    "Tensor",
    "add",
    "subtract",
    "multiply",
    "divide",
    "negate",
    "exp",
    "log",
    "tanh",
    "matmul",
    "softmax_logprobs",
    "clip_gated",
    "min_pair",
    "sum_all",
    "mean_all",
    "take_rows",
    "gather_pairs",
    "reshape",
    "finite_diff_check",
]


class ContractViolation(ValueError):
    """An operation was invoked in violation of its documented contract."""


class DomainError(ValueError):
    """An input left the mathematical domain of the operation."""


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


class Tensor:
    """A float64 array, optionally attached to a node on a Record."""

    __slots__ = ("data", "record", "node")

    # Make ndarray binary ops defer to our reflected operators instead of
    # coercing the tensor into an object array.
    __array_ufunc__ = None

    def __init__(self, data, record: "Record | None" = None, node: int | None = None):
        self.data = _as_array(data)
        self.record = record
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.shape != ():
            raise ContractViolation("item() requires a scalar tensor")
        return float(self.data)

    def __repr__(self) -> str:
        tag = "const" if self.node is None else f"node {self.node}"
        return f"Tensor(shape={self.shape}, {tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        return multiply(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return divide(self, other)

    def __rtruediv__(self, other):
        return divide(other, self)

    def __neg__(self):
        return negate(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)

    def reshape(self, shape):
        return reshape(self, shape)


class Record:
    """Append-only computation tape.

    Node inputs always precede the node itself, so a reverse sweep over
    node ids is a valid topological backward order.
    """

    def __init__(self):
        self._ops: list[str] = []
        self._inputs: list[tuple[int | None, ...]] = []
        self._backs: list[Callable[[np.ndarray], tuple[np.ndarray | None, ...]] | None] = []

    def __len__(self) -> int:
        return len(self._ops)

    def leaf(self, data) -> Tensor:
        """Register a parameter array and return its tape-attached tensor."""
        nid = self._push("leaf", (), None)
        return Tensor(data, self, nid)

    def _push(self, op: str, inputs: tuple[int | None, ...], back) -> int:
        self._ops.append(op)
        self._inputs.append(inputs)
        self._backs.append(back)
        return len(self._ops) - 1

    def backward(self, root: Tensor) -> dict[int, np.ndarray]:
        """Accumulate gradients of a scalar root over the tape.

        Returns a map from node id to gradient array. Nodes unreachable
        from the root are absent. A constant root yields an empty map.
        """
        if root.data.shape != ():
            raise ContractViolation("backward root must be a scalar")
        if root.record is None:
            return {}
        if root.record is not self:
            raise ContractViolation("root does not belong to this record")
        grads: dict[int, np.ndarray] = {root.node: np.ones(())}
        for nid in range(root.node, -1, -1):
            g = grads.get(nid)
            if g is None:
                continue
            back = self._backs[nid]
            if back is None:
                continue
            for inp, contribution in zip(self._inputs[nid], back(g)):
                if inp is None or contribution is None:
                    continue
                held = grads.get(inp)
                grads[inp] = contribution if held is None else held + contribution
        return grads


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _joint_record(a: Tensor, b: Tensor) -> "Record | None":
    if a.record is not None and b.record is not None and a.record is not b.record:
        raise ContractViolation("operands live on different records")
    return a.record if a.record is not None else b.record


def _check_shapes(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.shape != b.shape and a.shape != () and b.shape != ():
        raise ContractViolation(
            f"{op}: shape mismatch {a.shape} vs {b.shape}; only scalar<->tensor broadcast is allowed"
        )


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.sum(g).reshape(shape)


def add(a, b) -> Tensor:
    ta, tb = _lift(a), _lift(b)
    rec = _joint_record(ta, tb)
    _check_shapes(ta.data, tb.data, "add")
    out = ta.data + tb.data
    if rec is None:
        return Tensor(out)
    sa, sb, na, nb = ta.shape, tb.shape, ta.node, tb.node

    def back(g):
        return (
            _reduce_to(g, sa) if na is not None else None,
            _reduce_to(g, sb) if nb is not None else None,
        )

    return Tensor(out, rec, rec._push("add", (na, nb), back))


def subtract(a, b) -> Tensor:
    ta, tb = _lift(a), _lift(b)
    rec = _joint_record(ta, tb)
    _check_shapes(ta.data, tb.data, "subtract")
    out = ta.data - tb.data
    if rec is None:
        return Tensor(out)
    sa, sb, na, nb = ta.shape, tb.shape, ta.node, tb.node

    def back(g):
        return (
            _reduce_to(g, sa) if na is not None else None,
            _reduce_to(-g, sb) if nb is not None else None,
        )

    return Tensor(out, rec, rec._push("subtract", (na, nb), back))


def multiply(a, b) -> Tensor:
    ta, tb = _lift(a), _lift(b)
    rec = _joint_record(ta, tb)
    _check_shapes(ta.data, tb.data, "multiply")
    out = ta.data * tb.data
    if rec is None:
        return Tensor(out)
    da, db = ta.data, tb.data
    sa, sb, na, nb = ta.shape, tb.shape, ta.node, tb.node

    def back(g):
        return (
            _reduce_to(g * db, sa) if na is not None else None,
            _reduce_to(g * da, sb) if nb is not None else None,
        )

    return Tensor(out, rec, rec._push("multiply", (na, nb), back))


def divide(a, b) -> Tensor:
    ta, tb = _lift(a), _lift(b)
    rec = _joint_record(ta, tb)
    _check_shapes(ta.data, tb.data, "divide")
    if np.any(tb.data == 0.0):
        raise DomainError("division by zero")
    out = ta.data / tb.data
    if rec is None:
        return Tensor(out)
    da, db = ta.data, tb.data
    sa, sb, na, nb = ta.shape, tb.shape, ta.node, tb.node

    def back(g):
        return (
            _reduce_to(g / db, sa) if na is not None else None,
            _reduce_to(-g * da / (db * db), sb) if nb is not None else None,
        )

    return Tensor(out, rec, rec._push("divide", (na, nb), back))


def negate(a) -> Tensor:
    ta = _lift(a)
    out = -ta.data
    if ta.record is None:
        return Tensor(out)

    def back(g):
        return (-g,)

    return Tensor(out, ta.record, ta.record._push("negate", (ta.node,), back))


def exp(a) -> Tensor:
    ta = _lift(a)
    out = np.exp(ta.data)
    if ta.record is None:
        return Tensor(out)

    def back(g):
        return (g * out,)

    return Tensor(out, ta.record, ta.record._push("exp", (ta.node,), back))


def log(a) -> Tensor:
    ta = _lift(a)
    if np.any(ta.data <= 0.0):
        raise DomainError("log of non-positive value")
    out = np.log(ta.data)
    if ta.record is None:
        return Tensor(out)
    data = ta.data

    def back(g):
        return (g / data,)

    return Tensor(out, ta.record, ta.record._push("log", (ta.node,), back))


def _tanh_backward(out: np.ndarray, g: np.ndarray) -> np.ndarray:
    return g * (1.0 - out * out)


def tanh(a) -> Tensor:
    ta = _lift(a)
    out = np.tanh(ta.data)
    if ta.record is None:
        return Tensor(out)

    def back(g):
        return (_tanh_backward(out, g),)

    return Tensor(out, ta.record, ta.record._push("tanh", (ta.node,), back))


def matmul(a, b) -> Tensor:
    ta, tb = _lift(a), _lift(b)
    rec = _joint_record(ta, tb)
    if ta.data.ndim != 2 or tb.data.ndim != 2:
        raise ContractViolation("matmul requires 2-D operands")
    if ta.data.shape[1] != tb.data.shape[0]:
        raise ContractViolation(
            f"matmul: inner dimensions differ ({ta.data.shape} @ {tb.data.shape})"
        )
    out = ta.data @ tb.data
    if rec is None:
        return Tensor(out)
    da, db, na, nb = ta.data, tb.data, ta.node, tb.node

    def back(g):
        return (
            g @ db.T if na is not None else None,
            da.T @ g if nb is not None else None,
        )

    return Tensor(out, rec, rec._push("matmul", (na, nb), back))


def softmax_logprobs(logits, temperature: float = 1.0) -> Tensor:
    """Numerically stable log-softmax over the last axis.

    Accepts a vector of logits or a matrix of row-wise logits. The output
    exponentials sum to one per row even for logits of magnitude 1e4.
    """
    if not temperature > 0.0:
        raise ContractViolation("temperature must be positive")
    ta = _lift(logits)
    if ta.data.ndim not in (1, 2):
        raise ContractViolation("softmax_logprobs expects a 1-D or 2-D tensor")
    scaled = ta.data / temperature
    peak = np.max(scaled, axis=-1, keepdims=True)
    shifted = scaled - peak
    out = shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))
    if ta.record is None:
        return Tensor(out)
    probs = np.exp(out)
    na = ta.node

    def back(g):
        return ((g - probs * np.sum(g, axis=-1, keepdims=True)) / temperature,)

    return Tensor(out, ta.record, ta.record._push("softmax_logprobs", (na,), back))


def clip_gated(x, lo, hi) -> Tensor:
    """Clamp x into [lo, hi]; gradient passes only where lo <= x <= hi.

    Bounds must be constants (scalars, arrays, or constant tensors); the
    value path equals ``np.clip`` exactly.
    """
    tx = _lift(x)
    tlo, thi = _lift(lo), _lift(hi)
    if tlo.node is not None or thi.node is not None:
        raise ContractViolation("clip bounds must be constants")
    _check_shapes(tx.data, tlo.data, "clip_gated")
    _check_shapes(tx.data, thi.data, "clip_gated")
    if np.any(tlo.data > thi.data):
        raise ContractViolation("clip_gated requires lo <= hi elementwise")
    out = np.clip(tx.data, tlo.data, thi.data)
    if tx.record is None:
        return Tensor(out)
    interior = (tx.data >= tlo.data) & (tx.data <= thi.data)

    def back(g):
        return (g * interior,)

    return Tensor(out, tx.record, tx.record._push("clip", (tx.node,), back))


def min_pair(a, b) -> Tensor:
    """Elementwise minimum; ties route the gradient to the first operand."""
    ta, tb = _lift(a), _lift(b)
    rec = _joint_record(ta, tb)
    if ta.shape != tb.shape:
        raise ContractViolation(f"min_pair: shape mismatch {ta.shape} vs {tb.shape}")
    first = ta.data <= tb.data
    out = np.where(first, ta.data, tb.data)
    if rec is None:
        return Tensor(out)
    na, nb = ta.node, tb.node

    def back(g):
        return (
            g * first if na is not None else None,
            g * ~first if nb is not None else None,
        )

    return Tensor(out, rec, rec._push("min", (na, nb), back))


def sum_all(a) -> Tensor:
    ta = _lift(a)
    out = np.sum(ta.data)
    if ta.record is None:
        return Tensor(out)
    shape = ta.shape

    def back(g):
        return (np.full(shape, g),)

    return Tensor(out, ta.record, ta.record._push("sum", (ta.node,), back))


def mean_all(a) -> Tensor:
    ta = _lift(a)
    if ta.size == 0:
        raise ContractViolation("mean of an empty tensor")
    out = np.mean(ta.data)
    if ta.record is None:
        return Tensor(out)
    shape, n = ta.shape, ta.size

    def back(g):
        return (np.full(shape, g / n),)

    return Tensor(out, ta.record, ta.record._push("mean", (ta.node,), back))


def take_rows(matrix, ids) -> Tensor:
    """Gather rows of a 2-D tensor; backward scatter-adds into the source."""
    tm = _lift(matrix)
    if tm.data.ndim != 2:
        raise ContractViolation("take_rows expects a 2-D tensor")
    idx = np.asarray(ids, dtype=np.int64)
    if idx.ndim != 1:
        raise ContractViolation("take_rows expects a 1-D index array")
    if idx.size and (idx.min() < 0 or idx.max() >= tm.data.shape[0]):
        raise ContractViolation("take_rows: row index out of range")
    out = tm.data[idx]
    if tm.record is None:
        return Tensor(out)
    src_shape = tm.shape

    def back(g):
        acc = np.zeros(src_shape)
        np.add.at(acc, idx, g)
        return (acc,)

    return Tensor(out, tm.record, tm.record._push("take_rows", (tm.node,), back))


def gather_pairs(matrix, rows, cols) -> Tensor:
    """Select matrix[rows[i], cols[i]] as a vector; backward scatter-adds."""
    tm = _lift(matrix)
    if tm.data.ndim != 2:
        raise ContractViolation("gather_pairs expects a 2-D tensor")
    r = np.asarray(rows, dtype=np.int64)
    c = np.asarray(cols, dtype=np.int64)
    if r.shape != c.shape or r.ndim != 1:
        raise ContractViolation("gather_pairs expects matching 1-D index arrays")
    nr, nc = tm.data.shape
    if r.size and (r.min() < 0 or r.max() >= nr or c.min() < 0 or c.max() >= nc):
        raise ContractViolation("gather_pairs: index out of range")
    out = tm.data[r, c]
    if tm.record is None:
        return Tensor(out)
    src_shape = tm.shape

    def back(g):
        acc = np.zeros(src_shape)
        np.add.at(acc, (r, c), g)
        return (acc,)

    return Tensor(out, tm.record, tm.record._push("gather_pairs", (tm.node,), back))


def reshape(a, shape) -> Tensor:
    ta = _lift(a)
    shape = tuple(int(s) for s in np.atleast_1d(shape))
    if int(np.prod(shape)) != ta.size:
        raise ContractViolation(f"reshape: cannot view {ta.shape} as {shape}")
    out = ta.data.reshape(shape)
    if ta.record is None:
        return Tensor(out)
    orig = ta.shape

    def back(g):
        return (g.reshape(orig),)

    return Tensor(out, ta.record, ta.record._push("reshape", (ta.node,), back))


def finite_diff_check(f, theta, step: float) -> float:
    """Compare an analytic gradient against central differences.

    ``f`` maps a parameter vector to ``(value, gradient)``. Returns the
    worst relative error ``|g_ad - g_fd| / max(1, |g_ad|, |g_fd|)`` over
    all coordinates.
    """
    if not step > 0.0:
        raise ContractViolation("finite difference step must be positive")
    theta = np.asarray(theta, dtype=np.float64)
    _, g_ad = f(theta)
    g_ad = np.asarray(g_ad, dtype=np.float64)
    if g_ad.shape != theta.shape:
        raise ContractViolation("gradient shape does not match parameter shape")
    worst = 0.0
    probe = np.zeros_like(theta)
    for i in range(theta.size):
        probe[i] = step
        up, _ = f(theta + probe)
        down, _ = f(theta - probe)
        probe[i] = 0.0
        g_fd = (up - down) / (2.0 * step)
        err = abs(g_ad[i] - g_fd) / max(1.0, abs(g_ad[i]), abs(g_fd))
        if err > worst:
            worst = err
    return worst
