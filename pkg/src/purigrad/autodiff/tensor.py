"""Tensors, tapes and reverse-mode differentiation.

Operations on tensors are recorded onto the active :class:`Tape` (set with
``with Tape() as tape:``) whenever one of their inputs requires a gradient.
Every vector-Jacobian product is itself written in terms of tensor
operations, so a backward pass run with ``record_second_order=True`` lands on
a tape and can be differentiated again.
"""

from __future__ import annotations

import math
import weakref
from contextvars import ContextVar
from typing import Callable, Optional, Sequence, Union

import numpy as np

from . import kernels
from .memory import MemoryMeter, current_meter


class AutodiffError(RuntimeError):
    pass


class ShapeError(AutodiffError, ValueError):
    pass


class NonFiniteError(AutodiffError, ValueError):
    pass


class UnsupportedSecondOrderError(AutodiffError):
    pass


_active_tape: ContextVar[Optional["Tape"]] = ContextVar("purigrad_tape", default=None)


class Node:
    __slots__ = ("op", "parents", "vjp", "out", "nbytes", "index", "tape")

    def __init__(self, op, parents, vjp, out, nbytes):
        self.op = op
        self.parents = parents
        self.vjp = vjp
        self.out = weakref.ref(out)
        self.nbytes = nbytes
        self.index = -1
        self.tape = None

    def __repr__(self):
        return f"Node({self.op}, #{self.index})"


class Tape:
    """Ordered record of primitive operations.

    Nodes are appended in execution order, so tape order is a topological
    order. ``release`` drops every node and returns its bytes to the meter.
    """

    def __init__(self, meter: Optional[MemoryMeter] = None):
        self.meter = meter if meter is not None else current_meter()
        self.nodes: list[Node] = []
        self._tokens = []

    def _append(self, node: Node) -> None:
        node.index = len(self.nodes)
        node.tape = weakref.ref(self)
        self.nodes.append(node)
        self.meter.allocate(node.nbytes)

    def __len__(self):
        return len(self.nodes)

    def __enter__(self):
        self._tokens.append(_active_tape.set(self))
        return self

    def __exit__(self, *exc):
        _active_tape.reset(self._tokens.pop())
        return False

    def release(self) -> None:
        for node in self.nodes:
            self.meter.free(node.nbytes)
            out = node.out()
            if out is not None and out._node is node:
                out._node = None
                out.requires_grad = False
            node.parents = ()
            node.vjp = None
            node.tape = None
        self.nodes = []

    def __del__(self):
        if self.nodes:
            self.release()

    def owns(self, t: "Tensor") -> bool:
        node = t._node
        return node is not None and node.tape is not None and node.tape() is self


class no_record:
    """Suspend recording; operations inside produce constants."""

    def __enter__(self):
        self._token = _active_tape.set(None)
        return self

    def __exit__(self, *exc):
        _active_tape.reset(self._token)
        return False


class _recording_on:
    def __init__(self, tape):
        self.tape = tape

    def __enter__(self):
        self._token = _active_tape.set(self.tape)

    def __exit__(self, *exc):
        _active_tape.reset(self._token)
        return False


def active_tape() -> Optional[Tape]:
    return _active_tape.get()


ArrayLike = Union[np.ndarray, float, int, Sequence]


class Tensor:
    """Dense float64 array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "_node", "__weakref__")
    __array_priority__ = 1000

    def __init__(self, data: ArrayLike, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.size == 0 or 0 in arr.shape:
            raise ShapeError(f"tensor dims must be positive, got {arr.shape}")
        # a finite sum proves every entry finite; only an overflowing sum needs the full scan
        if not math.isfinite(arr.sum()) and not np.isfinite(arr).all():
            raise NonFiniteError("tensor data contains NaN or Inf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._node: Optional[Node] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dims(self):
        return list(self.data.shape)

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got dims {self.dims}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out._node = None
        return out

    def requires_grad_(self, flag: bool = True) -> "Tensor":
        if self._node is not None and not flag:
            raise AutodiffError("cannot clear requires_grad on a recorded tensor; detach first")
        self.requires_grad = flag
        return self

    def __repr__(self):
        tag = f", op={self._node.op}" if self._node is not None else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # operators
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(op: str, data: np.ndarray, parents: tuple, vjp: Callable, saved_bytes: int = 0) -> Tensor:
    out = Tensor(data)
    tape = _active_tape.get()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        node = Node(op, parents, vjp, out, data.nbytes + saved_bytes)
        out._node = node
        tape._append(node)
    return out


def _opaque(op: str, data: np.ndarray, parents: tuple) -> Tensor:
    def vjp(g, needs):
        raise UnsupportedSecondOrderError(f"differentiating through '{op}' is not supported")

    return _make(op, data, parents, vjp)


def _check_same(op, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {list(a.shape)} vs {list(b.shape)}")


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {list(a.shape)} with {list(b.shape)}") from None


# ---------------------------------------------------------------- linear ops


def sum_to(x: Tensor, shape: tuple) -> Tensor:
    """Sum ``x`` down to ``shape`` (inverse of numpy broadcasting)."""
    shape = tuple(shape)
    if x.shape == shape:
        return x
    lead = x.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, n in enumerate(shape) if n == 1 and x.shape[i + lead] != 1
    )
    data = x.data.sum(axis=axes, keepdims=True)
    if lead:
        data = data.reshape(data.shape[lead:])
    src_shape = x.shape

    def vjp(g, needs):
        return (broadcast_to(g, src_shape),)

    return _make("sum_to", data.reshape(shape), (x,), vjp)


def broadcast_to(x: Tensor, shape: tuple) -> Tensor:
    shape = tuple(shape)
    if x.shape == shape:
        return x
    src_shape = x.shape

    def vjp(g, needs):
        return (sum_to(g, src_shape),)

    return _make("broadcast_to", np.broadcast_to(x.data, shape).copy(), (x,), vjp)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape

    def vjp(g, needs):
        return (
            sum_to(g, sa) if needs[0] else None,
            sum_to(g, sb) if needs[1] else None,
        )

    return _make("add", a.data + b.data, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape

    def vjp(g, needs):
        return (
            sum_to(g, sa) if needs[0] else None,
            sum_to(scale(g, -1.0), sb) if needs[1] else None,
        )

    return _make("sub", a.data - b.data, (a, b), vjp)


def mul(a, b) -> Tensor:
    """Elementwise (broadcasting) product."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    sa, sb = a.shape, b.shape

    def vjp(g, needs):
        return (
            sum_to(mul(g, b), sa) if needs[0] else None,
            sum_to(mul(g, a), sb) if needs[1] else None,
        )

    return _make("mul", a.data * b.data, (a, b), vjp)


def scale(a: Tensor, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)

    def vjp(g, needs):
        return (scale(g, c),)

    return _make("scale", a.data * c, (a,), vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 2 and b.ndim == 1:
        return reshape(matmul(a, reshape(b, (b.shape[0], 1))), (a.shape[0],))
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible dims {list(a.shape)} @ {list(b.shape)}")

    def vjp(g, needs):
        return (
            matmul(g, transpose(b)) if needs[0] else None,
            matmul(transpose(a), g) if needs[1] else None,
        )

    return _make("matmul", a.data @ b.data, (a, b), vjp)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose: expected rank 2, got dims {list(a.shape)}")

    def vjp(g, needs):
        return (transpose(g),)

    return _make("transpose", np.ascontiguousarray(a.data.T), (a,), vjp)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    src_shape = a.shape
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {list(src_shape)} as {list(shape)}") from None

    def vjp(g, needs):
        return (reshape(g, src_shape),)

    return _make("reshape", data, (a,), vjp)


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    src_shape = a.shape
    kept_shape = a.data.sum(axis=axis, keepdims=True).shape
    data = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))

    def vjp(g, needs):
        return (broadcast_to(reshape(g, kept_shape), src_shape),)

    return _make("sum", data, (a,), vjp)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[i] for i in axes]))
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``x @ w + b`` for a batch ``x`` of shape (n, k)."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError(
            f"affine: incompatible dims x={list(x.shape)} W={list(w.shape)} b={list(b.shape)}"
        )

    def vjp(g, needs):
        return (
            matmul(g, transpose(w)) if needs[0] else None,
            matmul(transpose(x), g) if needs[1] else None,
            tsum(g, axis=0) if needs[2] else None,
        )

    return _make("affine", x.data @ w.data + b.data, (x, w, b), vjp)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ax = axis % tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
            t.shape[i] != tensors[0].shape[i] for i in range(t.ndim) if i != ax
        ):
            raise ShapeError(
                f"concat: incompatible dims {[list(u.shape) for u in tensors]} on axis {axis}"
            )
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def vjp(g, needs):
        return tuple(
            slice_axis(g, ax, int(bounds[i]), int(bounds[i + 1])) if needs[i] else None
            for i in range(len(tensors))
        )

    return _make("concat", np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), vjp)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    src_shape = a.shape

    def vjp(g, needs):
        return (pad_axis(g, axis, start, src_shape),)

    return _make("slice", a.data[idx].copy(), (a,), vjp)


def pad_axis(a: Tensor, axis: int, start: int, shape: tuple) -> Tensor:
    """Embed ``a`` into zeros of ``shape`` at offset ``start`` along ``axis``."""
    idx = [slice(None)] * len(shape)
    idx[axis] = slice(start, start + a.shape[axis])
    idx = tuple(idx)
    data = np.zeros(shape)
    data[idx] = a.data

    def vjp(g, needs):
        return (slice_axis(g, axis, start, start + a.shape[axis]),)

    return _make("pad", data, (a,), vjp)


def gather(table: Tensor, index) -> Tensor:
    """Select ``table[index]`` along the first axis (e.g. schedule values by time index)."""
    table = as_tensor(table)
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < 0 or index.max() >= table.shape[0]):
        raise ShapeError(f"gather: index out of range for table dims {list(table.shape)}")
    n = table.shape[0]

    def vjp(g, needs):
        return (scatter_add(g, index, n),)

    return _make("gather", table.data[index], (table,), vjp)


def scatter_add(src: Tensor, index, n: int) -> Tensor:
    index = np.asarray(index, dtype=np.int64)
    data = np.zeros((n,) + src.shape[index.ndim:])
    np.add.at(data, index, src.data)

    def vjp(g, needs):
        return (gather(g, index),)

    return _make("scatter_add", data, (src,), vjp)


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; subgradient 1 on the closed interval, 0 outside."""
    x = as_tensor(x)
    mask = ((x.data >= lo) & (x.data <= hi)).astype(np.float64)

    def vjp(g, needs):
        return (mul(g, Tensor(mask)),)

    return _make("clamp", np.clip(x.data, lo, hi), (x,), vjp, saved_bytes=mask.nbytes)


# ------------------------------------------------------------ activations


def silu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    sig = kernels.sigmoid(x.data)

    def vjp(g, needs):
        return (mul(g, _silu_grad(x, sig)),)

    # the sigmoid is kept so the backward pass needs no second exp
    return _make("silu", x.data * sig, (x,), vjp, saved_bytes=sig.nbytes)


def _silu_grad(x: Tensor, sig: np.ndarray) -> Tensor:
    def vjp(g, needs):
        return (mul(g, _opaque("silu_grad2", kernels.silu_grad2_from(x.data, sig), (x,))),)

    return _make("silu_grad", kernels.silu_grad_from(x.data, sig), (x,), vjp)


def silu_grad(x: Tensor) -> Tensor:
    x = as_tensor(x)
    return _silu_grad(x, kernels.sigmoid(x.data))


def leaky_relu(x: Tensor, slope: float = 0.05) -> Tensor:
    x = as_tensor(x)

    def vjp(g, needs):
        return (mul(g, leaky_relu_grad(x, slope)),)

    return _make("leaky_relu", kernels.leaky_relu(x.data, slope), (x,), vjp)


def leaky_relu_grad(x: Tensor, slope: float = 0.05) -> Tensor:
    # piecewise constant: its derivative is zero wherever it exists
    def vjp(g, needs):
        return (Tensor(np.zeros(x.shape)),)

    return _make("leaky_relu_grad", kernels.leaky_relu_grad(x.data, slope), (x,), vjp)


def check_soft_leaky_params(a: float, e: float) -> None:
    if not (0.0 <= a < 1.0):
        raise ValueError(f"soft_leaky_relu: a must lie in [0, 1), got {a}")
    if not e > 0.0:
        raise ValueError(f"soft_leaky_relu: e must be positive, got {e}")


def soft_leaky_relu(x: Tensor, a: float = 0.49, e: float = 0.01) -> Tensor:
    """``(1-a)x + a*sqrt(x^2+e^2) - a*e``, a smooth leaky ReLU."""
    check_soft_leaky_params(a, e)
    x = as_tensor(x)

    def vjp(g, needs):
        return (mul(g, soft_leaky_relu_grad(x, a, e)),)

    return _make("soft_leaky_relu", kernels.soft_leaky_relu(x.data, a, e), (x,), vjp)


def soft_leaky_relu_grad(x: Tensor, a: float = 0.49, e: float = 0.01) -> Tensor:
    check_soft_leaky_params(a, e)

    def vjp(g, needs):
        d2 = _opaque("soft_leaky_relu_grad2", kernels.soft_leaky_relu_grad2(x.data, a, e), (x,))
        return (mul(g, d2),)

    return _make("soft_leaky_relu_grad", kernels.soft_leaky_relu_grad(x.data, a, e), (x,), vjp)


# ------------------------------------------------------------------- losses


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Per-row cross-entropy ``-log softmax(logits)[label]``; returns shape (n,)."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(
            f"softmax_cross_entropy: logits dims {list(logits.shape)} vs labels dims {list(labels.shape)}"
        )
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise ShapeError("softmax_cross_entropy: label out of range")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(labels.shape[0])
    loss = lse - z[rows, labels]
    probs = np.exp(z - lse[:, None])
    probs[rows, labels] -= 1.0

    def vjp(g, needs):
        # the softmax Jacobian is held as a constant; its own derivative is opaque
        delta = _opaque("softmax_cross_entropy_grad", probs, (logits,))
        return (mul(reshape(g, (g.shape[0], 1)), delta),)

    return _make("softmax_cross_entropy", loss, (logits,), vjp, saved_bytes=probs.nbytes)


# --------------------------------------------------------------- backward


def _relevant_nodes(tape: Tape, root: Tensor, input_ids: set) -> list:
    """Tensors between ``root`` and the requested inputs, in reverse tape order."""
    seen = {}
    stack = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        key = id(t)
        if expanded:
            node = t._node
            seen[key] = any(seen.get(id(p), False) for p in node.parents)
            continue
        if key in seen:
            continue
        if key in input_ids:
            seen[key] = True
            continue
        node = t._node
        if not tape.owns(t):
            seen[key] = False
            continue
        seen[key] = False  # provisional; overwritten after parents
        stack.append((t, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    # re-walk to collect tensor objects flagged relevant
    out = []
    stack = [root]
    visited = set()
    while stack:
        t = stack.pop()
        key = id(t)
        if key in visited or not seen.get(key, False) or key in input_ids:
            continue
        visited.add(key)
        out.append(t)
        stack.extend(t._node.parents)
    out.sort(key=lambda t: t._node.index, reverse=True)
    return out


def backward(
    tape: Tape,
    root: Tensor,
    inputs: Sequence[Tensor],
    seed: Optional[Union[Tensor, np.ndarray]] = None,
    record_second_order: bool = False,
) -> list:
    """Gradients of ``root`` (contracted with ``seed``) with respect to ``inputs``.

    Args:
        tape: the tape that recorded ``root``.
        root: output tensor; a scalar unless ``seed`` is given.
        inputs: tensors to differentiate with respect to.
        seed: cotangent with the shape of ``root``; defaults to 1 for scalars.
        record_second_order: record the backward arithmetic onto the active
            tape (or ``tape`` if none is active) so the returned gradients
            can be differentiated again.

    Returns:
        One gradient tensor per input (zeros where ``root`` does not depend on it).
    """
    input_list = list(inputs)
    input_ids = {id(x) for x in input_list}
    if id(root) not in input_ids and not tape.owns(root):
        raise AutodiffError("backward: root was not recorded on this tape")
    if seed is None:
        if root.size != 1:
            raise ShapeError(f"backward: non-scalar root dims {list(root.shape)} requires a seed")
        seed_t = Tensor(np.ones(root.shape))
    else:
        seed_t = as_tensor(seed)
        if seed_t.shape != root.shape:
            raise ShapeError(
                f"backward: seed dims {list(seed_t.shape)} do not match root dims {list(root.shape)}"
            )

    order = _relevant_nodes(tape, root, input_ids) if id(root) not in input_ids else []
    grads = {id(root): seed_t}
    rec_tape = (active_tape() or tape) if record_second_order else None
    with _recording_on(rec_tape):
        for t in order:
            g = grads.pop(id(t), None)
            if g is None:
                continue
            node = t._node
            needs = [p.requires_grad for p in node.parents]
            pgrads = node.vjp(g, needs)
            for p, gp in zip(node.parents, pgrads):
                if gp is None or not p.requires_grad:
                    continue
                k = id(p)
                grads[k] = add(grads[k], gp) if k in grads else gp
    return [grads.get(id(x), Tensor(np.zeros(x.shape))) for x in input_list]


def grad(tape: Tape, root: Tensor, x: Tensor, **kwargs) -> Tensor:
    return backward(tape, root, [x], **kwargs)[0]
