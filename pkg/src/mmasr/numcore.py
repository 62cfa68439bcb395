"""Dense tensors with tape-based reverse-mode differentiation.

Operations record onto the innermost active :class:`Tape`.  Outside a tape
nothing is recorded, which is how inference runs::

    with Tape() as tape:
        loss = (x @ w).sum()
    tape.backward(loss)

Broadcasting is deliberately narrow: operands of elementwise ops must have
identical shapes, except that a vector may be added/multiplied across the
rows of a matrix and plain Python scalars are accepted as constants.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, ShapeError

_local = threading.local()
_default_dtype = np.float64


def default_dtype():
    return _default_dtype


def set_default_dtype(dtype) -> None:
    """Select the float precision used when tensors are built from raw data."""
    global _default_dtype
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {dtype!r}; use float32 or float64")
    _default_dtype = dtype


@contextmanager
def precision(dtype):
    previous = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else _default_dtype
        self.data = np.array(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self.name = name

    @classmethod
    def _wrap(cls, data: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = requires_grad
        t.grad = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self):
        return tsum(self)

    @property
    def T(self):
        return transpose(self)


def parameter(data, name: str | None = None, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=True, dtype=dtype, name=name)


@dataclass
class Node:
    op: str
    inputs: tuple
    output: Tensor
    backward: Callable


class Tape:
    """Ordered record of differentiable operations from one forward pass."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._outputs: set[int] = set()

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "tapes", None)
        if stack is None:
            stack = _local.tapes = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.tapes.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, op: str, inputs: tuple, output: Tensor, backward: Callable) -> None:
        self.nodes.append(Node(op, inputs, output, backward))
        self._outputs.add(id(output))

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

        Gradients are added to whatever ``.grad`` already holds, so calling
        this twice without zeroing doubles them.
        """
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not self.nodes:
            raise ContractError("backward called on an empty tape")
        if id(loss) not in self._outputs:
            raise ContractError("loss was not produced on this tape")
        grads = {id(loss): np.ones_like(loss.data)}
        outputs = self._outputs
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            in_grads = node.backward(g)
            for inp, ig in zip(node.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in outputs:
                    prev = grads.get(key)
                    grads[key] = ig if prev is None else prev + ig
                else:
                    if inp.grad is None:
                        inp.grad = np.zeros_like(inp.data)
                    inp.grad += ig


def current_tape() -> Tape | None:
    stack = getattr(_local, "tapes", None)
    return stack[-1] if stack else None


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Run backward on ``tape`` (default: the active tape)."""
    tape = tape or current_tape()
    if tape is None:
        raise ContractError("no tape available; wrap the forward pass in `with Tape()`")
    tape.backward(loss)


def make_output(op: str, data: np.ndarray, inputs: tuple, backward_fn: Callable) -> Tensor:
    """Wrap ``data`` as the result of ``op`` and record it if a tape is active.

    ``backward_fn(g)`` must return one gradient (or None) per input.  This is
    also the extension point for fused operations defined outside this module.
    """
    needs = any(t.requires_grad for t in inputs)
    out = Tensor._wrap(data, needs)
    if needs:
        tape = current_tape()
        if tape is not None:
            tape.record(op, inputs, out, backward_fn)
    return out


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else _default_dtype
    return Tensor._wrap(np.asarray(x, dtype=dtype), False)


def _broadcast_kind(a: np.ndarray, b: np.ndarray, op: str) -> str:
    if a.shape == b.shape:
        return "same"
    if b.ndim == 0:
        return "b_scalar"
    if a.ndim == 0:
        return "a_scalar"
    if a.ndim == 2 and b.ndim == 1 and a.shape[1] == b.shape[0]:
        return "b_row"
    if b.ndim == 2 and a.ndim == 1 and b.shape[1] == a.shape[0]:
        return "a_row"
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _reducer(kind: str, side: str) -> Callable:
    if kind == "same":
        return lambda g: g
    if kind == f"{side}_scalar":
        return lambda g: np.asarray(g.sum())
    if kind == f"{side}_row":
        return lambda g: g.sum(axis=0)
    return lambda g: g


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    kind = _broadcast_kind(a.data, b.data, "add")
    ra, rb = _reducer(kind, "a"), _reducer(kind, "b")
    return make_output("add", a.data + b.data, (a, b), lambda g: (ra(g), rb(g)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    kind = _broadcast_kind(a.data, b.data, "sub")
    ra, rb = _reducer(kind, "a"), _reducer(kind, "b")
    return make_output("sub", a.data - b.data, (a, b), lambda g: (ra(g), -rb(g)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    kind = _broadcast_kind(a.data, b.data, "mul")
    ra, rb = _reducer(kind, "a"), _reducer(kind, "b")
    ad, bd = a.data, b.data

    def bw(g):
        return (ra(g * bd) if a.requires_grad else None, rb(g * ad) if b.requires_grad else None)

    return make_output("mul", ad * bd, (a, b), bw)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return make_output("tanh", y, (x,), lambda g: (g * (1.0 - y * y),))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    return make_output("sigmoid", y, (x,), lambda g: (g * y * (1.0 - y),))


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "tanh": tanh, "sigmoid": sigmoid}


def elementwise(op: str, *args) -> Tensor:
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}; expected one of {sorted(_ELEMENTWISE)}") from None
    return fn(*args)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; ``a`` may carry leading batch axes when ``b`` is 2-D."""
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    if ad.ndim == 0 or bd.ndim == 0 or bd.ndim > 2 or ad.shape[-1] != bd.shape[0]:
        raise ShapeError(f"matmul: cannot multiply shapes {ad.shape} and {bd.shape}")
    if ad.ndim > 2:
        # stacked rows: one 2-D product is far faster than numpy's batched path
        lead = ad.shape[:-1]
        a2 = np.ascontiguousarray(ad).reshape(-1, ad.shape[-1])
        out = (a2 @ bd).reshape(lead + bd.shape[1:])

        def bw(g):
            g2 = np.ascontiguousarray(g).reshape(a2.shape[0], -1) if bd.ndim == 2 else g.reshape(-1)
            ga = gb = None
            if a.requires_grad:
                ga = (g2 @ bd.T if bd.ndim == 2 else np.multiply.outer(g2, bd)).reshape(ad.shape)
            if b.requires_grad:
                gb = a2.T @ g2
            return ga, gb

        return make_output("matmul", out, (a, b), bw)

    out = ad @ bd

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            if bd.ndim == 1:
                ga = np.multiply.outer(g, bd) if ad.ndim > 1 else g * bd
            else:
                ga = g @ bd.T
        if b.requires_grad:
            if ad.ndim == 1 and bd.ndim == 1:
                gb = g * ad
            elif ad.ndim == 1:
                gb = np.outer(ad, g)
            elif bd.ndim == 1:
                gb = ad.T @ g
            else:
                gb = ad.T @ g
        return ga, gb

    return make_output("matmul", out, (a, b), bw)


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {x.shape}")
    return make_output("transpose", x.data.T, (x,), lambda g: (g.T,))


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {src} as {tuple(shape)}") from None
    return make_output("reshape", out, (x,), lambda g: (g.reshape(src),))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.ndim == 0 or x.shape[axis] == 0:
        raise ShapeError(f"softmax over an empty axis (shape {x.shape})")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make_output("softmax", y, (x,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    nd = len(ref)
    ax = axis % nd if nd else 0
    for t in tensors[1:]:
        if t.ndim != nd or any(t.shape[i] != ref[i] for i in range(nd) if i != ax):
            raise ShapeError(f"concat along axis {axis}: shapes {ref} and {t.shape} differ off-axis")
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return make_output("concat", out, tuple(tensors), bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeError(f"stack: shapes differ {sorted(shapes)}")
    out = np.stack([t.data for t in tensors], axis=axis)

    def bw(g):
        return tuple(np.moveaxis(g, axis, 0))

    return make_output("stack", out, tuple(tensors), bw)


def _has_array_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def getitem(x: Tensor, index) -> Tensor:
    out = x.data[index]
    fancy = _has_array_index(index)

    def bw(g):
        full = np.zeros_like(x.data)
        if fancy:
            np.add.at(full, index, g)
        else:
            full[index] += g
        return (full,)

    return make_output("getitem", np.array(out, copy=True), (x,), bw)


def take_rows(table: Tensor, ids) -> Tensor:
    """Row lookup (embedding); repeated ids accumulate gradient."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"row id out of range for table with {table.shape[0]} rows")

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        return (full,)

    return make_output("take_rows", table.data[ids], (table,), bw)


def tsum(x: Tensor) -> Tensor:
    shape = x.shape
    return make_output("sum", np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(x: Tensor) -> Tensor:
    n = max(x.size, 1)
    shape = x.shape
    return make_output("mean", np.asarray(x.data.sum() / n), (x,), lambda g: (np.full(shape, g / n, dtype=x.dtype),))


def cross_entropy(logits: Tensor, targets, weights=None) -> Tensor:
    """Summed negative log-likelihood of ``targets`` under row-wise softmax.

    ``weights`` (same length as targets) scales each row's term; zero weight
    excludes a row entirely (used for padding).
    """
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects [N x V] logits, got {logits.shape}")
    targets = np.asarray(targets, dtype=np.int64)
    n = logits.shape[0]
    if targets.shape != (n,):
        raise ShapeError(f"cross_entropy: {n} rows but targets of shape {targets.shape}")
    w = np.ones(n, dtype=logits.dtype) if weights is None else np.asarray(weights, dtype=logits.dtype)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logz
    rows = np.arange(n)
    loss = -(w * logp[rows, targets]).sum()

    def bw(g):
        p = np.exp(logp)
        p[rows, targets] -= 1.0
        return (g * w[:, None] * p,)

    return make_output("cross_entropy", np.asarray(loss, dtype=logits.dtype), (logits,), bw)


@dataclass
class GradCheckReport:
    max_rel_error: float
    max_abs_error: float
    n_checked: int
    tol: float
    worst: tuple | None = None

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def grad_check(f: Callable, x, eps: float = 1e-5, tol: float = 1e-4, floor: float = 1e-6) -> GradCheckReport:
    """Compare tape gradients of scalar ``f(x)`` with central differences.

    ``x`` is a Tensor or a sequence of Tensors; ``f`` receives it unchanged.
    Relative error per element is ``|a - n| / max(|a|, |n|, floor)``.
    """
    tensors = [x] if isinstance(x, Tensor) else list(x)
    first, second = f(x), f(x)
    if first.size != 1:
        raise ContractError(f"grad_check needs a scalar function, got shape {first.shape}")
    if not np.array_equal(first.data, second.data):
        raise ContractError("grad_check: f is not deterministic (two evaluations differ)")

    saved = [t.grad for t in tensors]
    flags = [t.requires_grad for t in tensors]
    for t in tensors:
        t.requires_grad = True
        t.grad = np.zeros_like(t.data)
    try:
        with Tape() as tape:
            y = f(x)
        if len(tape):
            tape.backward(y)
        analytic = [t.grad.copy() for t in tensors]
    finally:
        for t, g, flag in zip(tensors, saved, flags):
            t.grad, t.requires_grad = g, flag

    worst_rel, worst_abs, worst, count = 0.0, 0.0, None, 0
    for ti, (t, a) in enumerate(zip(tensors, analytic)):
        flat = t.data.reshape(-1)
        af = a.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + eps
            fp = float(f(x).data)
            flat[k] = orig - eps
            fm = float(f(x).data)
            flat[k] = orig
            num = (fp - fm) / (2.0 * eps)
            abs_err = abs(af[k] - num)
            rel = abs_err / max(abs(af[k]), abs(num), floor)
            count += 1
            worst_abs = max(worst_abs, abs_err)
            if rel > worst_rel:
                worst_rel, worst = rel, (ti, k, float(af[k]), num)
    return GradCheckReport(worst_rel, worst_abs, count, tol, worst)
