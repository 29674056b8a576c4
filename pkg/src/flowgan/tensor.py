"""Dense float64 tensors with a reverse-mode differentiation tape.

Operations executed while a :class:`Tape` is active are appended to it when at
least one input is tracked. Backward rules are themselves written with the
same primitives, so ``Tape.gradient(..., create_graph=True)`` records the
gradient computation and it can be differentiated again (needed for the
critic gradient penalty).

Broadcasting is limited to leading-dimension expansion (``[n, d] + [d]``) and
scalars; anything else goes through :func:`broadcast` explicitly.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "DomainError",
    "NonFiniteError",
    "tensor",
    "parameter",
    "no_record",
    "apply_primitive",
    "backward",
    "grad",
    "finite_diff_gradient",
    "PRIMITIVES",
]


class ShapeError(ValueError):
    """Input shapes do not conform to the primitive's contract."""


class DomainError(ValueError):
    """Input lies outside the primitive's mathematical domain."""


class NonFiniteError(FloatingPointError):
    """A primitive produced NaN or Inf."""

    def __init__(self, op: str, message: str | None = None):
        self.op = op
        super().__init__(message or f"non-finite value produced by {op!r}")


class _State(threading.local):
    tape: "Tape | None" = None


_local = _State()


def _current_tape() -> "Tape | None":
    return _local.tape


class Node:
    __slots__ = ("op", "inputs", "out", "rule", "saved", "index")

    def __init__(self, op, inputs, out, rule, saved, index):
        self.op = op
        self.inputs = inputs
        self.out = out
        self.rule = rule
        self.saved = saved
        self.index = index


class Tape:
    """Append-only record of primitive applications.

    Use as a context manager; tapes nest, and the innermost one records.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._outer: list[Tape | None] = []

    def __enter__(self) -> "Tape":
        self._outer.append(_current_tape())
        _local.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _local.tape = self._outer.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def _record(self, op, inputs, out, rule, saved) -> Node:
        node = Node(op, inputs, out, rule, saved, len(self.nodes))
        self.nodes.append(node)
        return node

    def gradient(
        self,
        output: "Tensor",
        sources: Sequence["Tensor"],
        create_graph: bool = False,
    ) -> list["Tensor"]:
        """Return d(output)/d(source) for each source, zeros where unreached."""
        if output.data.size != 1:
            raise ShapeError(f"gradient needs a scalar output, got shape {output.shape}")
        node = output.node
        grads: dict[int, Tensor] = {}
        if node is not None and node.index < len(self.nodes) and self.nodes[node.index] is node:
            grads = self._backprop(node.index, output, create_graph)
        elif node is not None:
            raise ValueError("output was not recorded on this tape")
        out = []
        for s in sources:
            g = grads.get(id(s))
            if g is None:
                g = Tensor(np.zeros(s.shape))
            out.append(g)
        return out

    def _backprop(self, last: int, output: "Tensor", create_graph: bool) -> dict[int, "Tensor"]:
        grads: dict[int, Tensor] = {id(output): Tensor(np.ones(output.shape))}
        # keep ids stable: the tensors referenced by the tape stay alive here
        prev = _current_tape()
        _local.tape = self if create_graph else None
        try:
            nodes = self.nodes
            for i in range(last, -1, -1):
                node = nodes[i]
                g = grads.pop(id(node.out), None)
                if g is None:
                    continue
                in_grads = node.rule(g, node)
                for t, gt in zip(node.inputs, in_grads):
                    if gt is None or not t.requires_grad:
                        continue
                    key = id(t)
                    acc = grads.get(key)
                    grads[key] = gt if acc is None else add(acc, gt)
                # sources that are intermediate outputs need their gradient kept
                grads[id(node.out)] = g
        finally:
            _local.tape = prev
        return grads


class Tensor:
    """n-dimensional float64 array, optionally tracked by the active tape."""

    __slots__ = ("data", "requires_grad", "node", "name", "__weakref__")

    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim and 0 in arr.shape:
            raise ShapeError("dimension extents must be positive")
        self.data = arr
        self.requires_grad = requires_grad
        self.node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def tape_id(self) -> int | None:
        return None if self.node is None else self.node.index

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{tag})"

    def __len__(self) -> int:
        return self.data.shape[0]

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: sub(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __truediv__ = lambda self, other: div(self, other)
    __rtruediv__ = lambda self, other: div(other, self)
    __matmul__ = lambda self, other: matmul(self, other)
    __rmatmul__ = lambda self, other: matmul(other, self)
    __neg__ = lambda self: neg(self)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)

    def tanh(self) -> "Tensor":
        return tanh(self)

    def square(self) -> "Tensor":
        return square(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


@contextlib.contextmanager
def no_record():
    """Suspend recording on the active tape."""
    prev = _current_tape()
    _local.tape = None
    try:
        yield
    finally:
        _local.tape = prev


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def parameter(data, name: str | None = None) -> Tensor:
    """A differentiable leaf."""
    return Tensor(data, requires_grad=True, name=name)


def _wrap(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


_isfinite = np.isfinite
_add_reduce = np.add.reduce


def _emit(data: np.ndarray, op: str, inputs: tuple, rule: Callable, saved=None, check=True) -> Tensor:
    # a finite sum implies finite entries; only fall back to the full scan otherwise
    if check and not _isfinite(_add_reduce(data, axis=None)) and not _isfinite(data).all():
        raise NonFiniteError(op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = False
    out.node = None
    out.name = None
    tape = _local.tape
    if tape is not None:
        for t in inputs:
            if t.requires_grad:
                out.requires_grad = True
                out.node = tape._record(op, inputs, out, rule, saved)
                break
    return out


# -- elementwise binary ----------------------------------------------------


def _binary_shape(op: str, a: np.ndarray, b: np.ndarray) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb or not sa or not sb:
        return
    if len(sa) > len(sb):
        if sa[len(sa) - len(sb):] == sb:
            return
    elif sb[len(sb) - len(sa):] == sa:
        return
    raise ShapeError(f"{op}: shapes {sa} and {sb} do not conform")


def _unbroadcast(g: Tensor, shape: tuple) -> Tensor:
    if g.shape == shape:
        return g
    if not shape:
        return sum_(g)
    lead = g.ndim - len(shape)
    return sum_(g, tuple(range(lead)))


def _add_rule(g, node):
    a, b = node.inputs
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _binary_shape("add", a.data, b.data)
    return _emit(a.data + b.data, "add", (a, b), _add_rule)


def _sub_rule(g, node):
    a, b = node.inputs
    return _unbroadcast(g, a.shape), _unbroadcast(neg(g), b.shape)


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _binary_shape("sub", a.data, b.data)
    return _emit(a.data - b.data, "sub", (a, b), _sub_rule)


def _mul_rule(g, node):
    a, b = node.inputs
    ga = _unbroadcast(mul(g, b), a.shape) if a.requires_grad else None
    gb = _unbroadcast(mul(g, a), b.shape) if b.requires_grad else None
    return ga, gb


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _binary_shape("mul", a.data, b.data)
    return _emit(a.data * b.data, "mul", (a, b), _mul_rule)


def _div_rule(g, node):
    a, b = node.inputs
    ga = _unbroadcast(div(g, b), a.shape) if a.requires_grad else None
    gb = _unbroadcast(neg(div(mul(g, node.out), b)), b.shape) if b.requires_grad else None
    return ga, gb


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _binary_shape("div", a.data, b.data)
    if not np.all(b.data):
        raise DomainError("div: division by zero")
    return _emit(a.data / b.data, "div", (a, b), _div_rule)


def _matmul_rule(g, node):
    a, b = node.inputs
    ga = matmul(g, transpose(b)) if a.requires_grad else None
    gb = matmul(transpose(a), g) if b.requires_grad else None
    return ga, gb


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    return _emit(a.data @ b.data, "matmul", (a, b), _matmul_rule)


# -- elementwise unary -----------------------------------------------------


def _neg_rule(g, node):
    return (neg(g),)


def neg(a) -> Tensor:
    a = _wrap(a)
    return _emit(-a.data, "neg", (a,), _neg_rule, check=False)


def _exp_rule(g, node):
    return (mul(g, node.out),)


def exp(a) -> Tensor:
    a = _wrap(a)
    with np.errstate(over="ignore"):
        data = np.exp(a.data)
    return _emit(data, "exp", (a,), _exp_rule)


def _log_rule(g, node):
    return (div(g, node.inputs[0]),)


def log(a) -> Tensor:
    a = _wrap(a)
    if not (a.data > 0).all():
        raise DomainError("log of non-positive input")
    return _emit(np.log(a.data), "log", (a,), _log_rule)


def _tanh_rule(g, node):
    y = node.out
    return (mul(g, sub(1.0, mul(y, y))),)


def tanh(a) -> Tensor:
    a = _wrap(a)
    return _emit(np.tanh(a.data), "tanh", (a,), _tanh_rule, check=False)


def _relu_rule(g, node):
    return (mul(g, Tensor(node.saved)),)


def relu(a) -> Tensor:
    a = _wrap(a)
    mask = (a.data > 0).astype(np.float64)
    return _emit(a.data * mask, "relu", (a,), _relu_rule, saved=mask, check=False)


def _sigmoid_value(x: np.ndarray) -> np.ndarray:
    # branch-free stable logistic
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _sigmoid_rule(g, node):
    y = node.out
    return (mul(g, mul(y, sub(1.0, y))),)


def sigmoid(a) -> Tensor:
    a = _wrap(a)
    return _emit(_sigmoid_value(a.data), "sigmoid", (a,), _sigmoid_rule, check=False)


def _softplus_rule(g, node):
    return (mul(g, sigmoid(node.inputs[0])),)


def softplus(a) -> Tensor:
    """log(1 + exp(a)), evaluated without overflow."""
    a = _wrap(a)
    return _emit(np.logaddexp(0.0, a.data), "softplus", (a,), _softplus_rule)


def _square_rule(g, node):
    return (mul(g, mul(2.0, node.inputs[0])),)


def square(a) -> Tensor:
    a = _wrap(a)
    return _emit(a.data * a.data, "square", (a,), _square_rule)


def _sqrt_rule(g, node):
    return (div(mul(0.5, g), node.out),)


def sqrt(a) -> Tensor:
    a = _wrap(a)
    if not (a.data > 0).all():
        raise DomainError("sqrt of non-positive input")
    return _emit(np.sqrt(a.data), "sqrt", (a,), _sqrt_rule)


def _clip_rule(g, node):
    return (mul(g, Tensor(node.saved)),)


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes only strictly inside the interval."""
    a = _wrap(a)
    mask = ((a.data > lo) & (a.data < hi)).astype(np.float64)
    return _emit(np.clip(a.data, lo, hi), "clip", (a,), _clip_rule, saved=mask, check=False)


# -- reductions and structure ----------------------------------------------


def _norm_axis(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for ax in axis:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for {ndim}-d tensor")
        out.append(ax % ndim)
    return tuple(sorted(out))


def _kept_shape(shape: tuple, axes: tuple) -> tuple:
    return tuple(1 if i in axes else s for i, s in enumerate(shape))


def _sum_rule(g, node):
    (a,) = node.inputs
    axes = node.saved
    g = reshape(g, _kept_shape(a.shape, axes))
    return (broadcast(g, a.shape),)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    axes = _norm_axis(axis, a.ndim)
    data = np.sum(a.data, axis=axes, keepdims=keepdims)
    return _emit(np.asarray(data, dtype=np.float64), "sum", (a,), _sum_rule, saved=axes)


def _mean_rule(g, node):
    (a,) = node.inputs
    axes = node.saved
    n = 1
    for ax in axes:
        n *= a.shape[ax]
    g = reshape(g, _kept_shape(a.shape, axes))
    return (mul(broadcast(g, a.shape), 1.0 / n),)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    axes = _norm_axis(axis, a.ndim)
    data = np.mean(a.data, axis=axes, keepdims=keepdims)
    return _emit(np.asarray(data, dtype=np.float64), "mean", (a,), _mean_rule, saved=axes)


def _broadcast_rule(g, node):
    (a,) = node.inputs
    shape = a.shape
    lead = g.ndim - len(shape)
    axes = list(range(lead))
    axes += [lead + i for i, s in enumerate(shape) if s == 1 and g.shape[lead + i] != 1]
    if not axes:
        return (g,)
    return (reshape(sum_(g, tuple(axes)), shape),)


def broadcast(a, shape) -> Tensor:
    """Expand leading dimensions and unit extents (numpy semantics)."""
    a = _wrap(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    try:
        data = np.broadcast_to(a.data, shape)
    except ValueError as err:
        raise ShapeError(f"broadcast: cannot expand {a.shape} to {shape}") from err
    return _emit(data, "broadcast", (a,), _broadcast_rule, check=False)


def _reshape_rule(g, node):
    return (reshape(g, node.inputs[0].shape),)


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    shape = tuple(shape)
    if int(np.prod(shape)) != a.size or any(s <= 0 for s in shape):
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    return _emit(a.data.reshape(shape), "reshape", (a,), _reshape_rule, check=False)


def _transpose_rule(g, node):
    return (transpose(g),)


def transpose(a) -> Tensor:
    a = _wrap(a)
    if a.ndim != 2:
        raise ShapeError("transpose expects a 2-d tensor")
    return _emit(a.data.T, "transpose", (a,), _transpose_rule, check=False)


def _slice_rule(g, node):
    (a,) = node.inputs
    start, stop, axis = node.saved
    parts = []
    if start > 0:
        parts.append(Tensor(np.zeros(_replace(a.shape, axis, start))))
    parts.append(g)
    if stop < a.shape[axis]:
        parts.append(Tensor(np.zeros(_replace(a.shape, axis, a.shape[axis] - stop))))
    if len(parts) == 1:
        return (g,)
    return (concat(parts, axis),)


def _replace(shape: tuple, axis: int, value: int) -> tuple:
    return shape[:axis] + (value,) + shape[axis + 1:]


def slice_(a, start: int, stop: int, axis: int = -1) -> Tensor:
    a = _wrap(a)
    axis = axis % a.ndim
    n = a.shape[axis]
    if not 0 <= start < stop <= n:
        raise ShapeError(f"slice [{start}:{stop}] invalid for extent {n}")
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, stop)
    return _emit(a.data[tuple(index)], "slice", (a,), _slice_rule, saved=(start, stop, axis), check=False)


def _concat_rule(g, node):
    offsets, axis = node.saved
    return tuple(slice_(g, offsets[i], offsets[i + 1], axis) for i in range(len(node.inputs)))


def concat(parts: Iterable, axis: int = -1) -> Tensor:
    parts = tuple(_wrap(p) for p in parts)
    if not parts:
        raise ShapeError("concat of nothing")
    axis = axis % parts[0].ndim
    ref = parts[0].shape
    offsets = [0]
    for p in parts:
        if p.ndim != len(ref) or _replace(p.shape, axis, 0) != _replace(ref, axis, 0):
            raise ShapeError(f"concat: shapes {ref} and {p.shape} do not conform")
        offsets.append(offsets[-1] + p.shape[axis])
    data = np.concatenate([p.data for p in parts], axis=axis)
    return _emit(data, "concat", parts, _concat_rule, saved=(offsets, axis), check=False)


PRIMITIVES: dict[str, Callable] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "matmul": matmul,
    "exp": exp,
    "log": log,
    "tanh": tanh,
    "relu": relu,
    "sigmoid": sigmoid,
    "neg": neg,
    "sum": sum_,
    "mean": mean,
    "square": square,
    "sqrt": sqrt,
    "broadcast": broadcast,
    "reshape": reshape,
    "slice": slice_,
    "concat": lambda *parts, axis=-1: concat(parts, axis),
    "transpose": transpose,
    "softplus": softplus,
    "clip": clip,
}


def apply_primitive(op_id: str, *inputs, **kwargs) -> Tensor:
    """Dispatch a primitive by name."""
    try:
        fn = PRIMITIVES[op_id]
    except KeyError:
        raise ValueError(f"unknown primitive {op_id!r}") from None
    return fn(*inputs, **kwargs)


def backward(tape: Tape, output: Tensor) -> dict[Tensor, Tensor]:
    """Gradient of a scalar output for every differentiable leaf on the tape.

    Leaves that the output does not depend on map to zero tensors.
    """
    leaves: dict[int, Tensor] = {}
    for node in tape.nodes:
        for t in node.inputs:
            if t.requires_grad and t.node is None:
                leaves.setdefault(id(t), t)
    sources = list(leaves.values())
    grads = tape.gradient(output, sources)
    return {s: g for s, g in zip(sources, grads)}


def grad(output: Tensor, sources: Sequence[Tensor], create_graph: bool = False) -> list[Tensor]:
    """Gradient through the tape that recorded ``output``.

    Must be called while that tape is the active one.
    """
    tape = _current_tape()
    if tape is None:
        raise RuntimeError("grad() needs an active tape")
    return tape.gradient(output, sources, create_graph=create_graph)


def finite_diff_gradient(f: Callable[[np.ndarray], float], theta0, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function of a parameter array."""
    if step <= 0:
        raise ValueError("step must be positive")
    theta = np.array(theta0, dtype=np.float64)
    out = np.empty_like(theta)
    flat = theta.reshape(-1)
    gflat = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = float(f(theta.copy()))
        flat[i] = orig - step
        fm = float(f(theta.copy()))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"function not finite near coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * step)
    return out
