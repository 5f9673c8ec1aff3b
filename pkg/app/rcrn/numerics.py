"""Dense tensors with tape-based reverse-mode differentiation.

Every public operation takes `Tensor` values and returns a new `Tensor`. When a
`Graph` is active (``with Graph() as g:``) and an input requires a gradient, the
operation is appended to the tape so that `backward` can walk it in reverse.
The active graph lives in a context variable, so each worker thread records
into its own graph.
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass
from typing import Callable, Dict, List, Literal, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from app.rcrn.errors import ContractError, DimensionError, NumericalError

Precision = Literal["single", "double"]
DTYPES: Dict[str, type] = {"single": np.float32, "double": np.float64}

Scalar = Union[int, float]
Forward = Callable[..., np.ndarray]
Vjp = Callable[..., Tuple[Optional[np.ndarray], ...]]

_ACTIVE: contextvars.ContextVar[Optional["Graph"]] = contextvars.ContextVar("rcrn_graph", default=None)


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr)
    arr.flags.writeable = False
    return arr


class Tensor:
    """Immutable n-dimensional array of single or double precision scalars."""

    __slots__ = ("_data", "requires_grad", "name")

    def __init__(
        self,
        data,
        precision: Optional[Precision] = None,
        requires_grad: bool = False,
        name: Optional[str] = None,
    ):
        if precision is not None:
            arr = np.array(data, dtype=DTYPES[precision])
        else:
            arr = np.array(data)
            if arr.dtype not in (np.float32, np.float64):
                arr = arr.astype(np.float64)
        self._data = _frozen(arr)
        self.requires_grad = bool(requires_grad)
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        t = Tensor.__new__(Tensor)
        t._data = _frozen(arr)
        t.requires_grad = requires_grad
        t.name = None
        return t

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def shape(self) -> Tuple[int, ...]:
        return self._data.shape

    @property
    def ndim(self) -> int:
        return self._data.ndim

    @property
    def dtype(self):
        return self._data.dtype

    @property
    def precision(self) -> Precision:
        return "single" if self._data.dtype == np.float32 else "double"

    def item(self) -> float:
        return float(self._data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, precision={self.precision}{label})"


class Parameter(Tensor):
    """A trainable leaf tensor. Its value is replaced wholesale, never mutated."""

    __slots__ = ()

    def __init__(self, data, precision: Precision = "double", name: Optional[str] = None, trainable: bool = True):
        super().__init__(data, precision=precision, requires_grad=trainable, name=name)

    def assign(self, value: np.ndarray) -> None:
        arr = np.array(value, dtype=self._data.dtype)
        if arr.shape != self._data.shape:
            raise DimensionError(f"assign to {self.name}: {arr.shape} does not match {self._data.shape}")
        self._data = _frozen(arr)


def constant(data, precision: Precision = "double") -> Tensor:
    return Tensor(data, precision=precision)


def zeros(shape: Sequence[int], precision: Precision = "double") -> Tensor:
    return Tensor._wrap(np.zeros(tuple(shape), dtype=DTYPES[precision]), False)


@dataclass(frozen=True)
class Node:
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    forward: Forward
    vjp: Vjp


class Graph:
    """Define-by-run tape. Nodes are stored in execution order, which is topological."""

    def __init__(self) -> None:
        self.nodes: List[Node] = []
        self._token: Optional[contextvars.Token] = None

    def __enter__(self) -> "Graph":
        self._token = _ACTIVE.set(self)
        return self

    def __exit__(self, *exc) -> bool:
        if self._token is not None:
            _ACTIVE.reset(self._token)
            self._token = None
        return False

    @property
    def outputs(self) -> List[Tensor]:
        return [n.output for n in self.nodes]

    def replay(self) -> List[np.ndarray]:
        """Recompute every node from its (recomputed) inputs, in tape order."""
        values: Dict[int, np.ndarray] = {}
        out: List[np.ndarray] = []
        for node in self.nodes:
            args = [values.get(id(t), t.data) for t in node.inputs]
            v = node.forward(*args)
            values[id(node.output)] = v
            out.append(v)
        return out


def apply(op: str, inputs: Sequence[Tensor], forward: Forward, vjp: Vjp) -> Tensor:
    """Run a primitive and record it on the active graph.

    `forward(*arrays)` returns the output array; `vjp(g, out, *arrays)` returns one
    gradient (or None) per input.
    """
    dtypes = {t.dtype for t in inputs}
    if len(dtypes) > 1:
        raise ContractError(f"{op}: mixed precision inputs {sorted(str(d) for d in dtypes)}")
    out = forward(*[t.data for t in inputs])
    if not np.isfinite(out).all():
        raise NumericalError(f"{op} produced non-finite values")
    requires = any(t.requires_grad for t in inputs)
    result = Tensor._wrap(out, requires)
    graph = _ACTIVE.get()
    if graph is not None and requires:
        graph.nodes.append(Node(op, tuple(inputs), result, forward, vjp))
    return result


# -- shape helpers -----------------------------------------------------------


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape {a.shape} does not match {b.shape}")


def _axis(ndim: int, axis: int) -> int:
    ax = axis + ndim if axis < 0 else axis
    if not 0 <= ax < ndim:
        raise DimensionError(f"axis {axis} out of range for rank {ndim}")
    return ax


# -- linear algebra ----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: {a.shape} x {b.shape}")
    return apply("matmul", (a, b), np.matmul, lambda g, out, x, y: (g @ y.T, x.T @ g))


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise DimensionError(f"transpose: expected a matrix, got {a.shape}")
    return apply(
        "transpose",
        (a,),
        lambda x: np.ascontiguousarray(x.T),
        lambda g, out, x: (np.ascontiguousarray(g.T),),
    )


# -- element-wise ------------------------------------------------------------


def stable_sigmoid(x: np.ndarray) -> np.ndarray:
    # Contiguous input keeps every caller on the same exp kernel.
    x = np.asarray(x, order="C")
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def add(a: Tensor, b: Union[Tensor, Scalar]) -> Tensor:
    if not isinstance(b, Tensor):
        s = float(b)
        return apply("add_scalar", (a,), lambda x: x + s, lambda g, out, x: (g,))
    _same_shape("add", a, b)
    return apply("add", (a, b), np.add, lambda g, out, x, y: (g, g))


def sub(a: Tensor, b: Union[Tensor, Scalar]) -> Tensor:
    if not isinstance(b, Tensor):
        return add(a, -float(b))
    _same_shape("sub", a, b)
    return apply("sub", (a, b), np.subtract, lambda g, out, x, y: (g, -g))


def mul(a: Tensor, b: Union[Tensor, Scalar]) -> Tensor:
    if not isinstance(b, Tensor):
        return scale(a, b)
    _same_shape("mul", a, b)
    return apply("mul", (a, b), np.multiply, lambda g, out, x, y: (g * y, g * x))


def scale(a: Tensor, s: Scalar) -> Tensor:
    s = float(s)
    return apply("scale", (a,), lambda x: x * s, lambda g, out, x: (g * s,))


def sigmoid(a: Tensor) -> Tensor:
    return apply("sigmoid", (a,), stable_sigmoid, lambda g, out, x: (g * out * (1.0 - out),))


def tanh(a: Tensor) -> Tensor:
    return apply("tanh", (a,), np.tanh, lambda g, out, x: (g * (1.0 - out * out),))


def one_minus(a: Tensor) -> Tensor:
    return apply("one_minus", (a,), lambda x: 1.0 - x, lambda g, out, x: (-g,))


def relu(a: Tensor) -> Tensor:
    return apply("relu", (a,), lambda x: np.maximum(x, 0.0), lambda g, out, x: (g * (x > 0),))


_UNARY = {"sigmoid": sigmoid, "tanh": tanh, "one_minus": one_minus, "relu": relu}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(op: str, *inputs: Union[Tensor, Scalar]) -> Tensor:
    if op in _UNARY:
        if len(inputs) != 1:
            raise ContractError(f"{op} takes one operand, got {len(inputs)}")
        return _UNARY[op](inputs[0])
    if op in _BINARY:
        if len(inputs) != 2:
            raise ContractError(f"{op} takes two operands, got {len(inputs)}")
        a, b = inputs
        if not isinstance(a, Tensor):
            a, b = b, a
        if op == "sub" and not isinstance(inputs[0], Tensor):
            return add(scale(a, -1.0), float(inputs[0]))
        return _BINARY[op](a, b)
    raise ContractError(f"unknown element-wise op {op!r}")


def add_row(x: Tensor, b: Tensor) -> Tensor:
    """Add a vector to every row of `x` along its last axis (bias add)."""
    if b.ndim != 1 or x.shape[-1:] != b.shape:
        raise DimensionError(f"add_row: {x.shape} + {b.shape}")
    lead = tuple(range(x.ndim - 1))
    return apply("add_row", (x, b), np.add, lambda g, out, xa, ba: (g, g.sum(axis=lead)))


def apply_mask(x: Tensor, mask: np.ndarray) -> Tensor:
    """Multiply `x` by a constant 0/1 mask shaped like `x` without its last axis."""
    if mask.shape != x.shape[:-1]:
        raise DimensionError(f"apply_mask: mask {mask.shape} does not fit {x.shape}")
    m = mask.astype(x.dtype)[..., None]
    return apply("apply_mask", (x,), lambda xa: xa * m, lambda g, out, xa: (g * m,))


# -- structure ---------------------------------------------------------------


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not parts:
        raise DimensionError("concat: no parts")
    if len(parts) == 1:
        return parts[0]
    ax = _axis(parts[0].ndim, axis)
    ref = parts[0].shape
    for p in parts[1:]:
        if p.ndim != len(ref) or p.shape[:ax] + p.shape[ax + 1 :] != ref[:ax] + ref[ax + 1 :]:
            raise DimensionError(f"concat: {ref} and {p.shape} differ off axis {axis}")
    bounds = np.cumsum([p.shape[ax] for p in parts])[:-1]

    def vjp(g, out, *xs):
        return tuple(np.ascontiguousarray(s) for s in np.split(g, bounds, axis=ax))

    return apply("concat", tuple(parts), lambda *xs: np.concatenate(xs, axis=ax), vjp)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    ax = _axis(x.ndim, axis)
    if not 0 <= start < stop <= x.shape[ax]:
        raise DimensionError(f"slice [{start}:{stop}] out of range for extent {x.shape[ax]}")
    index = (slice(None),) * ax + (slice(start, stop),)

    def vjp(g, out, xa):
        full = np.zeros_like(xa)
        full[index] = g
        return (full,)

    return apply("slice", (x,), lambda xa: np.ascontiguousarray(xa[index]), vjp)


def stack(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise DimensionError("stack: no parts")
    for p in parts[1:]:
        _same_shape("stack", parts[0], p)
    ax = _axis(parts[0].ndim + 1, axis)

    def vjp(g, out, *xs):
        return tuple(np.take(g, i, axis=ax) for i in range(len(xs)))

    return apply("stack", tuple(parts), lambda *xs: np.stack(xs, axis=ax), vjp)


def index(x: Tensor, axis: int, i: int) -> Tensor:
    """Select position `i` along `axis`, dropping that axis."""
    ax = _axis(x.ndim, axis)
    if not 0 <= i < x.shape[ax]:
        raise DimensionError(f"index {i} out of range for extent {x.shape[ax]}")

    def vjp(g, out, xa):
        full = np.zeros_like(xa)
        sel = (slice(None),) * ax + (i,)
        full[sel] = g
        return (full,)

    return apply("index", (x,), lambda xa: np.take(xa, i, axis=ax), vjp)


def sum_all(x: Tensor) -> Tensor:
    return apply("sum", (x,), lambda xa: np.asarray(xa.sum()), lambda g, out, xa: (np.full_like(xa, g),))


def embed(table: Tensor, ids: np.ndarray, pad_id: int = 0) -> Tensor:
    """Row lookup `table[ids]`; the pad row never receives a gradient."""
    if table.ndim != 2:
        raise DimensionError(f"embed: table must be a matrix, got {table.shape}")
    ids = np.asarray(ids, dtype=np.int64)

    def vjp(g, out, ta):
        gt = np.zeros_like(ta)
        np.add.at(gt, ids, g)
        gt[pad_id] = 0.0
        return (gt,)

    return apply("embed", (table,), lambda ta: ta[ids], vjp)


# -- differentiation ---------------------------------------------------------

GradientMap = Dict[str, Tensor]


def backward(graph: Graph, loss: Tensor, params: Mapping[str, Tensor]) -> GradientMap:
    """Reverse traversal of `graph` from a scalar `loss`.

    Returns one gradient per entry of `params`; parameters the loss does not
    reach get zeros.
    """
    if loss.shape != ():
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        parts = node.vjp(g, node.output.data, *[t.data for t in node.inputs])
        for t, gi in zip(node.inputs, parts):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            grads[key] = grads[key] + gi if key in grads else gi
    out: GradientMap = {}
    for name, p in params.items():
        g = grads.get(id(p))
        out[name] = Tensor._wrap(np.array(g if g is not None else np.zeros_like(p.data), dtype=p.dtype), False)
    return out


def finite_diff_check(
    loss_fn: Callable[[], Tensor],
    param: Parameter,
    eps: float = 1e-5,
    analytic: Optional[np.ndarray] = None,
) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |central difference|).

    `loss_fn` rebuilds the loss from the current parameter values. When `analytic`
    is omitted it is obtained by recording `loss_fn` once and running `backward`.
    """
    if param.dtype != np.float64:
        raise ContractError("finite differences need double precision")
    if analytic is None:
        with Graph() as g:
            loss = loss_fn()
        analytic = backward(g, loss, {"p": param})["p"].data
    base = np.array(param.data)
    worst = 0.0
    try:
        for idx in np.ndindex(base.shape):
            bumped = base.copy()
            bumped[idx] += eps
            param.assign(bumped)
            plus = loss_fn().item()
            bumped[idx] = base[idx] - eps
            param.assign(bumped)
            minus = loss_fn().item()
            numeric = (plus - minus) / (2.0 * eps)
            worst = max(worst, abs(float(analytic[idx]) - numeric) / max(1.0, abs(numeric)))
    finally:
        param.assign(base)
    return worst
