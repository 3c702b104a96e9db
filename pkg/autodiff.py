"""
Minimal dense-tensor value type with reverse-mode differentiation.

Tensors are immutable float64 arrays. Every primitive records a graph edge when
any operand requires gradients; `backward` walks the graph once and frees it.
"""
import itertools
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from errors import DomainError, GraphError, ShapeError

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]
BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]

_node_ids = itertools.count(1)


class Tensor:
    """An immutable n-dimensional value participating in a differentiation graph."""

    __slots__ = ("values", "requires_grad", "node_id", "_parents", "_backward", "_consumed")

    def __init__(self, values: ArrayLike, requires_grad: bool = False,
                 _parents: Tuple["Tensor", ...] = (), _backward: Optional[BackwardFn] = None):
        """
        Initialize a tensor.

        Args:
            values: Numeric data; copied and frozen as float64
            requires_grad: Whether gradients flow into this tensor
        """
        if isinstance(values, Tensor):
            values = values.values
        arr = np.array(values, dtype=np.float64)
        if any(extent < 1 for extent in arr.shape):
            raise ShapeError(f"tensor extents must be positive, got shape {arr.shape}")
        arr.setflags(write=False)
        self.values = arr
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_node_ids)
        self._parents = _parents
        self._backward = _backward
        self._consumed = False

    @classmethod
    def parameter(cls, values: ArrayLike) -> "Tensor":
        """Leaf tensor that receives gradients."""
        return cls(values, requires_grad=True)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.values.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        """Writable copy of the values."""
        return self.values.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.values)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, node_id={self.node_id})"

    def __add__(self, other: ArrayLike) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: ArrayLike) -> "Tensor":
        return add(as_tensor(other), self)

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return sub(as_tensor(other), self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        if isinstance(other, (int, float)):
            return scale_by_constant(self, float(other))
        return mul_elementwise(self, other)

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        return self.__mul__(other)

    def __truediv__(self, other: ArrayLike) -> "Tensor":
        if isinstance(other, (int, float)):
            return scale_by_constant(self, 1.0 / float(other))
        return divide(self, other)

    def __neg__(self) -> "Tensor":
        return scale_by_constant(self, -1.0)

    def __matmul__(self, other: ArrayLike) -> "Tensor":
        return matmul(self, other)


class GradientMap:
    """Mapping from parameter node_id to the gradient of a loss (same shape)."""

    def __init__(self, gradients: Dict[int, Tensor]):
        self._gradients = gradients

    def _key(self, key: Union[Tensor, int]) -> int:
        return key.node_id if isinstance(key, Tensor) else int(key)

    def __getitem__(self, key: Union[Tensor, int]) -> Tensor:
        return self._gradients[self._key(key)]

    def __contains__(self, key: Union[Tensor, int]) -> bool:
        return self._key(key) in self._gradients

    def __len__(self) -> int:
        return len(self._gradients)

    def get(self, key: Union[Tensor, int], default: Optional[Tensor] = None) -> Optional[Tensor]:
        return self._gradients.get(self._key(key), default)

    def items(self):
        return self._gradients.items()

    def for_params(self, params: Sequence[Tensor]) -> List[Tensor]:
        """Gradients in parameter order; unreachable parameters get zeros."""
        return [self.get(p) or Tensor(np.zeros(p.shape)) for p in params]

    def flat(self, params: Sequence[Tensor]) -> np.ndarray:
        """Concatenate the gradients of `params` into one flat vector."""
        return np.concatenate([g.values.reshape(-1) for g in self.for_params(params)])


def as_tensor(value: ArrayLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _record(values: np.ndarray, parents: Tuple[Tensor, ...], backward_fn: BackwardFn,
            kind: str) -> Tensor:
    if not np.all(np.isfinite(values)):
        raise DomainError(f"{kind} produced non-finite values")
    if any(p.requires_grad for p in parents):
        return Tensor(values, requires_grad=True, _parents=parents, _backward=backward_fn)
    return Tensor(values)


def _check_same_shape(kind: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} do not match")


def _bias_kind(kind: str, a: Tensor, b: Tensor) -> str:
    """Shape rule shared by add/sub: same shape, scalar, or row bias."""
    if a.shape == b.shape:
        return "same"
    if b.ndim == 0:
        return "scalar"
    if a.ndim == 2 and b.ndim == 1 and b.shape[0] == a.shape[1]:
        return "row"
    raise ShapeError(f"{kind}: cannot combine shapes {a.shape} and {b.shape}")


def _reduce_to(grad: np.ndarray, rule: str) -> np.ndarray:
    if rule == "scalar":
        return np.asarray(grad.sum())
    if rule == "row":
        return grad.sum(axis=0)
    return grad


# ========== Primitives ==========

def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    av, bv = a.values, b.values

    def backward(g):
        if av.ndim == 2 and bv.ndim == 2:
            return g @ bv.T, av.T @ g
        if av.ndim == 2:
            return np.outer(g, bv), av.T @ g
        if bv.ndim == 2:
            return bv @ g, np.outer(av, g)
        return g * bv, g * av

    return _record(av @ bv, (a, b), backward, "matmul")


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    rule = _bias_kind("add", a, b)
    return _record(a.values + b.values, (a, b),
                   lambda g: (g, _reduce_to(g, rule)), "add")


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    rule = _bias_kind("sub", a, b)
    return _record(a.values - b.values, (a, b),
                   lambda g: (g, -_reduce_to(g, rule)), "sub")


def mul_elementwise(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    rule = "scalar" if b.ndim == 0 and a.ndim > 0 else "same"
    if rule == "same":
        _check_same_shape("mul_elementwise", a, b)
    av, bv = a.values, b.values
    return _record(av * bv, (a, b),
                   lambda g: (g * bv, _reduce_to(g * av, rule)), "mul_elementwise")


def divide(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    rule = "scalar" if b.ndim == 0 and a.ndim > 0 else "same"
    if rule == "same":
        _check_same_shape("divide", a, b)
    if np.any(b.values == 0):
        raise DomainError("divide: zero denominator")
    av, bv = a.values, b.values
    return _record(av / bv, (a, b),
                   lambda g: (g / bv, _reduce_to(-g * av / (bv * bv), rule)), "divide")


def scale_by_constant(a: ArrayLike, constant: float) -> Tensor:
    a = as_tensor(a)
    c = float(constant)
    return _record(a.values * c, (a,), lambda g: (g * c,), "scale_by_constant")


def exp(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.values)
    return _record(out, (a,), lambda g: (g * out,), "exp")


def log(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    if np.any(a.values <= 0):
        raise DomainError("log of a nonpositive value")
    av = a.values
    return _record(np.log(av), (a,), lambda g: (g / av,), "log")


def clamp_min(a: ArrayLike, floor: float) -> Tensor:
    a = as_tensor(a)
    av = a.values
    return _record(np.maximum(av, floor), (a,),
                   lambda g: (g * (av > floor),), "clamp_min")


def tanh(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.values)
    return _record(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    av = a.values
    return _record(np.maximum(av, 0.0), (a,), lambda g: (g * (av > 0),), "relu")


def _check_axis(kind: str, a: Tensor, axis: Optional[int]) -> None:
    if axis is not None and not 0 <= axis < max(a.ndim, 1):
        raise ShapeError(f"{kind}: axis {axis} out of range for shape {a.shape}")


def sum(a: ArrayLike, axis: Optional[int] = None) -> Tensor:  # noqa: A001 - primitive name
    a = as_tensor(a)
    _check_axis("sum", a, axis)
    shape = a.shape

    def backward(g):
        if axis is None:
            return (np.full(shape, float(g)),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _record(a.values.sum(axis=axis), (a,), backward, "sum")


def mean(a: ArrayLike, axis: Optional[int] = None) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else a.shape[axis]
    return scale_by_constant(sum(a, axis=axis), 1.0 / count)


def l2_normalize_rows(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    if a.ndim not in (1, 2):
        raise ShapeError(f"l2_normalize_rows needs a vector or matrix, got shape {a.shape}")
    norms = np.linalg.norm(a.values, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise DomainError("l2_normalize_rows of a zero vector")
    out = a.values / norms

    def backward(g):
        return ((g - out * np.sum(g * out, axis=-1, keepdims=True)) / norms,)

    return _record(out, (a,), backward, "l2_normalize_rows")


def softmax_lastdim(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    if a.ndim == 0:
        raise ShapeError("softmax_lastdim needs at least one dimension")
    shifted = a.values - a.values.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - np.sum(g * out, axis=-1, keepdims=True)),)

    return _record(out, (a,), backward, "softmax_lastdim")


def log_softmax_lastdim(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    if a.ndim == 0:
        raise ShapeError("log_softmax_lastdim needs at least one dimension")
    shifted = a.values - a.values.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def backward(g):
        return (g - probs * np.sum(g, axis=-1, keepdims=True),)

    return _record(out, (a,), backward, "log_softmax_lastdim")


def transpose(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose needs a matrix, got shape {a.shape}")
    return _record(a.values.T, (a,), lambda g: (g.T,), "transpose")


def concat_rows(*tensors: ArrayLike) -> Tensor:
    """Stack vectors (one row each) and matrices (their rows) vertically."""
    if not tensors:
        raise ShapeError("concat_rows needs at least one operand")
    parts = [as_tensor(t) for t in tensors]
    blocks = []
    for t in parts:
        if t.ndim not in (1, 2):
            raise ShapeError(f"concat_rows operands must be vectors or matrices, got {t.shape}")
        blocks.append(t.values.reshape(1, -1) if t.ndim == 1 else t.values)
    widths = {b.shape[1] for b in blocks}
    if len(widths) != 1:
        raise ShapeError(f"concat_rows: column counts differ {sorted(widths)}")
    bounds = np.cumsum([0] + [b.shape[0] for b in blocks])

    def backward(g):
        return tuple(g[bounds[i]:bounds[i + 1]].reshape(parts[i].shape) for i in range(len(parts)))

    return _record(np.vstack(blocks), tuple(parts), backward, "concat_rows")


def slice_rows(a: ArrayLike, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    if a.ndim == 0 or not 0 <= start < stop <= a.shape[0]:
        raise ShapeError(f"slice_rows: [{start}, {stop}) invalid for shape {a.shape}")
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        full[start:stop] = g
        return (full,)

    return _record(a.values[start:stop], (a,), backward, "slice_rows")


def take_rows(a: ArrayLike, indices: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    if a.ndim == 0 or idx.ndim != 1 or idx.size == 0 or idx.min() < 0 or idx.max() >= a.shape[0]:
        raise ShapeError(f"take_rows: indices invalid for shape {a.shape}")
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _record(a.values[idx], (a,), backward, "take_rows")


def outer_product(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 1 or b.ndim != 1:
        raise ShapeError(f"outer_product needs two vectors, got {a.shape} and {b.shape}")
    av, bv = a.values, b.values
    return _record(np.outer(av, bv), (a, b), lambda g: (g @ bv, g.T @ av), "outer_product")


def diagonal(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"diagonal needs a square matrix, got shape {a.shape}")
    return _record(np.diagonal(a.values).copy(), (a,), lambda g: (np.diag(g),), "diagonal")


PRIMITIVES: Dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul_elementwise": mul_elementwise,
    "divide": divide,
    "scale_by_constant": scale_by_constant,
    "exp": exp,
    "log": log,
    "clamp_min": clamp_min,
    "tanh": tanh,
    "relu": relu,
    "sum": sum,
    "mean": mean,
    "l2_normalize_rows": l2_normalize_rows,
    "softmax_lastdim": softmax_lastdim,
    "log_softmax_lastdim": log_softmax_lastdim,
    "transpose": transpose,
    "concat_rows": concat_rows,
    "slice_rows": slice_rows,
    "take_rows": take_rows,
    "outer_product": outer_product,
    "diagonal": diagonal,
}


def apply_primitive(kind: str, *operands: ArrayLike, **kwargs) -> Tensor:
    """
    Apply a named primitive.

    Args:
        kind: Primitive name (see PRIMITIVES)
        operands: Input tensors (or array-likes, treated as constants)
        kwargs: Primitive parameters such as `axis`, `constant`, `floor`

    Returns:
        Result tensor, with a graph edge if any operand requires grad
    """
    try:
        primitive = PRIMITIVES[kind]
    except KeyError:
        raise ShapeError(f"unknown primitive {kind!r}") from None
    return primitive(*operands, **kwargs)


# ========== Reverse mode ==========

def _topological_order(root: Tensor) -> List[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.node_id in seen:
            continue
        seen.add(node.node_id)
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and parent.node_id not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> GradientMap:
    """
    Exact reverse-mode gradients of a scalar loss.

    Args:
        loss: Scalar tensor built from requires_grad parameters

    Returns:
        GradientMap keyed by the node_id of each reachable leaf parameter
    """
    if not isinstance(loss, Tensor) or loss.ndim != 0:
        shape = loss.shape if isinstance(loss, Tensor) else type(loss).__name__
        raise ShapeError(f"backward needs a scalar loss, got {shape}")
    if not loss.requires_grad:
        raise GraphError("loss is detached from every parameter")

    order = _topological_order(loss)
    if any(node._consumed for node in order):
        raise GraphError("computation graph was already consumed by a previous backward")

    grads: Dict[int, np.ndarray] = {loss.node_id: np.ones(())}
    leaves: Dict[int, Tensor] = {}
    for node in reversed(order):
        g = grads.pop(node.node_id, None)
        if node.is_leaf:
            leaves[node.node_id] = Tensor(np.zeros(node.shape) if g is None else g)
            continue
        if g is not None:
            for parent, pg in zip(node._parents, node._backward(g)):
                if parent.requires_grad and pg is not None:
                    pg = np.asarray(pg, dtype=np.float64).reshape(parent.shape)
                    prev = grads.get(parent.node_id)
                    grads[parent.node_id] = pg if prev is None else prev + pg
        # free the graph behind this node
        node._consumed = True
        node._backward = None
        node._parents = ()
    return GradientMap(leaves)


def leaves_of(params: Iterable[Tensor]) -> List[Tensor]:
    """Fresh requires_grad leaves carrying the values of `params`."""
    return [Tensor.parameter(p.values) for p in params]
