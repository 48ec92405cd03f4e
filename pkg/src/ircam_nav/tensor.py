"""Dense tensors with reverse-mode automatic differentiation.

Every op checks operand shapes up front and refuses to broadcast, with one
exception: ``add_bias`` adds a tensor whose shape equals the trailing dims of
the other operand. ``matmul`` additionally accepts a 2-D right operand against
a batched left operand, which is how shared weights are applied to batches.

Gradients accumulate (``+=``) into leaves; call ``zero_grads`` between steps.
"""

import contextlib
from typing import (
    Callable,
    Dict,
    Iterator,
    List,
    Mapping,
    Optional,
    Sequence,
    Tuple,
    Union,
)

import numpy as np

from .errors import ContractError, DimensionError, NonFiniteError

_DTYPE = np.float32
_GRAD_ENABLED = True

GradFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
ArrayLike = Union[np.ndarray, Sequence, float, int]


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the dtype new tensors are created with."""
    global _DTYPE
    previous = _DTYPE
    _DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DTYPE = previous


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Run ops without recording a compute graph."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def default_dtype():
    return _DTYPE


class Tensor:
    """A dense row-major array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_grad_fn")

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        *,
        op: str = "leaf",
        _parents: Tuple["Tensor", ...] = (),
        _grad_fn: Optional[GradFn] = None,
    ):
        array = np.ascontiguousarray(data, dtype=_DTYPE)
        if any(dim <= 0 for dim in array.shape):
            raise DimensionError(f"Tensor dims must be positive, got {array.shape}")
        self.data = array
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents = _parents
        self._grad_fn = _grad_fn

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        if self.size != 1:
            raise ContractError(f"item() needs a single value, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        backward(self)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"


def constant(data: ArrayLike) -> Tensor:
    """Wrap values that never receive a gradient."""
    return Tensor(data)


def parameter(data: ArrayLike) -> Tensor:
    """Wrap values as a trainable leaf."""
    return Tensor(data, requires_grad=True)


def _result(
    data: np.ndarray, parents: Sequence[Tensor], grad_fn: GradFn, op: str
) -> Tensor:
    finite = np.isfinite(data)
    if not np.all(finite):
        bad = float(np.asarray(data)[~finite].reshape(-1)[0])
        raise NonFiniteError(f"{op} produced non-finite values", bad)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Tensor(
            data, True, op=op, _parents=tuple(parents), _grad_fn=grad_fn
        )
    return Tensor(data, op=op)


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


class ComputeGraph:
    """The ops reachable from a root tensor, parents before children."""

    def __init__(self, root: Tensor):
        self.root = root
        self.nodes = self._topological_order(root)

    def __len__(self) -> int:
        return len(self.nodes)

    @staticmethod
    def _topological_order(root: Tensor) -> List[Tensor]:
        order: List[Tensor] = []
        visited = set()
        stack: List[Tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        return order

    def backward(self) -> None:
        grads: Dict[int, np.ndarray] = {id(self.root): np.ones_like(self.root.data)}
        for node in reversed(self.nodes):
            grad = grads.pop(id(node), None)
            if grad is None:
                continue
            if node.is_leaf:
                grad = np.asarray(grad, dtype=node.data.dtype)
                node.grad = grad.copy() if node.grad is None else node.grad + grad
                continue
            for parent, parent_grad in zip(node._parents, node._grad_fn(grad)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = parent_grad if key not in grads else grads[key] + parent_grad


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable trainable leaf."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    ComputeGraph(loss).backward()


def zero_grads(params: Mapping[str, Tensor]) -> None:
    for tensor in params.values():
        tensor.zero_grad()


# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    return _result(
        a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul"
    )


def scale(x: Tensor, factor: float) -> Tensor:
    return _result(x.data * factor, (x,), lambda g: (g * factor,), "scale")


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add ``bias`` to every trailing slice of ``x`` with matching shape."""
    if bias.ndim > x.ndim or x.shape[x.ndim - bias.ndim :] != bias.shape:
        raise DimensionError(
            f"add_bias: bias shape {bias.shape} is not a suffix of {x.shape}"
        )
    lead = tuple(range(x.ndim - bias.ndim))

    def grad_fn(g: np.ndarray):
        return g, g.sum(axis=lead) if lead else g

    return _result(x.data + bias.data, (x, bias), grad_fn, "add_bias")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,), "exp")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _result(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    v = x.data
    inner = _GELU_C * (v + 0.044715 * v**3)
    t = np.tanh(inner)
    out = 0.5 * v * (1.0 + t)

    def grad_fn(g: np.ndarray):
        d_inner = _GELU_C * (1.0 + 3.0 * 0.044715 * v * v)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * d_inner),)

    return _result(out.astype(v.dtype), (x,), grad_fn, "gelu")


def minimum(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("minimum", a, b)
    take_a = a.data <= b.data
    return _result(
        np.where(take_a, a.data, b.data),
        (a, b),
        lambda g: (g * take_a, g * ~take_a),
        "minimum",
    )


def clip(x: Tensor, low: float, high: float) -> Tensor:
    inside = (x.data >= low) & (x.data <= high)
    return _result(np.clip(x.data, low, high), (x,), lambda g: (g * inside,), "clip")


# shape


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size:
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}")
    return _result(
        x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape"
    )


def swap_axes(x: Tensor, axis1: int, axis2: int) -> Tensor:
    return _result(
        np.swapaxes(x.data, axis1, axis2),
        (x,),
        lambda g: (np.swapaxes(g, axis1, axis2),),
        "swap_axes",
    )


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ContractError("concat needs at least one tensor")
    first = tensors[0]
    axis = axis % first.ndim
    for t in tensors[1:]:
        if t.ndim != first.ndim or any(
            t.shape[i] != first.shape[i] for i in range(first.ndim) if i != axis
        ):
            raise DimensionError(
                f"concat along axis {axis}: {first.shape} vs {t.shape}"
            )
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def grad_fn(g: np.ndarray):
        return np.split(g, bounds, axis=axis)

    return _result(
        np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), grad_fn, "concat"
    )


def _slice(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    key = tuple(index)

    def grad_fn(g: np.ndarray):
        full = np.zeros_like(x.data)
        full[key] = g
        return (full,)

    return _result(x.data[key], (x,), grad_fn, "slice")


def split(x: Tensor, sizes: Sequence[int], axis: int = 0) -> List[Tensor]:
    axis = axis % x.ndim
    if int(np.sum(sizes)) != x.shape[axis]:
        raise DimensionError(f"split: sizes {list(sizes)} do not cover {x.shape[axis]}")
    pieces, start = [], 0
    for size in sizes:
        pieces.append(_slice(x, axis, start, start + size))
        start += size
    return pieces


def take_last(x: Tensor, index: np.ndarray) -> Tensor:
    """Gather one entry per last-dim slice: ``out[...] = x[..., index[...]]``."""
    index = np.asarray(index, dtype=np.int64)
    if index.shape != x.shape[:-1]:
        raise DimensionError(f"take_last: index {index.shape} vs tensor {x.shape}")
    expanded = index[..., None]

    def grad_fn(g: np.ndarray):
        full = np.zeros_like(x.data)
        np.put_along_axis(full, expanded, g[..., None], axis=-1)
        return (full,)

    out = np.take_along_axis(x.data, expanded, axis=-1)[..., 0]
    return _result(out, (x,), grad_fn, "take_last")


def unfold_1d(x: Tensor, kernel: int, stride: int) -> Tensor:
    """Sliding windows over axis -2 of ``x[..., length, channels]``.

    Output is ``[..., n_windows, kernel * channels]`` with each window
    flattened as (offset, channel).
    """
    length, channels = x.shape[-2], x.shape[-1]
    if kernel > length or kernel < 1 or stride < 1:
        raise DimensionError(
            f"unfold_1d: kernel {kernel}/stride {stride} on length {length}"
        )
    n_out = (length - kernel) // stride + 1
    starts = np.arange(n_out) * stride
    windows = starts[:, None] + np.arange(kernel)[None, :]
    lead = x.shape[:-2]
    out = x.data[..., windows, :].reshape(lead + (n_out, kernel * channels))

    def grad_fn(g: np.ndarray):
        g = g.reshape(lead + (n_out, kernel, channels))
        full = np.zeros_like(x.data)
        for offset in range(kernel):
            full[..., starts + offset, :] += g[..., offset, :]
        return (full,)

    return _result(out, (x,), grad_fn, "unfold_1d")


# reductions


def _expand_reduced(g: np.ndarray, shape: Tuple[int, ...], axis, keepdims: bool):
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(a % len(shape) for a in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.sum(x.data, axis=axis, keepdims=keepdims)
    return _result(
        np.asarray(out),
        (x,),
        lambda g: (_expand_reduced(g, x.shape, axis, keepdims),),
        "sum",
    )


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.mean(x.data, axis=axis, keepdims=keepdims)
    count = x.size // max(np.asarray(out).size, 1)
    return _result(
        np.asarray(out),
        (x,),
        lambda g: (_expand_reduced(g / count, x.shape, axis, keepdims),),
        "mean",
    )


# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[..., m, k] @ b[k, n]`` or ``a[..., m, k] @ b[..., k, n]``."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not chain")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch dims of {a.shape} and {b.shape} differ")

    def grad_fn(g: np.ndarray):
        grad_a = g @ np.swapaxes(b.data, -1, -2)
        if b.ndim == 2:
            k, n = b.shape
            grad_b = a.data.reshape(-1, k).T @ g.reshape(-1, n)
        else:
            grad_b = np.swapaxes(a.data, -1, -2) @ g
        return grad_a, grad_b

    return _result(a.data @ b.data, (a, b), grad_fn, "matmul")


def softmax_last_dim(x: Tensor) -> Tensor:
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g: np.ndarray):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _result(out, (x,), grad_fn, "softmax")


def log_softmax_last_dim(x: Tensor) -> Tensor:
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))

    def grad_fn(g: np.ndarray):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _result(out, (x,), grad_fn, "log_softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(
            f"layer_norm: width {d} vs gamma {gamma.shape}, beta {beta.shape}"
        )
    centered = x.data - x.data.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    x_hat = centered * inv_std
    lead = tuple(range(x.ndim - 1))

    def grad_fn(g: np.ndarray):
        d_hat = g * gamma.data
        grad_x = inv_std * (
            d_hat
            - d_hat.mean(axis=-1, keepdims=True)
            - x_hat * (d_hat * x_hat).mean(axis=-1, keepdims=True)
        )
        grad_gamma = (g * x_hat).sum(axis=lead) if lead else g * x_hat
        grad_beta = g.sum(axis=lead) if lead else g
        return grad_x, grad_gamma, grad_beta

    return _result(x_hat * gamma.data + beta.data, (x, gamma, beta), grad_fn, "layer_norm")


# gradient checking


def numerical_grad(
    fn: Callable[[], Tensor], param: Tensor, step: float = 1e-3
) -> np.ndarray:
    """Central finite differences of scalar ``fn()`` with respect to ``param``."""
    flat = param.data.reshape(-1)
    grad = np.zeros(flat.size, dtype=np.float64)
    with no_grad():
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + step
            plus = fn().item()
            flat[i] = original - step
            minus = fn().item()
            flat[i] = original
            grad[i] = (plus - minus) / (2.0 * step)
    return grad.reshape(param.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-wise relative error between two gradient estimates."""
    scale_ = max(float(np.linalg.norm(analytic)), float(np.linalg.norm(numeric)))
    if scale_ == 0.0:
        return 0.0
    return float(np.linalg.norm(analytic - numeric)) / scale_


def gradcheck(
    fn: Callable[[], Tensor], params: Mapping[str, Tensor], step: float = 1e-3
) -> Dict[str, float]:
    """Return the analytic-vs-numeric relative error for every parameter."""
    for tensor in params.values():
        tensor.grad = None
    backward(fn())
    errors = {}
    for name, tensor in params.items():
        analytic = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
        errors[name] = relative_error(analytic, numerical_grad(fn, tensor, step))
    return errors
