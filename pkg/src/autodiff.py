"""
Dense tensors with a minimal reverse-mode automatic-differentiation tape.

Every primitive records one node on the thread's current tape when any operand
requires a gradient. ``backward`` walks that tape once in reverse and then
releases it, so each forward pass gets a fresh tape.
"""

import logging
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from src.exceptions import BurstMambaError, NonFiniteError, ShapeError

logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)

_local = threading.local()

Backward = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


def default_dtype():
    return getattr(_local, "dtype", np.float32)


@contextmanager
def shadow_precision() -> Iterator[None]:
    """Create every tensor in 64-bit inside the block (verification oracles)."""
    previous = default_dtype()
    _local.dtype = np.float64
    try:
        yield
    finally:
        _local.dtype = previous


def grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    previous = grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = previous


class Node:
    """One recorded primitive: its parents and the closure mapping output grad to parent grads."""

    __slots__ = ("op", "parents", "backward", "tape", "index")

    def __init__(self, op: str, parents: Tuple["Tensor", ...], backward: Backward, tape: "Tape", index: int):
        self.op = op
        self.parents = parents
        self.backward = backward
        self.tape = tape
        self.index = index


class Tape:
    """Append-only list of nodes; parents always precede children."""

    def __init__(self):
        self.nodes: List[Node] = []
        self.released = False

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, op: str, parents: Tuple["Tensor", ...], backward: Backward) -> Node:
        node = Node(op, parents, backward, self, len(self.nodes))
        self.nodes.append(node)
        return node

    def release(self) -> None:
        self.nodes = []
        self.released = True


def current_tape() -> Tape:
    tape = getattr(_local, "tape", None)
    if tape is None or tape.released:
        tape = Tape()
        _local.tape = tape
    return tape


def reset_tape() -> None:
    """Drop whatever the current thread has recorded."""
    tape = getattr(_local, "tape", None)
    if tape is not None:
        tape.release()


class Tensor:
    """Dense array plus optional gradient bookkeeping."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype != default_dtype():
            arr = arr.astype(default_dtype())
        if arr.size == 0:
            raise ShapeError(f"tensor: zero-sized extent in shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._node: Optional[Node] = None

    @classmethod
    def _from_op(cls, data: np.ndarray) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = False
        out.grad = None
        out.name = None
        out._node = None
        return out

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    @property
    def shape(self) -> Tuple[int, ...]:
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

    def __len__(self) -> int:
        return self.shape[0]

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self) -> "Tensor":
        return exp(self)


TensorLike = Union[Tensor, np.ndarray, float, int]


def as_tensor(value: TensorLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def parameter(data, name: Optional[str] = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=default_dtype()), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=default_dtype()), requires_grad=requires_grad)


def apply_op(op: str, data: np.ndarray, parents: Sequence[Tensor], backward: Backward) -> Tensor:
    """Wrap a primitive's output and record it on the tape when needed.

    Public so kernel modules can register fused primitives with hand-written adjoints.
    """
    data = np.asarray(data)
    if data.dtype != default_dtype():
        data = data.astype(default_dtype())
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op}: non-finite output (shape {data.shape})")
    out = Tensor._from_op(data)
    parents = tuple(parents)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._node = current_tape().record(op, parents, backward)
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)), dtype=np.float64).astype(grad.dtype)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True, dtype=np.float64).astype(grad.dtype)
    return grad.reshape(shape)


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


def add(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    return apply_op("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    return apply_op("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    av, bv = a.data, b.data
    return apply_op("mul", av * bv, (a, b), lambda g: (g * bv, g * av))


def div(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)
    av, bv = a.data, b.data
    return apply_op("div", av / bv, (a, b), lambda g: (g / bv, -g * av / (bv * bv)))


def neg(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    return apply_op("neg", -a.data, (a,), lambda g: (-g,))


def matmul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot contract shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: cannot contract shapes {a.shape} and {b.shape}") from None
    av, bv = a.data, b.data
    return apply_op(
        "matmul", out, (a, b),
        lambda g: (np.matmul(g, np.swapaxes(bv, -1, -2)), np.matmul(np.swapaxes(av, -1, -2), g)),
    )


def exp(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        y = np.exp(a.data)
    return apply_op("exp", y, (a,), lambda g: (g * y,))


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def softplus(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return apply_op("softplus", np.logaddexp(0.0, x), (a,), lambda g: (g * _sigmoid_np(x),))


def sigmoid(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid_np(a.data)
    return apply_op("sigmoid", s, (a,), lambda g: (g * s * (1.0 - s),))


def silu(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    x = a.data
    s = _sigmoid_np(x)
    return apply_op("silu", x * s, (a,), lambda g: (g * (s + x * s * (1.0 - s)),))


def sqrt(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    y = np.sqrt(a.data)
    return apply_op("sqrt", y, (a,), lambda g: (g * 0.5 / y,))


def abs_(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return apply_op("abs", np.abs(x), (a,), lambda g: (g * np.sign(x),))


def _normalize_axis(axis, ndim: int) -> Optional[Tuple[int, ...]]:
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(a: TensorLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _normalize_axis(axis, a.ndim)
    out = np.sum(a.data, axis=axes, keepdims=keepdims, dtype=np.float64).astype(a.dtype)
    shape = a.shape

    def backward(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return apply_op("sum", out, (a,), backward)


def mean(a: TensorLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _normalize_axis(axis, a.ndim)
    count = a.size if axes is None else int(np.prod([a.shape[i] for i in axes]))
    out = (np.sum(a.data, axis=axes, keepdims=keepdims, dtype=np.float64) / count).astype(a.dtype)
    shape = a.shape

    def backward(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, shape),)

    return apply_op("mean", out, (a,), backward)


def pad(a: TensorLike, pad_width: Sequence[Tuple[int, int]]) -> Tensor:
    """Zero padding; ``pad_width`` has one (before, after) pair per axis."""
    a = as_tensor(a)
    if len(pad_width) != a.ndim:
        raise ShapeError(f"pad: {len(pad_width)} pad pairs for tensor of shape {a.shape}")
    widths = [(int(lo), int(hi)) for lo, hi in pad_width]
    if any(lo < 0 or hi < 0 for lo, hi in widths):
        raise ShapeError(f"pad: negative widths {widths}")
    key = tuple(slice(lo, lo + n) for (lo, _), n in zip(widths, a.shape))
    return apply_op("pad", np.pad(a.data, widths), (a,), lambda g: (g[key],))


def _has_array_index(key) -> bool:
    keys = key if isinstance(key, tuple) else (key,)
    return any(isinstance(k, (np.ndarray, list)) for k in keys)


def slice_(a: TensorLike, key) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data[key]
    except IndexError as exc:
        raise ShapeError(f"slice: {exc} for shape {a.shape}") from None
    shape, dtype = a.shape, a.dtype
    advanced = _has_array_index(key)

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        if advanced:
            np.add.at(full, key, g)
        else:
            full[key] = g
        return (full,)

    return apply_op("slice", np.array(out, copy=True), (a,), backward)


def reshape(a: TensorLike, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {tuple(shape)}") from None
    original = a.shape
    return apply_op("reshape", out, (a,), lambda g: (g.reshape(original),))


def transpose(a: TensorLike, axes: Optional[Sequence[int]] = None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {a.shape}")
    inverse = tuple(np.argsort(axes))
    return apply_op("transpose", np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def broadcast_to(a: TensorLike, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    try:
        out = np.broadcast_to(a.data, tuple(shape))
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {a.shape} to {tuple(shape)}") from None
    return apply_op("broadcast_to", np.array(out), (a,), lambda g: (g,))


def concat(tensors: Iterable[TensorLike], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise ShapeError(f"concat: incompatible shapes {shapes} along axis {axis}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return apply_op("concat", out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


def stack(tensors: Sequence[TensorLike], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    expanded = []
    for t in tensors:
        ax = axis % (t.ndim + 1)
        expanded.append(reshape(t, t.shape[:ax] + (1,) + t.shape[ax:]))
    return concat(expanded, axis=axis)


def _conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def conv2d(x: TensorLike, weight: TensorLike, bias: Optional[TensorLike] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2D cross-correlation via im2col and one matmul.

    x: (B, Cin, H, W); weight: (Cout, Cin, kh, kw); bias: (Cout,).
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {weight.shape}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: invalid stride={stride} padding={padding}")
    batch, cin, height, width = x.shape
    cout, _, kh, kw = weight.shape
    ho = _conv_output_size(height, kh, stride, padding)
    wo = _conv_output_size(width, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {x.shape}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((batch, cin, kh, kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    cols = cols.reshape(batch, cin * kh * kw, ho * wo)
    wmat = weight.data.reshape(cout, cin * kh * kw)
    out = np.matmul(wmat, cols)
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (cout,):
            raise ShapeError(f"conv2d: bias shape {bias.shape} does not match {cout} output channels")
        out = out + bias.data[None, :, None]
        parents.append(bias)
    out = out.reshape(batch, cout, ho, wo)
    padded_shape = xp.shape
    wshape = weight.shape

    def backward(g):
        gm = g.reshape(batch, cout, ho * wo)
        grad_w = np.matmul(gm, np.swapaxes(cols, 1, 2)).sum(axis=0, dtype=np.float64)
        grad_w = grad_w.astype(g.dtype).reshape(wshape)
        gcols = np.matmul(wmat.T, gm).reshape(batch, cin, kh, kw, ho, wo)
        gxp = np.zeros(padded_shape, dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, :, i, j]
        grad_x = gxp[:, :, padding:padding + height, padding:padding + width]
        grads = [grad_x, grad_w]
        if bias is not None:
            grads.append(gm.sum(axis=(0, 2), dtype=np.float64).astype(g.dtype))
        return tuple(grads)

    return apply_op("conv2d", out, parents, backward)


def _scatter_np(values: np.ndarray, index: np.ndarray, axis: int, size: int) -> np.ndarray:
    shape = list(values.shape)
    shape[axis] = size
    out = np.zeros(shape, dtype=values.dtype)
    key = (slice(None),) * axis + (index,)
    np.add.at(out, key, values)
    return out


def _check_index(op: str, index: np.ndarray, size: int) -> np.ndarray:
    index = np.asarray(index)
    if index.ndim != 1 or not np.issubdtype(index.dtype, np.integer):
        raise ShapeError(f"{op}: index must be a 1-D integer array, got {index.dtype} {index.shape}")
    if index.size == 0:
        raise ShapeError(f"{op}: empty index")
    if index.min() < 0 or index.max() >= size:
        raise ShapeError(f"{op}: index out of range [0, {size}) (min {index.min()}, max {index.max()})")
    return index


def gather(x: TensorLike, index: np.ndarray, axis: int = 0) -> Tensor:
    """Select entries of ``x`` along ``axis``; repeated indices allowed. Adjoint of ``scatter_add``."""
    x = as_tensor(x)
    axis = axis % x.ndim
    size = x.shape[axis]
    index = _check_index("gather", index, size)
    return apply_op("gather", np.take(x.data, index, axis=axis), (x,),
                    lambda g: (_scatter_np(g, index, axis, size),))


def scatter_add(y: TensorLike, index: np.ndarray, size: int, axis: int = 0) -> Tensor:
    """Sum slices of ``y`` into a zero tensor of extent ``size`` along ``axis``. Adjoint of ``gather``."""
    y = as_tensor(y)
    axis = axis % y.ndim
    index = _check_index("scatter_add", index, size)
    if index.size != y.shape[axis]:
        raise ShapeError(f"scatter_add: {index.size} indices for {y.shape[axis]} slices of {y.shape}")
    return apply_op("scatter_add", _scatter_np(y.data, index, axis, size), (y,),
                    lambda g: (np.take(g, index, axis=axis),))


def _accumulate_leaf(leaf: Tensor, grad: np.ndarray) -> None:
    if leaf.grad is None:
        leaf.grad = np.array(grad, dtype=leaf.dtype, copy=True)
    else:
        leaf.grad = leaf.grad + grad


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every leaf that requires a gradient."""
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise BurstMambaError("backward: loss is detached from the tape")
    seed = np.ones_like(loss.data)
    node = loss._node
    if node is None:
        _accumulate_leaf(loss, seed)
        return
    tape = node.tape
    if tape.released:
        raise BurstMambaError("backward: tape already released; run the forward pass again")

    grads = {node.index: seed}
    for current in reversed(tape.nodes[:node.index + 1]):
        g = grads.pop(current.index, None)
        if g is None:
            continue
        for parent, pg in zip(current.parents, current.backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = _unbroadcast(np.asarray(pg), parent.shape)
            pnode = parent._node
            if pnode is not None and pnode.tape is tape:
                prev = grads.get(pnode.index)
                grads[pnode.index] = pg if prev is None else prev + pg
            else:
                _accumulate_leaf(parent, pg)
    logger.debug(f"backward visited {node.index + 1} nodes")
    tape.release()
