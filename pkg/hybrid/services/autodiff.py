"""
Dense tensors with reverse-mode automatic differentiation.

All real-valued quantities of the engine live in :class:`Tensor` objects
(float64, row-major). Each operation records its parents and a backward
rule; :class:`Graph` orders the recorded nodes topologically from a scalar
loss and visits every node exactly once on the way back.

Graphs are private to the thread that built them: recording can be switched
off per thread with :func:`no_grad`, and :meth:`Graph.backward` returns its
gradients instead of writing them onto shared parameters, so data-parallel
workers can merge their results at a single synchronization point.
"""
import contextlib
import logging
import threading
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import ContractError, DimensionError

logger = logging.getLogger(__name__)

DTYPE = np.float64

ArrayLike = Union['Tensor', np.ndarray, float, int, Sequence]
BackwardRule = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_recording = threading.local()


def is_grad_enabled() -> bool:
    """Whether operations on this thread currently record backward rules."""
    return getattr(_recording, 'enabled', True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording on the current thread."""
    previous = is_grad_enabled()
    _recording.enabled = False
    try:
        yield
    finally:
        _recording.enabled = previous


class Tensor:
    """Immutable float64 array, optionally tracked for gradients."""

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        source = data.data if isinstance(data, Tensor) else data
        array = np.array(source, dtype=DTYPE)
        array.setflags(write=False)
        self._data = array
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.grad: Optional[np.ndarray] = None
        self.op: Optional[str] = None
        self._parents: Tuple['Tensor', ...] = ()
        self._backward: Optional[BackwardRule] = None

    @classmethod
    def _from_op(cls, array: np.ndarray, parents: Sequence['Tensor'],
                 backward: BackwardRule, op: str) -> 'Tensor':
        out = cls.__new__(cls)
        array = np.asarray(array, dtype=DTYPE)
        array.setflags(write=False)
        out._data = array
        out.name = None
        out.grad = None
        out.op = op
        out.requires_grad = is_grad_enabled() and any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    # ----- value access -----

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
    def size(self) -> int:
        return self._data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        return float(self._data.reshape(-1)[0]) if self._data.size == 1 else float('nan')

    def numpy(self) -> np.ndarray:
        return self._data.copy()

    def assign(self, value: ArrayLike) -> None:
        """Replace the value of a leaf (parameter update); the shape must not change."""
        array = np.array(value.data if isinstance(value, Tensor) else value, dtype=DTYPE)
        if array.shape != self.shape:
            raise DimensionError("assign() cannot change a tensor's shape", self.shape, array.shape)
        array.setflags(write=False)
        self._data = array

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> Dict['Tensor', np.ndarray]:
        """Backpropagate from this scalar and accumulate ``.grad`` on the leaves."""
        grads = Graph.trace(self).backward()
        for leaf, grad in grads.items():
            leaf.grad = grad if leaf.grad is None else leaf.grad + grad
        return grads

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ''
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    # ----- operators -----

    def __add__(self, other: ArrayLike) -> 'Tensor':
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other: ArrayLike) -> 'Tensor':
        return sub(self, other)

    def __rsub__(self, other: ArrayLike) -> 'Tensor':
        return sub(other, self)

    def __mul__(self, other: ArrayLike) -> 'Tensor':
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self) -> 'Tensor':
        return mul(self, -1.0)

    def __matmul__(self, other: 'Tensor') -> 'Tensor':
        return matmul(self, other)


class Graph:
    """Recorded operations reachable from a root, parents before children."""

    def __init__(self, root: Tensor, nodes: List[Tensor]):
        self.root = root
        self.nodes = nodes
        self.consumed = False

    @classmethod
    def trace(cls, root: Tensor) -> 'Graph':
        order: List[Tensor] = []
        seen = set()
        stack: List[Tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        return cls(root, order)

    @property
    def leaves(self) -> List[Tensor]:
        return [node for node in self.nodes if node.is_leaf and node.requires_grad]

    def backward(self) -> Dict[Tensor, np.ndarray]:
        """Run every backward rule once and return the gradients of the leaves.

        The graph is consumed: intermediate nodes drop their parents and rules.
        """
        root = self.root
        if root.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {root.shape}")
        if self.consumed:
            raise ContractError("graph was already consumed by a previous backward()")

        pending: Dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
        leaf_grads: Dict[Tensor, np.ndarray] = {}

        for node in reversed(self.nodes):
            grad = pending.pop(id(node), None)
            if grad is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    leaf_grads[node] = grad
                continue
            parent_grads = node._backward(grad)
            for parent, parent_grad in zip(node._parents, parent_grads):
                if parent_grad is None or not parent.requires_grad:
                    continue
                if parent_grad.shape != parent.shape:
                    raise DimensionError(
                        f"backward rule of {node.op} produced a gradient of the wrong shape",
                        parent.shape, parent_grad.shape,
                    )
                key = id(parent)
                pending[key] = pending[key] + parent_grad if key in pending else parent_grad

        self._release()
        return leaf_grads

    def _release(self) -> None:
        for node in self.nodes:
            if node._backward is not None:
                node._backward = None
                node._parents = ()
                node.requires_grad = False
        self.consumed = True


# ========== helpers ==========

def as_tensor(value: ArrayLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _record(array: np.ndarray, parents: Sequence[Tensor], backward: BackwardRule,
            op: str) -> Tensor:
    return Tensor._from_op(array, parents, backward, op)


# ========== elementwise ==========

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(a.data + b.data, (a, b), backward, 'add')


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record(a.data - b.data, (a, b), backward, 'sub')


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record(a.data * b.data, (a, b), backward, 'mul')


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(g):
        return (g * mask,)

    return _record(np.where(mask, x.data, 0.0), (x,), backward, 'relu')


# ========== shape ==========

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    source = x.shape
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError as exc:
        raise DimensionError("reshape must keep the element count", source, tuple(shape)) from exc

    def backward(g):
        return (g.reshape(source),)

    return _record(out, (x,), backward, 'reshape')


def flatten(x: Tensor, start_dim: int = 1) -> Tensor:
    """Collapse every axis from ``start_dim`` on into one."""
    head = x.shape[:start_dim]
    return reshape(x, head + (int(np.prod(x.shape[start_dim:], dtype=np.int64)),))


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (np.ascontiguousarray(g.transpose(inverse)),)

    return _record(np.ascontiguousarray(x.data.transpose(axes)), (x,), backward, 'permute')


# ========== reductions ==========

def tensor_sum(x: Tensor, axis: Optional[int] = None) -> Tensor:
    """Sum of all elements (strict left-to-right order) or along one axis."""
    if axis is None:
        flat = x.data.reshape(-1)
        total = np.add.accumulate(flat)[-1] if flat.size else 0.0

        def backward(g):
            return (np.full(x.shape, float(g), dtype=DTYPE),)

        return _record(np.asarray(total, dtype=DTYPE), (x,), backward, 'sum')

    axis = axis % x.ndim

    def backward_axis(g):
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _record(x.data.sum(axis=axis), (x,), backward_axis, 'sum_axis')


# ========== linear algebra ==========

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of an m×k and a k×n tensor."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError("matmul inner dimensions disagree", a.shape, b.shape)

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _record(a.data @ b.data, (a, b), backward, 'matmul')


def dense(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map ``x @ weight.T + bias`` for x of shape (in,) or (N, in)."""
    if weight.ndim != 2 or x.ndim not in (1, 2) or x.shape[-1] != weight.shape[1]:
        raise DimensionError("dense input width does not match the weight", x.shape, weight.shape)
    if bias is not None and bias.shape != (weight.shape[0],):
        raise DimensionError("dense bias does not match the weight", bias.shape, weight.shape)

    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        gx = g @ weight.data
        gw = np.outer(g, x.data) if x.ndim == 1 else g.T @ x.data
        grads = [gx, gw]
        if bias is not None:
            grads.append(g if g.ndim == 1 else g.sum(axis=0))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _record(out, parents, backward, 'dense')


def conv2d(x: Tensor, weight: Tensor, stride: int = 1, pad: int = 0,
           bias: Optional[Tensor] = None) -> Tensor:
    """2-D cross-correlation of (C,H,W) or (N,C,H,W) input with an (F,C,k,k) kernel."""
    if stride < 1:
        raise ContractError(f"conv2d stride must be >= 1, got {stride}")
    if pad < 0:
        raise ContractError(f"conv2d padding must be >= 0, got {pad}")
    single = x.ndim == 3
    xd = x.data[None] if single else x.data
    if xd.ndim != 4 or weight.ndim != 4:
        raise DimensionError("conv2d expects (N,C,H,W) input and (F,C,k,k) weight",
                             x.shape, weight.shape)
    n, channels, height, width = xd.shape
    filters, w_channels, kh, kw = weight.shape
    if w_channels != channels:
        raise DimensionError("conv2d channel count mismatch", x.shape, weight.shape)
    if kh > height + 2 * pad or kw > width + 2 * pad:
        raise DimensionError("conv2d kernel larger than padded input", x.shape, weight.shape)
    if bias is not None and bias.shape != (filters,):
        raise DimensionError("conv2d bias does not match the filters", bias.shape, weight.shape)

    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    out_h = (height + 2 * pad - kh) // stride + 1
    out_w = (width + 2 * pad - kw) // stride + 1
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    out = np.tensordot(windows, weight.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def backward(g):
        g4 = g[None] if single else g
        gw = np.tensordot(g4, windows, axes=([0, 2, 3], [0, 2, 3]))
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                contrib = np.tensordot(g4, weight.data[:, :, i, j], axes=([1], [0]))
                gxp[:, :, i:i + stride * out_h:stride, j:j + stride * out_w:stride] += (
                    contrib.transpose(0, 3, 1, 2)
                )
        gx = gxp[:, :, pad:pad + height, pad:pad + width]
        grads = [gx[0] if single else np.ascontiguousarray(gx), gw]
        if bias is not None:
            grads.append(g4.sum(axis=(0, 2, 3)))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _record(out[0] if single else out, parents, backward, 'conv2d')


def maxpool2d(x: Tensor) -> Tensor:
    """2×2 max pooling with stride 2; odd trailing rows/columns are dropped.

    Ties route the gradient to the lowest flat index inside the window.
    """
    single = x.ndim == 3
    xd = x.data[None] if single else x.data
    if xd.ndim != 4:
        raise DimensionError("maxpool2d expects (C,H,W) or (N,C,H,W) input", x.shape)
    n, channels, height, width = xd.shape
    out_h, out_w = height // 2, width // 2
    if out_h == 0 or out_w == 0:
        raise DimensionError("maxpool2d needs at least a 2×2 spatial extent", x.shape)

    blocks = (xd[:, :, :out_h * 2, :out_w * 2]
              .reshape(n, channels, out_h, 2, out_w, 2)
              .transpose(0, 1, 2, 4, 3, 5)
              .reshape(n, channels, out_h, out_w, 4))
    index = blocks.argmax(axis=-1)[..., None]
    out = np.take_along_axis(blocks, index, axis=-1)[..., 0]

    def backward(g):
        g4 = g[None] if single else g
        routed = np.zeros((n, channels, out_h, out_w, 4), dtype=DTYPE)
        np.put_along_axis(routed, index, g4[..., None], axis=-1)
        gx = np.zeros_like(xd)
        gx[:, :, :out_h * 2, :out_w * 2] = (routed
                                            .reshape(n, channels, out_h, out_w, 2, 2)
                                            .transpose(0, 1, 2, 4, 3, 5)
                                            .reshape(n, channels, out_h * 2, out_w * 2))
        return (gx[0] if single else gx,)

    return _record(out[0] if single else out, (x,), backward, 'maxpool2d')


# ========== loss ==========

def softmax_cross_entropy(logits: Tensor, labels: Sequence[int], reduction: str = 'mean') -> Tensor:
    """Cross-entropy of softmax(logits) against integer class labels.

    Args:
        logits: (N, K) or (K,) scores
        labels: N class indices (or a single index for 1-D logits)
        reduction: 'mean' or 'sum' over the batch

    Returns:
        Scalar loss tensor
    """
    single = logits.ndim == 1
    scores = logits.data[None] if single else logits.data
    targets = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if scores.ndim != 2 or targets.shape != (scores.shape[0],):
        raise DimensionError("labels do not match the logits batch", logits.shape, targets.shape)
    if targets.size and (targets.min() < 0 or targets.max() >= scores.shape[1]):
        raise ContractError(f"labels must lie in [0, {scores.shape[1]})")
    if reduction not in ('mean', 'sum'):
        raise ContractError(f"unknown reduction {reduction!r}")

    shifted = scores - scores.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(scores.shape[0])
    per_sample = log_norm - shifted[rows, targets]
    scale = 1.0 / max(scores.shape[0], 1) if reduction == 'mean' else 1.0
    total = np.add.accumulate(per_sample)[-1] * scale if per_sample.size else 0.0

    def backward(g):
        probs = np.exp(shifted - log_norm[:, None])
        probs[rows, targets] -= 1.0
        grad = probs * (float(g) * scale)
        return (grad[0] if single else grad,)

    return _record(np.asarray(total, dtype=DTYPE), (logits,), backward, 'softmax_cross_entropy')


# ========== verification helpers ==========

def numerical_gradient(loss_fn: Callable[[], float], tensor: Tensor, eps: float = 1e-5,
                       indices: Optional[Sequence[Tuple[int, ...]]] = None) -> np.ndarray:
    """Central finite differences of ``loss_fn`` with respect to ``tensor``.

    Entries not listed in ``indices`` are left as NaN.
    """
    original = tensor.numpy()
    grad = np.full(original.shape, np.nan)
    targets = indices if indices is not None else list(np.ndindex(original.shape))
    try:
        for index in targets:
            bumped = original.copy()
            bumped[index] = original[index] + eps
            tensor.assign(bumped)
            with no_grad():
                upper = float(loss_fn())
            bumped[index] = original[index] - eps
            tensor.assign(bumped)
            with no_grad():
                lower = float(loss_fn())
            grad[index] = (upper - lower) / (2.0 * eps)
    finally:
        tensor.assign(original)
    return grad


def gradients_close(analytic: np.ndarray, numeric: np.ndarray, rtol: float = 1e-4,
                    atol: float = 1e-6) -> bool:
    """Elementwise ``|a-n| <= atol + rtol*max(|a|,|n|)`` over the evaluated entries."""
    mask = ~np.isnan(numeric)
    a, n = analytic[mask], numeric[mask]
    return bool(np.all(np.abs(a - n) <= atol + rtol * np.maximum(np.abs(a), np.abs(n))))
