"""
Tensor Engine
Dense numpy tensors with define-by-run reverse-mode differentiation.

Every model computation in the codec flows through Tensor. The tape is rebuilt on
each forward pass and walked once in reverse topological order by backward().
Broadcasting is trailing-axis only: one operand must fit into the other when both
shapes are right-aligned (extents equal or 1). Anything else needs an explicit
reshape.
"""
import contextlib
import logging
import math
import os
import threading
from pathlib import Path

import numpy as np
from scipy import special

logger = logging.getLogger(__name__)

# --- CONFIGURATION ---
DEFAULT_PRECISION = os.getenv("ENTROFORMER_PRECISION", "float64")

_precision = {"dtype": np.dtype(DEFAULT_PRECISION)}
_local = threading.local()


class ShapeError(ValueError):
    """Raised when a primitive receives operands of incompatible shape."""

    def __init__(self, primitive: str, *shapes):
        shown = " and ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{primitive}: incompatible shapes {shown}")
        self.primitive = primitive
        self.shapes = shapes


# =============================================================================
# PRECISION AND GRAD MODE
# =============================================================================

def get_precision() -> np.dtype:
    return _precision["dtype"]


def set_precision(dtype) -> None:
    """Switch the global float precision (float32 for coding, float64 for training)."""
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported precision {dtype}; use float32 or float64")
    _precision["dtype"] = dtype


@contextlib.contextmanager
def precision(dtype):
    previous = get_precision()
    set_precision(dtype)
    try:
        yield
    finally:
        set_precision(previous)


def is_grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Run a block without recording the tape (inference / coding path)."""
    previous = is_grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = previous


# =============================================================================
# TENSOR
# =============================================================================

class Tensor:
    """Dense n-dimensional array that can take part in the gradient tape."""

    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=get_precision())
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self.op = "leaf"

    @staticmethod
    def _result(data, parents, backward, op):
        out = Tensor.__new__(Tensor)
        out.data = np.asarray(data).astype(get_precision(), copy=False)
        out.grad = None
        out.op = op
        track = is_grad_enabled() and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._parents = tuple(parents) if track else ()
        out._backward = backward if track else None
        return out

    # --- basic properties ---

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __len__(self):
        return self.data.shape[0]

    # --- backward ---

    def backward(self):
        """Fill .grad of every requires_grad leaf reachable from this scalar."""
        if self.data.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {self.shape}")
        order = _topological_order(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = np.array(g, copy=True) if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.shape:
                    raise ShapeError(f"backward of {node.op}", pg.shape, parent.shape)
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg

    # --- operators ---

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

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)


def _lift(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _topological_order(root: Tensor):
    order, seen = [], set()
    stack = [(root, False)]
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
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


# =============================================================================
# BROADCASTING HELPERS
# =============================================================================

def _broadcast_shape(op, a_shape, b_shape):
    if a_shape == b_shape:
        return a_shape
    for big, small in ((a_shape, b_shape), (b_shape, a_shape)):
        if len(small) <= len(big) and all(s in (1, t) for s, t in zip(small[::-1], big[::-1])):
            return big
    raise ShapeError(op, a_shape, b_shape)


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# =============================================================================
# ELEMENTWISE PRIMITIVES
# =============================================================================

def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_shape("add", a.shape, b.shape)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._result(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_shape("sub", a.shape, b.shape)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_shape("mul", a.shape, b.shape)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._result(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_shape("div", a.shape, b.shape)

    def backward(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return Tensor._result(a.data / b.data, (a, b), backward, "div")


def neg(a) -> Tensor:
    a = _lift(a)
    return Tensor._result(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, exponent: float) -> Tensor:
    a = _lift(a)
    exponent = float(exponent)

    def backward(g):
        return (g * exponent * a.data ** (exponent - 1.0),)

    return Tensor._result(a.data ** exponent, (a,), backward, "pow")


def exp(a) -> Tensor:
    a = _lift(a)
    out = np.exp(a.data)
    return Tensor._result(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = _lift(a)
    return Tensor._result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a) -> Tensor:
    a = _lift(a)
    out = np.sqrt(a.data)
    return Tensor._result(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def tanh(a) -> Tensor:
    a = _lift(a)
    out = np.tanh(a.data)
    return Tensor._result(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(a) -> Tensor:
    a = _lift(a)
    out = special.expit(a.data)
    return Tensor._result(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(a) -> Tensor:
    a = _lift(a)
    x = a.data
    out = np.logaddexp(0.0, x)
    return Tensor._result(out, (a,), lambda g: (g * special.expit(x),), "softplus")


def erf(a) -> Tensor:
    a = _lift(a)
    x = a.data
    scale = 2.0 / math.sqrt(math.pi)
    return Tensor._result(special.erf(x), (a,), lambda g: (g * scale * np.exp(-x * x),), "erf")


def leaky_relu(a, slope: float = 0.01) -> Tensor:
    a = _lift(a)
    positive = a.data > 0
    out = np.where(positive, a.data, slope * a.data)
    return Tensor._result(out, (a,), lambda g: (np.where(positive, g, slope * g),), "leaky_relu")


def clamp(a, low=None, high=None) -> Tensor:
    """Clip values; the gradient passes only where the input lies inside the bounds."""
    a = _lift(a)
    x = a.data
    out = np.clip(x, low, high)
    inside = np.ones(x.shape, dtype=bool)
    if low is not None:
        inside &= x >= low
    if high is not None:
        inside &= x <= high
    return Tensor._result(out, (a,), lambda g: (np.where(inside, g, 0.0),), "clamp")


def where(condition, a, b) -> Tensor:
    """Elementwise select; condition is a constant boolean array."""
    a, b = _lift(a), _lift(b)
    shape = _broadcast_shape("where", a.shape, b.shape)
    condition = np.asarray(condition, dtype=bool)
    _broadcast_shape("where", condition.shape, shape)

    def backward(g):
        return (_unbroadcast(np.where(condition, g, 0.0), a.shape),
                _unbroadcast(np.where(condition, 0.0, g), b.shape))

    return Tensor._result(np.where(condition, a.data, b.data), (a, b), backward, "where")


def masked_fill(a, mask, value: float) -> Tensor:
    """Replace entries where mask is True by value; those entries get zero gradient."""
    a = _lift(a)
    mask = np.asarray(mask, dtype=bool)
    _broadcast_shape("masked_fill", a.shape, mask.shape)
    if mask.shape != a.shape:
        mask = np.broadcast_to(mask, a.shape)
    out = np.where(mask, value, a.data)
    return Tensor._result(out, (a,), lambda g: (np.where(mask, 0.0, g),), "masked_fill")


# =============================================================================
# LINEAR ALGEBRA, REDUCTIONS, SHAPE
# =============================================================================

def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    if a.ndim > 2 and b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError("matmul", a.shape, b.shape)

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor._result(a.data @ b.data, (a, b), backward, "matmul")


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return Tensor._result(out, (a,), backward, "sum")


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    total = reduce_sum(a, axis, keepdims)
    count = a.data.size // max(total.data.size, 1)
    return total / float(count)


def softmax(a, axis: int = -1) -> Tensor:
    a = _lift(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._result(out, (a,), backward, "softmax")


def reshape(a, shape) -> Tensor:
    a = _lift(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, shape) from None
    return Tensor._result(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = _lift(a)
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError("transpose", a.shape, axes)
    inverse = tuple(np.argsort(axes))
    return Tensor._result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), "transpose")


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(a, index) -> Tensor:
    a = _lift(a)
    out = a.data[index]
    basic = _is_basic_index(index)

    def backward(g):
        grad = np.zeros_like(a.data)
        if basic:
            grad[index] = g
        else:
            np.add.at(grad, index, g)
        return (grad,)

    return Tensor._result(np.array(out, copy=True), (a,), backward, "getitem")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    ref = tensors[0].shape
    axis_ = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
                s != r for k, (s, r) in enumerate(zip(t.shape, ref)) if k != axis_):
            raise ShapeError("concat", ref, t.shape)
    sizes = [t.shape[axis_] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis_))

    return Tensor._result(np.concatenate([t.data for t in tensors], axis=axis_),
                          tensors, backward, "concat")


def gather(a, index) -> Tensor:
    """Pick entries along the last axis: out[..., i, j] = a[..., i, index[..., i, j]]."""
    a = _lift(a)
    index = np.asarray(index, dtype=np.int64)
    target = a.shape[:-1] + index.shape[-1:]
    try:
        index = np.broadcast_to(index, target)
    except ValueError:
        raise ShapeError("gather", a.shape, index.shape) from None
    out = np.take_along_axis(a.data, index, axis=-1)

    def backward(g):
        grad = np.zeros_like(a.data)
        lead = np.indices(index.shape, sparse=True)[:-1]
        np.add.at(grad, (*lead, index), g)
        return (grad,)

    return Tensor._result(out, (a,), backward, "gather")


def topk_keep_mask(values: np.ndarray, k: int) -> np.ndarray:
    """Boolean mask of the k largest entries per row; ties go to the lowest index."""
    cols = values.shape[-1]
    if k >= cols:
        return np.ones(values.shape, dtype=bool)
    order = np.argsort(-values, axis=-1, kind="stable")[..., :k]
    keep = np.zeros(values.shape, dtype=bool)
    np.put_along_axis(keep, order, True, axis=-1)
    return keep


def topk_select(a, k: int) -> Tensor:
    """Keep the k largest entries of every row (last axis) and set the rest to -inf."""
    a = _lift(a)
    if k < 1:
        raise ValueError(f"top-k needs k >= 1, got {k}")
    if k >= a.shape[-1]:
        return a
    return masked_fill(a, ~topk_keep_mask(a.data, k), -np.inf)


# =============================================================================
# CONVOLUTION
# =============================================================================

def _window(start, stride, count):
    return slice(start, start + stride * (count - 1) + 1, stride)


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    """Grouped 2-D convolution. x is (B, C, H, W); weight is (O, C // groups, kh, kw)."""
    x, weight = _lift(x), _lift(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError("conv2d", x.shape, weight.shape)
    batch, channels, height, width = x.shape
    out_channels, group_in, kh, kw = weight.shape
    if channels % groups or out_channels % groups or channels // groups != group_in:
        raise ShapeError("conv2d", x.shape, weight.shape)
    out_h = (height + 2 * padding - kh) // stride + 1
    out_w = (width + 2 * padding - kw) // stride + 1
    if out_h < 1 or out_w < 1:
        raise ShapeError("conv2d", x.shape, weight.shape)
    group_out = out_channels // groups

    padded = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    xg = padded.reshape(batch, groups, group_in, padded.shape[2], padded.shape[3])
    wg = weight.data.reshape(groups, group_out, group_in, kh, kw)
    out = np.zeros((batch, groups, group_out, out_h, out_w), dtype=np.result_type(x.data, weight.data))
    for i in range(kh):
        for j in range(kw):
            patch = xg[:, :, :, _window(i, stride, out_h), _window(j, stride, out_w)]
            out += np.einsum("bgchw,goc->bgohw", patch, wg[:, :, :, i, j], optimize=True)
    out = out.reshape(batch, out_channels, out_h, out_w)
    parents = [x, weight]
    if bias is not None:
        bias = _lift(bias)
        if bias.shape != (out_channels,):
            raise ShapeError("conv2d bias", bias.shape, (out_channels,))
        out = out + bias.data[None, :, None, None]
        parents.append(bias)

    def backward(g):
        gg = g.reshape(batch, groups, group_out, out_h, out_w)
        gx = np.zeros_like(xg)
        gw = np.zeros_like(wg)
        for i in range(kh):
            for j in range(kw):
                rows, cols = _window(i, stride, out_h), _window(j, stride, out_w)
                patch = xg[:, :, :, rows, cols]
                gw[:, :, :, i, j] = np.einsum("bgohw,bgchw->goc", gg, patch, optimize=True)
                gx[:, :, :, rows, cols] += np.einsum("bgohw,goc->bgchw", gg, wg[:, :, :, i, j], optimize=True)
        gx = gx.reshape(padded.shape)[:, :, padding:padding + height, padding:padding + width]
        grads = [gx, gw.reshape(weight.shape)]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return Tensor._result(out, parents, backward, "conv2d")


def conv_transpose2d(x, weight, bias=None, stride: int = 1, padding: int = 0,
                     output_padding: int = 0) -> Tensor:
    """Transposed convolution. x is (B, Cin, H, W); weight is (Cin, O, kh, kw)."""
    x, weight = _lift(x), _lift(weight)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[0]:
        raise ShapeError("conv_transpose2d", x.shape, weight.shape)
    batch, _, height, width = x.shape
    _, out_channels, kh, kw = weight.shape
    out_h = (height - 1) * stride - 2 * padding + kh + output_padding
    out_w = (width - 1) * stride - 2 * padding + kw + output_padding
    full_h = (height - 1) * stride + kh + output_padding
    full_w = (width - 1) * stride + kw + output_padding

    full = np.zeros((batch, out_channels, full_h, full_w), dtype=np.result_type(x.data, weight.data))
    for i in range(kh):
        for j in range(kw):
            full[:, :, _window(i, stride, height), _window(j, stride, width)] += np.einsum(
                "bchw,co->bohw", x.data, weight.data[:, :, i, j], optimize=True)
    out = full[:, :, padding:padding + out_h, padding:padding + out_w]
    parents = [x, weight]
    if bias is not None:
        bias = _lift(bias)
        if bias.shape != (out_channels,):
            raise ShapeError("conv_transpose2d bias", bias.shape, (out_channels,))
        out = out + bias.data[None, :, None, None]
        parents.append(bias)

    def backward(g):
        gfull = np.zeros_like(full)
        gfull[:, :, padding:padding + out_h, padding:padding + out_w] = g
        gx = np.zeros_like(x.data)
        gw = np.zeros_like(weight.data)
        for i in range(kh):
            for j in range(kw):
                patch = gfull[:, :, _window(i, stride, height), _window(j, stride, width)]
                gx += np.einsum("bohw,co->bchw", patch, weight.data[:, :, i, j], optimize=True)
                gw[:, :, i, j] = np.einsum("bchw,bohw->co", x.data, patch, optimize=True)
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return Tensor._result(np.array(out, copy=True), parents, backward, "conv_transpose2d")


# =============================================================================
# VERIFICATION AND DEBUGGING
# =============================================================================

def grad_check(f, x: Tensor, step: float = 1e-5, eps: float = 1e-6,
               max_coords: int = None, rng: np.random.Generator = None) -> float:
    """
    Compare the analytic gradient of scalar f at x with central differences.

    f is called with x and must return a scalar Tensor. x.data is perturbed in
    place, so closures that reference x directly see the perturbation too.

    Returns:
        max over checked coordinates of |analytic - numeric| / (|analytic| + |numeric| + eps)
    """
    if not x.requires_grad:
        raise ValueError("grad_check needs a tensor with requires_grad=True")
    x.grad = None
    loss = f(x)
    if not np.all(np.isfinite(loss.data)):
        raise ValueError(f"grad_check: f(x) is not finite ({loss.data})")
    loss.backward()
    analytic = np.zeros_like(x.data) if x.grad is None else np.array(x.grad, copy=True)

    coords = list(np.ndindex(*x.shape)) if x.ndim else [()]
    if max_coords is not None and len(coords) > max_coords:
        rng = rng or np.random.default_rng(0)
        picks = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[i] for i in sorted(picks)]

    worst = 0.0
    with no_grad():
        for idx in coords:
            original = x.data[idx].copy()
            x.data[idx] = original + step
            upper = f(x).item()
            x.data[idx] = original - step
            lower = f(x).item()
            x.data[idx] = original
            numeric = (upper - lower) / (2.0 * step)
            a = float(analytic[idx])
            error = abs(a - numeric) / (abs(a) + abs(numeric) + eps)
            worst = max(worst, error)
    logger.debug("grad_check over %d coordinates: max relative error %.3e", len(coords), worst)
    return worst


def dump_graph(root: Tensor, path) -> Path:
    """Write the recorded tape reachable from root to a text file, one node per line."""
    path = Path(path)
    order = _topological_order(root)
    names = {id(node): f"t{k}" for k, node in enumerate(order)}
    lines = []
    for node in order:
        inputs = ", ".join(names.get(id(p), "const") for p in node._parents)
        lines.append(f"{names[id(node)]} = {node.op}({inputs})  shape={tuple(node.shape)}")
    path.write_text("\n".join(lines) + "\n")
    return path
