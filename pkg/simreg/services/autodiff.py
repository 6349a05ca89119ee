"""
Minimal reverse-mode automatic differentiation over dense numpy tensors

Every operation records its parents and a closure that pushes the upstream
gradient to them; Tensor.backward() walks the graph once in reverse
topological order. Tensors are single-owner: build a graph, call backward
once, read the leaf gradients.

Layout: activations are (C, D0, D1, D2) with no batch axis (batch size 1).
Everything runs in float64.
"""
from itertools import product
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from simreg.services import metrics
from simreg.services.resampler import identity_grid, trilinear_sample, trilinear_sample_grads


class Tensor:
    """Array value plus gradient bookkeeping"""

    def __init__(self, data, requires_grad: bool = False, parents: Sequence["Tensor"] = (), op: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents = tuple(parents)
        self._backward: Optional[Callable[[], None]] = None
        self._op = op

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate(self, grad: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(grad, dtype=np.float64, copy=True)
        else:
            self.grad += grad

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Populate .grad on every tracked ancestor (each node visited once)"""
        order = []
        visited = set()
        stack = [(self, False)]
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

        self.accumulate(np.ones_like(self.data) if grad is None else grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward()

    # operators -----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, -1.0 * as_tensor(other))

    def __rsub__(self, other):
        return add(as_tensor(other), -1.0 * self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op or 'leaf'}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Iterable[Tensor], op: str) -> Tensor:
    parents = tuple(parents)
    return Tensor(data, requires_grad=any(p.requires_grad for p in parents), parents=parents, op=op)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ============= ELEMENTWISE =============

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _node(a.data + b.data, (a, b), "add")

    def backward():
        a.accumulate(_unbroadcast(out.grad, a.shape))
        b.accumulate(_unbroadcast(out.grad, b.shape))
    out._backward = backward
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _node(a.data * b.data, (a, b), "mul")

    def backward():
        a.accumulate(_unbroadcast(out.grad * b.data, a.shape))
        b.accumulate(_unbroadcast(out.grad * a.data, b.shape))
    out._backward = backward
    return out


def total(x: Tensor) -> Tensor:
    out = _node(np.sum(x.data), (x,), "sum")

    def backward():
        x.accumulate(np.broadcast_to(out.grad, x.shape))
    out._backward = backward
    return out


def mean(x: Tensor) -> Tensor:
    return mul(total(x), 1.0 / x.data.size)


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    positive = x.data > 0
    out = _node(np.where(positive, x.data, slope * x.data), (x,), "leaky_relu")

    def backward():
        x.accumulate(np.where(positive, out.grad, slope * out.grad))
    out._backward = backward
    return out


def softmax(x: Tensor, axis: int = 0) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)
    out = _node(s, (x,), "softmax")

    def backward():
        g = out.grad
        x.accumulate(s * (g - np.sum(g * s, axis=axis, keepdims=True)))
    out._backward = backward
    return out


# ============= SHAPE =============

def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    out = _node(np.concatenate([t.data for t in tensors], axis=axis), tensors, "concat")

    def backward():
        pieces = np.split(out.grad, np.cumsum(sizes)[:-1], axis=axis)
        for t, g in zip(tensors, pieces):
            t.accumulate(g)
    out._backward = backward
    return out


def crop(x: Tensor, dims) -> Tensor:
    """Keep the leading dims[a] voxels of each spatial axis"""
    index = (slice(None),) + tuple(slice(0, int(d)) for d in dims)
    out = _node(x.data[index], (x,), "crop")

    def backward():
        g = np.zeros_like(x.data)
        g[index] = out.grad
        x.accumulate(g)
    out._backward = backward
    return out


# ============= CONVOLUTION / RESAMPLING =============

def conv3d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1) -> Tensor:
    """
    3x3x3 convolution, zero padding 1.

    x: (Cin, D0, D1, D2); weight: (Cout, Cin, 3, 3, 3); bias: (Cout,)
    Output spatial size is (n - 1) // stride + 1 per axis.
    """
    xd, wd = x.data, weight.data
    if wd.shape[1] != xd.shape[0] or wd.shape[2:] != (3, 3, 3):
        raise ValueError(f"conv3d shape mismatch: input {xd.shape}, kernel {wd.shape}")
    xp = np.pad(xd, ((0, 0), (1, 1), (1, 1), (1, 1)))
    out_dims = tuple((n - 1) // stride + 1 for n in xd.shape[1:])

    def window(k):
        return (slice(None),) + tuple(
            slice(k[a], k[a] + stride * out_dims[a], stride) for a in range(3)
        )

    offsets = list(product(range(3), repeat=3))
    result = np.empty((wd.shape[0],) + out_dims)
    result[:] = bias.data.reshape(-1, 1, 1, 1)
    for k in offsets:
        result += np.tensordot(wd[(slice(None), slice(None)) + k], xp[window(k)], axes=(1, 0))
    out = _node(result, (x, weight, bias), "conv3d")

    def backward():
        g = out.grad
        bias.accumulate(g.sum(axis=(1, 2, 3)))
        if weight.requires_grad:
            grad_w = np.zeros_like(wd)
            for k in offsets:
                grad_w[(slice(None), slice(None)) + k] = np.tensordot(
                    g, xp[window(k)], axes=([1, 2, 3], [1, 2, 3]))
            weight.accumulate(grad_w)
        if x.requires_grad:
            grad_xp = np.zeros_like(xp)
            for k in offsets:
                grad_xp[window(k)] += np.tensordot(wd[(slice(None), slice(None)) + k], g, axes=(0, 0))
            x.accumulate(grad_xp[:, 1:-1, 1:-1, 1:-1])
    out._backward = backward
    return out


def upsample_matrix(n: int) -> np.ndarray:
    """(2n, n) linear interpolation matrix, half-voxel aligned, edge clamped"""
    rows = np.zeros((2 * n, n))
    if n == 1:
        rows[:, 0] = 1.0
        return rows
    coords = np.clip((np.arange(2 * n) + 0.5) / 2.0 - 0.5, 0.0, n - 1)
    lower = np.minimum(np.floor(coords).astype(np.int64), n - 2)
    frac = coords - lower
    rows[np.arange(2 * n), lower] = 1.0 - frac
    rows[np.arange(2 * n), lower + 1] += frac
    return rows


def _apply_per_axis(data: np.ndarray, matrices) -> np.ndarray:
    for axis, m in enumerate(matrices, start=1):
        data = np.moveaxis(np.tensordot(m, data, axes=(1, axis)), 0, axis)
    return data


def upsample2x(x: Tensor) -> Tensor:
    """Separable trilinear upsampling by 2 along every spatial axis"""
    matrices = [upsample_matrix(n) for n in x.shape[1:]]
    out = _node(_apply_per_axis(x.data, matrices), (x,), "upsample2x")

    def backward():
        x.accumulate(_apply_per_axis(out.grad, [m.T for m in matrices]))
    out._backward = backward
    return out


def warp(image: Tensor, field: Tensor) -> Tensor:
    """
    Differentiable backward warp: out(p) = image(p + field(p)), trilinear,
    edge clamp. image is (D0, D1, D2) or (C, D0, D1, D2); field is (3, D0, D1, D2).
    """
    image, field = as_tensor(image), as_tensor(field)
    coords = identity_grid(field.shape[1:]) + field.data
    out = _node(trilinear_sample(image.data, coords), (image, field), "warp")

    def backward():
        grad_image, grad_coords = trilinear_sample_grads(image.data, coords, out.grad,
                                                         need_data=image.requires_grad)
        image.accumulate(grad_image)
        field.accumulate(grad_coords)
    out._backward = backward
    return out


# ============= LOSS NODES =============

def field_epe(f: Tensor, f_g) -> Tensor:
    """
    Mean per-voxel L2 norm of f - f_g.

    Gradient (f - f_g) / (|Omega| |f - f_g|); subgradient 0 where f == f_g.
    """
    f, f_g = as_tensor(f), as_tensor(f_g)
    diff = f.data - f_g.data
    norm = np.sqrt(np.sum(diff ** 2, axis=0))
    count = norm.size
    out = _node(np.mean(norm), (f, f_g), "field_epe")

    def backward():
        safe = np.where(norm > 0, norm, 1.0)
        g = np.where(norm > 0, 1.0, 0.0) * diff / (count * safe) * out.grad
        f.accumulate(g)
        f_g.accumulate(-g)
    out._backward = backward
    return out


def local_ncc_loss(fixed, recon, window: int) -> Tensor:
    """Negative mean squared local correlation; forward equals -metrics.nlcc"""
    a, b = as_tensor(fixed), as_tensor(recon)
    metrics.check_window(a.shape, window)
    cc, cross, var_a, var_b, mean_a, mean_b = metrics.local_cc_terms(a.data, b.data, window)
    count = cc.size
    out = _node(-np.mean(cc), (a, b), "local_ncc")

    def backward():
        scale = -float(out.grad) / count
        denom = var_a * var_b + metrics.NLCC_EPS
        alpha = 2.0 * cross / denom
        adj = metrics.box_sum_adjoint
        if b.requires_grad:
            beta = -2.0 * cross ** 2 * var_a / denom ** 2
            g = (a.data * adj(alpha, window) - adj(alpha * mean_a, window)
                 + b.data * adj(beta, window) - adj(beta * mean_b, window))
            b.accumulate(scale * g)
        if a.requires_grad:
            beta = -2.0 * cross ** 2 * var_b / denom ** 2
            g = (b.data * adj(alpha, window) - adj(alpha * mean_b, window)
                 + a.data * adj(beta, window) - adj(beta * mean_a, window))
            a.accumulate(scale * g)
    out._backward = backward
    return out


def soft_dice_loss(pred, truth, smooth: float = 1e-5) -> Tensor:
    """
    -(1/C) sum_c (2 sum p t + s) / (sum (p + t) + s) over (C, D0, D1, D2) maps.
    """
    p, t = as_tensor(pred), as_tensor(truth)
    axes = tuple(range(1, p.data.ndim))
    num = 2.0 * np.sum(p.data * t.data, axis=axes) + smooth
    den = np.sum(p.data + t.data, axis=axes) + smooth
    classes = p.shape[0]
    out = _node(-np.sum(num / den) / classes, (p, t), "soft_dice")

    def backward():
        shape = (-1,) + (1,) * len(axes)
        scale = -float(out.grad) / classes
        ratio = (num / den ** 2).reshape(shape)
        inv_den = (1.0 / den).reshape(shape)
        p.accumulate(scale * (2.0 * t.data * inv_den - ratio))
        t.accumulate(scale * (2.0 * p.data * inv_den - ratio))
    out._backward = backward
    return out


# ============= GRADIENT CHECKING =============

def finite_difference_grad(fn: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-4,
                           indices: Optional[Sequence[tuple]] = None) -> np.ndarray:
    """
    Central-difference gradient of a scalar function.

    When indices is given only those entries are probed (others stay 0).
    """
    x = np.array(x, dtype=np.float64, copy=True)
    grad = np.zeros_like(x)
    probe = indices if indices is not None else list(np.ndindex(x.shape))
    for idx in probe:
        original = x[idx]
        x[idx] = original + eps
        plus = fn(x)
        x[idx] = original - eps
        minus = fn(x)
        x[idx] = original
        grad[idx] = (plus - minus) / (2.0 * eps)
    return grad
