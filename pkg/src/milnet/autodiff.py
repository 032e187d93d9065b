"""Reverse-mode automatic differentiation over dense float64 arrays.

The op set is exactly what the whole-image MIL pipeline needs: 2-D
cross-correlation, max pooling, pointwise nonlinearities, a shared channel
contraction, a descending sort, slicing, and scalar reductions.  A fresh
graph is built for every batch and discarded after the backward pass.
Tensors are treated as immutable once they enter a graph, and every kernel
uses a fixed reduction order, so repeated runs on identical inputs produce
bitwise-identical values and gradients.

Subgradient conventions: relu'(0) = 0, max pooling and the sort break ties
toward the smallest original index, clamp has zero gradient at and outside
its bounds, and the L1 norm uses sign(0) = 0.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "add",
    "add_n",
    "add_channel_bias",
    "affine_channel",
    "clamp",
    "const_minus",
    "conv2d",
    "l1_norm",
    "l2_norm_sq",
    "log",
    "maxpool2d",
    "reduce_sum",
    "relu",
    "reshape",
    "scale",
    "sigmoid",
    "slice1d",
    "sort_descending",
    "take_row",
]


class Tensor:
    """A float64 array plus the bookkeeping for reverse-mode differentiation.

    ``grad`` is populated by :meth:`backward` and holds an array of the same
    shape as ``data``.  Leaf tensors are created directly; interior nodes are
    created by the op functions in this module and carry a closure that
    routes the upstream gradient to their parents.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag})"

    def _accumulate(self, contribution: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += contribution

    def backward(self) -> None:
        """Run reverse-mode accumulation from this scalar node.

        Visits every reachable node exactly once, in reverse topological
        order.  Gradients accumulate into ``.grad`` of every tensor on the
        path that has ``requires_grad`` set.
        """
        if self.data.shape != ():
            raise ValueError(
                f"backward() requires a scalar node, got shape {self.data.shape}"
            )
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        self.grad = np.asarray(1.0)
        for node in reversed(topo):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward_fn = backward_fn
    return out


# ---------------------------------------------------------------------------
# convolution and pooling

_conv_index_cache: dict[tuple, np.ndarray] = {}


def _patch_indices(pw: int, kh: int, kw: int, oh: int, ow: int, stride: int) -> np.ndarray:
    """Flat padded-input indices of every (output position, kernel tap) pair.

    Shape (oh*ow, kh*kw); cached per geometry so repeated training steps pay
    for the index arithmetic once.
    """
    key = (pw, kh, kw, oh, ow, stride)
    idx = _conv_index_cache.get(key)
    if idx is None:
        rows = np.arange(oh)[:, None, None, None] * stride + np.arange(kh)[None, None, :, None]
        cols = np.arange(ow)[None, :, None, None] * stride + np.arange(kw)[None, None, None, :]
        idx = (rows * pw + cols).reshape(oh * ow, kh * kw)
        _conv_index_cache[key] = idx
    return idx


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of an NCHW batch with an OIKhKw kernel.

    No kernel flip is applied.  Backward produces exact gradients with
    respect to both the input and the kernel.
    """
    if x.ndim != 4 or kernel.ndim != 4:
        raise ValueError(
            f"conv2d expects 4-D input and kernel, got {x.shape} and {kernel.shape}"
        )
    n, c, h, w = x.shape
    o, ci, kh, kw = kernel.shape
    if ci != c:
        raise ValueError(
            f"conv2d channel mismatch: input {x.shape} has {c} channels, "
            f"kernel {kernel.shape} expects {ci}"
        )
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ValueError(
            f"conv2d output would be empty: input {x.shape}, kernel {kernel.shape}, "
            f"stride {stride}, padding {padding}"
        )
    if padding:
        padded = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        padded = x.data
    ph, pw = padded.shape[2:]
    idx = _patch_indices(pw, kh, kw, oh, ow, stride)
    # cols[n, p, c*kh*kw] holds the receptive field of output position p
    cols = padded.reshape(n, c, ph * pw)[:, :, idx]
    cols = cols.transpose(0, 2, 1, 3).reshape(n, oh * ow, c * kh * kw)
    wmat = kernel.data.reshape(o, c * kh * kw)
    out = (cols @ wmat.T).transpose(0, 2, 1).reshape(n, o, oh, ow)

    def backward(grad: np.ndarray) -> None:
        g = grad.reshape(n, o, oh * ow).transpose(0, 2, 1)
        if kernel.requires_grad:
            gw = np.einsum("npo,npk->ok", g, cols)
            kernel._accumulate(gw.reshape(o, c, kh, kw))
        if x.requires_grad:
            gcols = (g @ wmat).reshape(n, oh * ow, c, kh * kw).transpose(0, 2, 1, 3)
            gpad = np.zeros((n, c, ph * pw))
            np.add.at(gpad, (slice(None), slice(None), idx), gcols)
            gpad = gpad.reshape(n, c, ph, pw)
            if padding:
                gpad = gpad[:, :, padding:padding + h, padding:padding + w]
            x._accumulate(gpad)

    return _node(out, (x, kernel), backward)


def maxpool2d(x: Tensor, window: int, stride: int) -> Tensor:
    """Per-window max over an NCHW batch.

    Gradient is routed only to the argmax element of each window; ties go to
    the first element in row-major window order (the smallest original
    index).
    """
    if x.ndim != 4:
        raise ValueError(f"maxpool2d expects 4-D input, got {x.shape}")
    n, c, h, w = x.shape
    if window > h or window > w:
        raise ValueError(
            f"maxpool2d window {window} exceeds spatial dims of input {x.shape}"
        )
    oh = (h - window) // stride + 1
    ow = (w - window) // stride + 1
    view = np.lib.stride_tricks.sliding_window_view(x.data, (window, window), axis=(2, 3))
    view = view[:, :, ::stride, ::stride]
    flat = view.reshape(n, c, oh, ow, window * window)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(grad: np.ndarray) -> None:
        if not x.requires_grad:
            return
        ky, kx = arg // window, arg % window
        iy = np.arange(oh)[None, None, :, None] * stride + ky
        ix = np.arange(ow)[None, None, None, :] * stride + kx
        gx = np.zeros((n, c, h * w))
        nn = np.arange(n)[:, None, None, None]
        cc = np.arange(c)[None, :, None, None]
        np.add.at(gx, (nn, cc, iy * w + ix), grad)
        x._accumulate(gx.reshape(n, c, h, w))

    return _node(out, (x,), backward)


# ---------------------------------------------------------------------------
# pointwise ops

def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)

    def backward(grad: np.ndarray) -> None:
        if x.requires_grad:
            x._accumulate(grad * (x.data > 0.0))

    return _node(out, (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    """Numerically stable logistic function; no overflow for |x| <= 700."""
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ez = np.exp(d[~pos])
    out[~pos] = ez / (1.0 + ez)

    def backward(grad: np.ndarray) -> None:
        if x.requires_grad:
            x._accumulate(grad * out * (1.0 - out))

    return _node(out, (x,), backward)


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clip into [lo, hi]; gradient passes only where the input is strictly inside."""
    out = np.clip(x.data, lo, hi)

    def backward(grad: np.ndarray) -> None:
        if x.requires_grad:
            x._accumulate(grad * ((x.data > lo) & (x.data < hi)))

    return _node(out, (x,), backward)


def log(x: Tensor) -> Tensor:
    """Natural log; rejects nonpositive inputs (callers clamp upstream)."""
    if np.any(x.data <= 0.0):
        raise ValueError("log requires strictly positive input")
    out = np.log(x.data)

    def backward(grad: np.ndarray) -> None:
        if x.requires_grad:
            x._accumulate(grad / x.data)

    return _node(out, (x,), backward)


def affine_channel(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Contract the channel axis of an NCHW tensor with a shared weight vector.

    out[n, h, w] = sum_c weight[c] * x[n, c, h, w] + bias, with the same
    weight and bias at every spatial position.
    """
    if x.ndim != 4:
        raise ValueError(f"affine_channel expects NCHW input, got {x.shape}")
    if weight.ndim != 1 or weight.shape[0] != x.shape[1]:
        raise ValueError(
            f"affine_channel weight length {weight.shape} does not match "
            f"channel count of input {x.shape}"
        )
    out = np.einsum("nchw,c->nhw", x.data, weight.data) + bias.data

    def backward(grad: np.ndarray) -> None:
        if x.requires_grad:
            x._accumulate(grad[:, None, :, :] * weight.data[None, :, None, None])
        if weight.requires_grad:
            weight._accumulate(np.einsum("nchw,nhw->c", x.data, grad))
        if bias.requires_grad:
            bias._accumulate(np.asarray(grad.sum()))

    return _node(out, (x, weight, bias), backward)


def add_channel_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a per-channel bias vector to an NCHW tensor."""
    if bias.ndim != 1 or bias.shape[0] != x.shape[1]:
        raise ValueError(
            f"bias length {bias.shape} does not match channel count of {x.shape}"
        )
    out = x.data + bias.data[None, :, None, None]

    def backward(grad: np.ndarray) -> None:
        if x.requires_grad:
            x._accumulate(grad)
        if bias.requires_grad:
            bias._accumulate(grad.sum(axis=(0, 2, 3)))

    return _node(out, (x, bias), backward)


# ---------------------------------------------------------------------------
# shape ops

def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = x.data.reshape(shape)

    def backward(grad: np.ndarray) -> None:
        if x.requires_grad:
            x._accumulate(grad.reshape(x.data.shape))

    return _node(out, (x,), backward)


def take_row(x: Tensor, i: int) -> Tensor:
    """Select row i of a 2-D tensor as a 1-D tensor."""
    if x.ndim != 2:
        raise ValueError(f"take_row expects a 2-D tensor, got {x.shape}")
    out = x.data[i].copy()

    def backward(grad: np.ndarray) -> None:
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            gx[i] = grad
            x._accumulate(gx)

    return _node(out, (x,), backward)


def slice1d(x: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous slice of a 1-D tensor."""
    if x.ndim != 1:
        raise ValueError(f"slice1d expects a 1-D tensor, got {x.shape}")
    out = x.data[start:stop].copy()

    def backward(grad: np.ndarray) -> None:
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            gx[start:stop] = grad
            x._accumulate(gx)

    return _node(out, (x,), backward)


def sort_descending(x: Tensor) -> tuple[Tensor, np.ndarray]:
    """Sort a 1-D tensor into nonincreasing order.

    Returns the sorted tensor and the permutation such that
    sorted[j] == x[perm[j]].  Ties keep the smaller original index first.
    Backward routes the upstream gradient through the permutation, which is
    exact because sorting is locally a fixed permutation.
    """
    if x.ndim != 1:
        raise ValueError(f"sort_descending expects a 1-D tensor, got {x.shape}")
    if x.data.size == 0:
        raise ValueError("sort_descending requires a nonempty vector")
    perm = np.argsort(-x.data, kind="stable")
    out = x.data[perm]

    def backward(grad: np.ndarray) -> None:
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            gx[perm] = grad
            x._accumulate(gx)

    return _node(out, (x,), backward), perm


# ---------------------------------------------------------------------------
# reductions and scalar algebra

def reduce_sum(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum())

    def backward(grad: np.ndarray) -> None:
        if x.requires_grad:
            x._accumulate(np.full_like(x.data, float(grad)))

    return _node(out, (x,), backward)


def l1_norm(x: Tensor) -> Tensor:
    """Sum of absolute values; subgradient sign(x) with sign(0) = 0."""
    out = np.asarray(np.abs(x.data).sum())

    def backward(grad: np.ndarray) -> None:
        if x.requires_grad:
            x._accumulate(float(grad) * np.sign(x.data))

    return _node(out, (x,), backward)


def l2_norm_sq(x: Tensor) -> Tensor:
    out = np.asarray((x.data * x.data).sum())

    def backward(grad: np.ndarray) -> None:
        if x.requires_grad:
            x._accumulate(2.0 * float(grad) * x.data)

    return _node(out, (x,), backward)


def scale(x: Tensor, c: float) -> Tensor:
    out = x.data * c

    def backward(grad: np.ndarray) -> None:
        if x.requires_grad:
            x._accumulate(grad * c)

    return _node(out, (x,), backward)


def const_minus(c: float, x: Tensor) -> Tensor:
    """Elementwise c - x."""
    out = c - x.data

    def backward(grad: np.ndarray) -> None:
        if x.requires_grad:
            x._accumulate(-grad)

    return _node(out, (x,), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}")
    out = a.data + b.data

    def backward(grad: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(grad)
        if b.requires_grad:
            b._accumulate(grad)

    return _node(out, (a, b), backward)


def add_n(tensors: list[Tensor]) -> Tensor:
    """Sum a nonempty list of same-shape tensors, left to right."""
    if not tensors:
        raise ValueError("add_n requires at least one tensor")
    out = tensors[0].data.copy()
    for t in tensors[1:]:
        out = out + t.data

    def backward(grad: np.ndarray) -> None:
        for t in tensors:
            if t.requires_grad:
                t._accumulate(grad)

    return _node(out, tuple(tensors), backward)
