"""Reverse-mode automatic differentiation over dense float arrays.

The op set is deliberately small: exactly what a kernel-modulated ConvNet
needs. 2D matmul, 2D cross-correlation, pointwise nonlinearities, axis
reductions, reshapes, and the per-channel broadcasting used by affine
normalization. Values default to float32; tests may widen to float64 via
``precision`` when running finite-difference oracles.

Gradient policy: repeated ``backward`` calls accumulate into ``grad``
buffers; callers zero them explicitly (``zero_grad``). Buffers are only
ever allocated for tensors reachable from the loss whose ``requires_grad``
is set, so frozen weights never hold gradient state.

All kernels use a fixed reduction order (numpy / a single BLAS path), so
results are bit-reproducible for identical inputs on the same build. The
``KM_DETERMINISTIC`` environment variable is honored for interface
compatibility: the engine has no nondeterministic kernels to switch, so
both settings run the same deterministic path.
"""

from __future__ import annotations

import os
from contextlib import contextmanager

import numpy as np

_default_dtype = np.float32


class AutodiffError(Exception):
    """Engine contract violation."""


class ShapeError(AutodiffError):
    """Operand shapes are incompatible for the requested op."""


def deterministic_mode() -> bool:
    """True unless KM_DETERMINISTIC=0. See module docstring."""
    return os.environ.get("KM_DETERMINISTIC", "1") != "0"


@contextmanager
def precision(dtype):
    """Temporarily change the dtype newly created tensors are cast to.

    Production code runs float32 end to end; gradient-check oracles use
    ``precision(np.float64)`` so finite differences are not drowned by
    rounding noise.
    """
    global _default_dtype
    prev = _default_dtype
    _default_dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _default_dtype = prev


def default_dtype():
    return _default_dtype


class Tensor:
    """A dense n-d float array plus an optional node on the gradient tape.

    ``data`` is row-major and owned by the tensor; treat it as immutable
    once the tensor participates in a graph (the optimizer mutates
    parameter data only between forward passes). ``grad_mask``, when set
    on a leaf, zeroes disallowed entries at accumulation time; it is how
    diagonal modulators keep their off-diagonal entries permanently
    untrainable.
    """

    __slots__ = ("data", "grad", "requires_grad", "grad_mask", "name",
                 "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.asarray(data)
        if arr.dtype != _default_dtype:
            arr = arr.astype(_default_dtype)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.grad_mask = None
        self.name = name
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad}{tag})"

    # -- graph construction -------------------------------------------------

    @staticmethod
    def _make(data, parents, backward):
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        out.grad_mask = None
        out.name = None
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    def _accumulate(self, g):
        if not self.requires_grad:
            return
        if self.grad_mask is not None:
            g = g * self.grad_mask
        if self.grad is None:
            # own a writable, dense copy; g may be a broadcast view
            self.grad = np.array(g, dtype=self.data.dtype)
        else:
            self.grad += g

    def backward(self):
        """Propagate d(self)/d(leaf) to every reachable trainable tensor.

        ``self`` must be a scalar (size 1). Gradients accumulate; callers
        reset buffers between steps.
        """
        if self.data.size != 1:
            raise AutodiffError(
                f"backward() requires a scalar loss, got shape {self.data.shape}")
        if not self.requires_grad:
            raise AutodiffError(
                "backward() on a tensor with no trainable ancestors")

        topo, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __truediv__(self, other):
        return div(self, _lift(other))

    def __rtruediv__(self, other):
        return div(_lift(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _lift(other))

    def reshape(self, *shape):
        if len(shape) == 1 and not isinstance(shape[0], int):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def _lift(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=_default_dtype))


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- arithmetic ---------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data + b.data

    def bwd(g):
        a._accumulate(_unbroadcast(g, a.data.shape))
        b._accumulate(_unbroadcast(g, b.data.shape))

    return Tensor._make(out_data, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data - b.data

    def bwd(g):
        a._accumulate(_unbroadcast(g, a.data.shape))
        b._accumulate(_unbroadcast(-g, b.data.shape))

    return Tensor._make(out_data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data * b.data

    def bwd(g):
        a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return Tensor._make(out_data, (a, b), bwd)


def div(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data / b.data

    def bwd(g):
        a._accumulate(_unbroadcast(g / b.data, a.data.shape))
        b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return Tensor._make(out_data, (a, b), bwd)


def neg(a: Tensor) -> Tensor:
    def bwd(g):
        a._accumulate(-g)

    return Tensor._make(-a.data, (a,), bwd)


def pow_const(a: Tensor, p: float) -> Tensor:
    """Elementwise a**p for a constant exponent."""
    out_data = a.data ** p

    def bwd(g):
        a._accumulate(g * p * a.data ** (p - 1))

    return Tensor._make(out_data, (a,), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(
            f"matmul expects 2D operands, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(
            f"matmul inner dimensions disagree: a axis 1 = {a.data.shape[1]}, "
            f"b axis 0 = {b.data.shape[0]}")
    out_data = a.data @ b.data

    def bwd(g):
        a._accumulate(g @ b.data.T)
        b._accumulate(a.data.T @ g)

    return Tensor._make(out_data, (a, b), bwd)


# -- pointwise nonlinearities --------------------------------------------------

ACTIVATIONS = ("tanh", "sin", "relu", "leaky_relu")


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)

    def bwd(g):
        a._accumulate(g * (1.0 - out_data * out_data))

    return Tensor._make(out_data, (a,), bwd)


def sin(a: Tensor) -> Tensor:
    out_data = np.sin(a.data)

    def bwd(g):
        a._accumulate(g * np.cos(a.data))

    return Tensor._make(out_data, (a,), bwd)


def relu(a: Tensor) -> Tensor:
    out_data = np.maximum(a.data, 0)

    def bwd(g):
        a._accumulate(g * (a.data > 0))

    return Tensor._make(out_data, (a,), bwd)


def leaky_relu(a: Tensor, slope: float = 0.1) -> Tensor:
    out_data = np.where(a.data > 0, a.data, a.data * slope)

    def bwd(g):
        a._accumulate(g * np.where(a.data > 0, 1.0, slope).astype(a.data.dtype))

    return Tensor._make(out_data, (a,), bwd)


def elementwise(kind: str, a: Tensor, slope: float = 0.1) -> Tensor:
    """Dispatch one of the four supported activations by name."""
    if kind == "tanh":
        return tanh(a)
    if kind == "sin":
        return sin(a)
    if kind == "relu":
        return relu(a)
    if kind == "leaky_relu":
        return leaky_relu(a, slope)
    raise AutodiffError(f"unknown activation kind {kind!r}; expected one of {ACTIVATIONS}")


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def bwd(g):
        a._accumulate(g * out_data)

    return Tensor._make(out_data, (a,), bwd)


def log(a: Tensor) -> Tensor:
    def bwd(g):
        a._accumulate(g / a.data)

    return Tensor._make(np.log(a.data), (a,), bwd)


# -- reductions & views --------------------------------------------------------

def sum_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        gg = g
        if not keepdims and axis is not None:
            gg = np.expand_dims(gg, axis)
        a._accumulate(np.broadcast_to(gg, a.data.shape))

    return Tensor._make(out_data, (a,), bwd)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out_data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else np.prod(
        [a.data.shape[i] for i in (axis if isinstance(axis, tuple) else (axis,))])

    def bwd(g):
        gg = g
        if not keepdims and axis is not None:
            gg = np.expand_dims(gg, axis)
        a._accumulate(np.broadcast_to(gg, a.data.shape) / count)

    return Tensor._make(out_data, (a,), bwd)


def reshape(a: Tensor, shape) -> Tensor:
    out_data = a.data.reshape(shape)

    def bwd(g):
        a._accumulate(g.reshape(a.data.shape))

    return Tensor._make(out_data, (a,), bwd)


def transpose(a: Tensor, axes) -> Tensor:
    out_data = a.data.transpose(axes)
    inverse = np.argsort(axes)

    def bwd(g):
        a._accumulate(g.transpose(inverse))

    return Tensor._make(out_data, (a,), bwd)


# -- convolution ---------------------------------------------------------------

def _conv_out_size(extent, k, stride, padding, axis_name):
    span = extent + 2 * padding - k
    if span < 0 or span % stride != 0:
        raise ShapeError(
            f"conv2d: ({axis_name} + 2*padding - kernel) = {span} is not a "
            f"non-negative multiple of stride={stride} "
            f"({axis_name}={extent}, kernel={k}, padding={padding})")
    return span // stride + 1


def _im2col(img: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int):
    """(N,C,Hp,Wp) -> (N, C*kh*kw, oh*ow) patch matrix via per-tap slab copies."""
    n, c = img.shape[:2]
    col = np.empty((n, c, kh, kw, oh, ow), dtype=img.dtype)
    for y in range(kh):
        ys = y + stride * oh
        for x in range(kw):
            col[:, :, y, x] = img[:, :, y:ys:stride, x:x + stride * ow:stride]
    return col.reshape(n, c * kh * kw, oh * ow)


def _conv_forward(x: np.ndarray, w: np.ndarray, stride: int, padding: int):
    """Raw cross-correlation kernel; dtype-preserving, fixed reduction order."""
    n, c, h, wd = x.shape
    kn, kc, kh, kw = w.shape
    oh = _conv_out_size(h, kh, stride, padding, "H")
    ow = _conv_out_size(wd, kw, stride, padding, "W")
    if padding:
        img = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        img = x
    col = _im2col(img, kh, kw, stride, oh, ow)
    out = np.matmul(w.reshape(kn, -1)[None], col)  # (N, kn, oh*ow) batched gemm
    return out.reshape(n, kn, oh, ow), img.shape, col


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Batched 2D cross-correlation of (B,C,H,W) inputs with (k_n,k_c,k_h,k_w) kernels.

    Differentiable with respect to both operands. Output spatial size must
    divide exactly: (H + 2*padding - k_h) % stride == 0.
    """
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(
            f"conv2d expects 4D input and weight, got {x.data.shape} and {w.data.shape}")
    if stride < 1 or padding < 0:
        raise AutodiffError(f"conv2d: stride={stride} must be >= 1, padding={padding} >= 0")
    n, c, h, wd = x.data.shape
    kn, kc, kh, kw = w.data.shape
    if c != kc:
        raise ShapeError(
            f"conv2d channel mismatch: input axis 1 has C={c}, weight axis 1 has k_c={kc}")
    out_data, img_shape, col = _conv_forward(x.data, w.data, stride, padding)
    oh, ow = out_data.shape[2], out_data.shape[3]

    def bwd(g):
        g3 = g.reshape(n, kn, oh * ow)
        if w.requires_grad:
            dw = np.matmul(g3, col.transpose(0, 2, 1)).sum(axis=0)
            w._accumulate(dw.reshape(w.data.shape))
        if x.requires_grad:
            dcol = np.matmul(w.data.reshape(kn, -1).T[None], g3)  # (N, C*kh*kw, P)
            dcol6 = dcol.reshape(n, c, kh, kw, oh, ow)
            dimg = np.zeros(img_shape, dtype=g.dtype)
            for yy in range(kh):
                ys = slice(yy, yy + stride * oh, stride)
                for xx in range(kw):
                    dimg[:, :, ys, xx:xx + stride * ow:stride] += dcol6[:, :, yy, xx]
            if padding:
                x._accumulate(dimg[:, :, padding:padding + h, padding:padding + wd])
            else:
                x._accumulate(dimg)

    return Tensor._make(out_data, (x, w), bwd)


# -- loss -----------------------------------------------------------------------

def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy of (B, K) logits against integer labels."""
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy expects (B, K) logits, got {logits.data.shape}")
    labels = np.asarray(labels)
    b = logits.data.shape[0]
    if labels.shape != (b,):
        raise ShapeError(
            f"cross_entropy labels shape {labels.shape} does not match batch {b}")
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    shifted = z - zmax
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    loss = -logp[np.arange(b), labels].mean(dtype=z.dtype)
    out_data = np.asarray(loss, dtype=z.dtype)

    def bwd(g):
        p = np.exp(logp)
        p[np.arange(b), labels] -= 1.0
        logits._accumulate(g * p / b)

    return Tensor._make(out_data, (logits,), bwd)


def softmax_probs(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax of raw logits (reporting helper, not on the tape)."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)
