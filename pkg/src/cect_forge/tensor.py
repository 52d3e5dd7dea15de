"""Dense float64 tensors with reverse-mode differentiation.

Only the operations the encoder/decoder and its loss need are provided:
convolution (3x3 and 1x1, same padding, stride 1 or 2), 2x2 stride-2
transposed convolution, batch normalization, ReLU, a steep sigmoid,
masking, a clamped binary cross entropy (also fused with the sigmoid in log
space) and a handful of elementwise and reduction ops.

Every op returns a new :class:`Tensor`. When at least one input requires a
gradient, the output remembers its parents and a vector-Jacobian product;
:meth:`Tensor.backward` walks that graph once in reverse topological order.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64
SIGMOID_CLAMP = 60.0
LOG_CLAMP = 1e-12


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class TensorUsageError(RuntimeError):
    """Raised when the differentiation API is misused."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _vjp=None, op="leaf"):
        arr = np.array(data, dtype=DTYPE, copy=True) if not isinstance(data, np.ndarray) or data.dtype != DTYPE else data
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op = op
        self._parents: tuple[Tensor, ...] = tuple(_parents)
        self._vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = _vjp

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], vjp, op: str) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, _parents=parents, _vjp=vjp, op=op)
    return Tensor(data, op=op)


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` that carry a gradient, inputs first."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in reversed(node._parents):
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``grad`` of every leaf requiring it."""
    if loss.data.size != 1:
        raise TensorUsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise TensorUsageError("loss does not depend on any tensor requiring grad")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), vjp, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), vjp, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), vjp, "mul")


def scale(x: Tensor, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)
    return _make(x.data * c, (x,), lambda g: (g * c,), "scale")


def square(x: Tensor) -> Tensor:
    x = as_tensor(x)
    return _make(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,), "square")


def sqrt(x: Tensor) -> Tensor:
    """Square root; the gradient at exactly 0 is taken as 0."""
    x = as_tensor(x)
    out = np.sqrt(x.data)

    def vjp(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(out > 0, 0.5 / np.where(out > 0, out, 1.0), 0.0)
        return (g * d,)

    return _make(out, (x,), vjp, "sqrt")


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    on = x.data > 0
    # np.maximum propagates NaN; a where() on ``on`` would silently zero it
    return _make(np.maximum(x.data, 0.0), (x,), lambda g: (g * on,), "relu")


def steep_sigmoid(x: Tensor, s: float, v_th: float) -> Tensor:
    """``1 / (1 + exp(-s (x - v_th)))`` with the exponent clamped to +-60."""
    if s <= 0:
        raise ValueError(f"sigmoid steepness must be positive, got {s}")
    x = as_tensor(x)
    z = np.clip(s * (x.data - v_th), -SIGMOID_CLAMP, SIGMOID_CLAMP)
    y = 1.0 / (1.0 + np.exp(-z))
    return _make(y, (x,), lambda g: (g * s * y * (1.0 - y),), "steep_sigmoid")


def masked_select(x: Tensor, mask) -> Tensor:
    """Keep ``x`` where ``mask`` is true and write exact zeros elsewhere.

    ``mask`` is a constant; it may broadcast over leading (batch) axes. Values
    outside the mask never reach the output or the gradient, even if they are
    not finite.
    """
    x = as_tensor(x)
    m = np.asarray(mask.data if isinstance(mask, Tensor) else mask) != 0
    try:
        m = np.broadcast_to(m, x.shape)
    except ValueError:
        raise DimensionError(f"masked_select: mask {m.shape} does not broadcast to {x.shape}") from None
    return _make(np.where(m, x.data, 0.0), (x,), lambda g: (np.where(m, g, 0.0),), "masked_select")


def binary_cross_entropy(p: Tensor, target, mask=None, axis=None) -> Tensor:
    """Summed BCE of probabilities ``p`` against 0/1 ``target``.

    Both log arguments are clamped below at 1e-12. Pixels outside ``mask``
    contribute exactly 0. ``axis`` selects the reduction (default: all).
    """
    p = as_tensor(p)
    y = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=DTYPE)
    if np.broadcast_shapes(y.shape, p.shape) != p.shape:
        raise DimensionError(f"bce: target {y.shape} vs prediction {p.shape}")
    y = np.broadcast_to(y, p.shape)
    m = np.ones(p.shape, bool) if mask is None else np.broadcast_to(np.asarray(mask) != 0, p.shape)
    pos = np.maximum(p.data, LOG_CLAMP)
    neg = np.maximum(1.0 - p.data, LOG_CLAMP)
    per_px = np.where(m, -(y * np.log(pos) + (1.0 - y) * np.log(neg)), 0.0)
    out = per_px.sum(axis=axis)

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        dpos = np.where(p.data > LOG_CLAMP, 1.0 / pos, 0.0)
        dneg = np.where(1.0 - p.data > LOG_CLAMP, 1.0 / neg, 0.0)
        d = -(y * dpos - (1.0 - y) * dneg)
        return (np.where(m, g * d, 0.0),)

    return _make(np.asarray(out, dtype=DTYPE), (p,), vjp, "bce")


def sigmoid_bce(x: Tensor, target, s: float, v_th: float, mask=None, axis=None) -> Tensor:
    """``binary_cross_entropy(steep_sigmoid(x, s, v_th), target, mask, axis)`` evaluated in log space.

    Same function and clamp, but ``log(1 - sigmoid(z))`` is taken as
    ``-softplus(z)`` so large ``|z|`` does not lose precision to cancellation.
    """
    if s <= 0:
        raise ValueError(f"sigmoid steepness must be positive, got {s}")
    x = as_tensor(x)
    y = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=DTYPE)
    if np.broadcast_shapes(y.shape, x.shape) != x.shape:
        raise DimensionError(f"bce: target {y.shape} vs prediction {x.shape}")
    y = np.broadcast_to(y, x.shape)
    m = np.ones(x.shape, bool) if mask is None else np.broadcast_to(np.asarray(mask) != 0, x.shape)
    cap = -np.log(LOG_CLAMP)
    z = s * (x.data - v_th)
    neg_log_p = np.logaddexp(0.0, -z)      # -log sigmoid(z)
    neg_log_q = np.logaddexp(0.0, z)       # -log (1 - sigmoid(z))
    per_px = np.where(m, y * np.minimum(neg_log_p, cap) + (1.0 - y) * np.minimum(neg_log_q, cap), 0.0)
    out = per_px.sum(axis=axis)

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        sig = np.exp(-neg_log_p)
        sig_neg = np.exp(-neg_log_q)
        d = -y * np.where(neg_log_p < cap, sig_neg, 0.0) + (1.0 - y) * np.where(neg_log_q < cap, sig, 0.0)
        return (np.where(m, g * s * d, 0.0),)

    return _make(np.asarray(out, dtype=DTYPE), (x,), vjp, "sigmoid_bce")


# reductions and shape ------------------------------------------------------

def tsum(x: Tensor, axis=None) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis)

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(out, dtype=DTYPE), (x,), vjp, "sum")


def mean(x: Tensor) -> Tensor:
    return scale(tsum(x), 1.0 / as_tensor(x).size)


def divide(x: Tensor, d: np.ndarray) -> Tensor:
    """Divide by a constant array (no gradient w.r.t. ``d``)."""
    x = as_tensor(x)
    d = np.asarray(d, dtype=DTYPE)
    return _make(x.data / d, (x,), lambda g: (_unbroadcast(g / d, x.shape),), "divide")


# convolutions --------------------------------------------------------------

def _check_conv(x: Tensor, w: Tensor, b: Tensor | None, stride: int) -> None:
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise DimensionError(f"conv2d expects 4-d input and weight, got {x.shape} and {w.shape}")
    F, C, kh, kw = w.shape
    if x.shape[1] != C:
        raise DimensionError(f"conv2d: input has {x.shape[1]} channels, weight expects {C}")
    if kh != kw or kh % 2 == 0:
        raise DimensionError(f"conv2d: kernel must be square and odd, got {kh}x{kw}")
    if stride not in (1, 2):
        raise DimensionError(f"conv2d: stride must be 1 or 2, got {stride}")
    if x.shape[2] % stride or x.shape[3] % stride:
        raise DimensionError(f"conv2d: spatial size {x.shape[2:]} not divisible by stride {stride}")
    if b is not None and b.shape != (F,):
        raise DimensionError(f"conv2d: bias shape {b.shape}, expected ({F},)")


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1) -> Tensor:
    """Same-padded cross-correlation, ``x[N,C,H,W] * w[F,C,k,k] -> [N,F,H/s,W/s]``."""
    x, w = as_tensor(x), as_tensor(w)
    b = None if b is None else as_tensor(b)
    _check_conv(x, w, b, stride)
    N, C, H, W = x.shape
    F, _, k, _ = w.shape
    pad = k // 2
    Ho, Wo = H // stride, W // stride
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    # columns: (N*Ho*Wo, C*k*k)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(N * Ho * Wo, C * k * k)
    wmat = w.data.reshape(F, C * k * k)
    out = cols @ wmat.T
    if b is not None:
        out += b.data
    out = out.reshape(N, Ho, Wo, F).transpose(0, 3, 1, 2)

    def vjp(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(N * Ho * Wo, F)
        gw = (gmat.T @ cols).reshape(w.shape) if w.requires_grad else None
        gb = gmat.sum(axis=0) if b is not None and b.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (gmat @ wmat).reshape(N, Ho, Wo, C, k, k)
            gxp = np.zeros(xp.shape, dtype=DTYPE)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += (
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2))
            gx = gxp[:, :, pad:pad + H, pad:pad + W] if pad else gxp
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return _make(np.ascontiguousarray(out), parents, vjp, f"conv2d_{k}x{k}_s{stride}")


def conv2d_transpose(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """2x2 stride-2 transposed convolution, ``x[N,C,H,W], w[C,F,2,2] -> [N,F,2H,2W]``.

    Each input pixel is scattered through the kernel into its own 2x2 output
    block; blocks do not overlap, so no padding is involved.
    """
    x, w = as_tensor(x), as_tensor(w)
    b = None if b is None else as_tensor(b)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise DimensionError(f"conv2d_transpose expects 4-d tensors, got {x.shape} and {w.shape}")
    C, F, kh, kw = w.shape
    if (kh, kw) != (2, 2):
        raise DimensionError(f"conv2d_transpose: kernel must be 2x2, got {kh}x{kw}")
    if x.shape[1] != C:
        raise DimensionError(f"conv2d_transpose: input has {x.shape[1]} channels, weight expects {C}")
    if b is not None and b.shape != (F,):
        raise DimensionError(f"conv2d_transpose: bias shape {b.shape}, expected ({F},)")
    N, _, H, W = x.shape
    xmat = x.data.transpose(0, 2, 3, 1).reshape(N * H * W, C)
    wmat = w.data.reshape(C, F * 4)
    out = (xmat @ wmat).reshape(N, H, W, F, 2, 2).transpose(0, 3, 1, 4, 2, 5).reshape(N, F, 2 * H, 2 * W)
    if b is not None:
        out = out + b.data[None, :, None, None]

    def vjp(g):
        gmat = g.reshape(N, F, H, 2, W, 2).transpose(0, 2, 4, 1, 3, 5).reshape(N * H * W, F * 4)
        gx = (gmat @ wmat.T).reshape(N, H, W, C).transpose(0, 3, 1, 2) if x.requires_grad else None
        gw = (xmat.T @ gmat).reshape(w.shape) if w.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if b is not None and b.requires_grad else None
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return _make(np.ascontiguousarray(out), parents, vjp, "conv2d_transpose_2x2_s2")


# normalization -------------------------------------------------------------

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, momentum: float = BN_MOMENTUM,
               eps: float = BN_EPS) -> Tensor:
    """Per-channel batch normalization over (N, H, W).

    In training mode batch statistics are used and ``running_mean`` /
    ``running_var`` are updated in place as ``m * running + (1 - m) * batch``
    (the variance estimate is unbiased). In inference mode the running
    statistics are used and nothing is mutated.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.data.ndim != 4:
        raise DimensionError(f"batch_norm expects [N,C,H,W], got {x.shape}")
    C = x.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise DimensionError(f"batch_norm: gamma/beta must have shape ({C},)")
    bshape = (1, C, 1, 1)
    if training:
        count = x.shape[0] * x.shape[2] * x.shape[3]
        if count < 2:
            raise DimensionError("batch_norm needs at least 2 values per channel in training mode")
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mu
        running_var *= momentum
        running_var += (1.0 - momentum) * var * count / (count - 1)
    else:
        count = None
        mu, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(bshape)) * inv_std.reshape(bshape)
    out = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)

    def vjp(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        gxhat = g * gamma.data.reshape(bshape)
        if training:
            gx = (inv_std.reshape(bshape) / count) * (
                count * gxhat
                - gxhat.sum(axis=(0, 2, 3), keepdims=True)
                - xhat * (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True))
        else:
            gx = gxhat * inv_std.reshape(bshape)
        return gx, ggamma, gbeta

    return _make(out, (x, gamma, beta), vjp, "batch_norm")


# gradient checking -----------------------------------------------------------

def numerical_grad(f: Callable[[Tensor], Tensor], point: np.ndarray, step: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``point``."""
    point = np.array(point, dtype=DTYPE)
    flat = point.reshape(-1)
    out = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f(Tensor(point)).item()
        flat[i] = orig - step
        lo = f(Tensor(point)).item()
        flat[i] = orig
        out[i] = (hi - lo) / (2.0 * step)
    return out.reshape(point.shape)


def analytic_grad(f: Callable[[Tensor], Tensor], point: np.ndarray) -> np.ndarray:
    t = Tensor(np.array(point, dtype=DTYPE), requires_grad=True)
    y = f(t)
    if not y.requires_grad:
        return np.zeros_like(t.data)
    backward(y)
    return np.zeros_like(t.data) if t.grad is None else t.grad


def grad_check(f: Callable[[Tensor], Tensor], point, step: float = 1e-4) -> float:
    """Max over coordinates of ``|analytic - numeric| / max(1, |analytic|)``."""
    point = np.asarray(point.data if isinstance(point, Tensor) else point, dtype=DTYPE)
    a = analytic_grad(f, point)
    n = numerical_grad(f, point, step)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / np.maximum(1.0, np.abs(a))))
