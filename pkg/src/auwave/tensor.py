"""Dense tensors with tape-based reverse-mode differentiation.

Every differentiable op records its parents and a closure that maps the
output gradient to parent gradients. ``Tensor.backward`` walks the recorded
graph once in reverse topological order and then releases it, so a second
call on the same root is an error.

Only the ops the reconstruction networks need are provided. Heavy ops
(convolution, normalisation, softmax) carry fused analytic backward passes
instead of being composed from primitives.
"""
from __future__ import annotations

import contextlib
import contextvars
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .errors import ConfigError, DegenerateError, GraphError, NonFiniteError, ShapeError

DEFAULT_DTYPE = np.float32

_grad_enabled = contextvars.ContextVar("auwave_grad_enabled", default=True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (context-local, thread safe)."""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


def grad_enabled() -> bool:
    return _grad_enabled.get()


def _check_finite(arr: np.ndarray, op: str) -> None:
    # a finite sum is a cheap sufficient test; only scan element-wise on failure
    if arr.size and not np.isfinite(arr.sum(dtype=np.float64)):
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"{op} produced non-finite values")


class Tensor:
    """n-dimensional float array that can take part in differentiation."""

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._op = ""
        self._consumed = False

    # ------------------------------------------------------------------ basics
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return self.shape[0]

    # --------------------------------------------------------------- autodiff
    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf requiring grad."""
        if self.data.size != 1:
            raise GraphError(f"backward needs a scalar root, got shape {self.shape}")
        if not self.requires_grad:
            raise GraphError("root does not depend on any tensor requiring grad")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            if node._consumed:
                raise GraphError("graph already consumed by a previous backward call")
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if node._backward is None:
                if g is not None:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            if g is None:
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg
        for node in order:
            if node._backward is not None:
                node._backward = None
                node._parents = ()
                node._consumed = True
        self._consumed = True

    # ------------------------------------------------------------- operators
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
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data)
    out._op = op
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def _operand(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


# ---------------------------------------------------------------- elementwise
def add(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _operand(a, b)
    b = _operand(b, a)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _operand(a, b)
    b = _operand(b, a)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _operand(a, b)
    b = _operand(b, a)
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _result(ad * bd, (a, b), backward, "mul")


def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = x.shape
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).astype(x.dtype, copy=True),)

    return _result(np.asarray(out), (x,), backward, "sum")


def tmean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    n = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return tsum(x, axis=axis, keepdims=keepdims) * (1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    orig = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(orig),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _result(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _result(np.where(pos, x.data, 0).astype(x.dtype), (x,),
                   lambda g: (g * pos,), "relu")


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    pos = x.data >= 0
    scale = np.where(pos, 1.0, slope).astype(x.dtype)
    return _result(x.data * scale, (x,), lambda g: (g * scale,), "leaky_relu")


def silu(x: Tensor) -> Tensor:
    s = expit(x.data)
    xd = x.data
    return _result(xd * s, (x,), lambda g: (g * (s * (1.0 + xd * (1.0 - s))),), "silu")


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "leaky_relu":
        return leaky_relu(x, 0.2)
    if kind == "silu":
        return silu(x)
    if kind == "relu":
        return relu(x)
    raise ValueError(f"unknown activation {kind!r}")


# -------------------------------------------------------------------- linear
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading axes broadcast like ``np.matmul``."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _result(ad @ bd, (a, b), backward, "matmul")


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """``x @ w.T + b`` for x of shape (N, in) and w of shape (out, in)."""
    if x.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear expects (N, {w.shape[1]}) input, got {x.shape}")
    xd, wd = x.data, w.data
    out = xd @ wd.T
    if b is not None:
        out = out + b.data

    def backward(g):
        gx = g @ wd if x.requires_grad else None
        gw = g.T @ xd if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    parents = (x, w) if b is None else (x, w, b)
    return _result(out, parents, backward, "linear")


# --------------------------------------------------------------- convolution
def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """2-D cross-correlation of (N, C, H, W) input with (O, C, kh, kw) weights."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError("conv2d expects 4-D input and weight")
    N, C, H, W = x.shape
    O, Cw, kh, kw = w.shape
    if C != Cw:
        raise ShapeError(f"conv2d channel mismatch: input {C}, weight {Cw}")
    if kh not in (1, 3) or kw not in (1, 3) or stride not in (1, 2):
        raise ShapeError(f"unsupported conv geometry k=({kh},{kw}) stride={stride}")
    Ho = conv_output_size(H, kh, stride, padding)
    Wo = conv_output_size(W, kw, stride, padding)
    xd, wd = x.data, w.data

    if kh == 1 and kw == 1 and stride == 1 and padding == 0:
        w2 = wd.reshape(O, C)
        x3 = xd.reshape(N, C, H * W)
        out = np.matmul(w2, x3)
        if b is not None:
            out += b.data[None, :, None]

        def backward(g):
            g3 = g.reshape(N, O, H * W)
            gx = np.matmul(w2.T, g3).reshape(xd.shape) if x.requires_grad else None
            gw = np.tensordot(g3, x3, axes=([0, 2], [0, 2])).reshape(wd.shape) \
                if w.requires_grad else None
            if b is None:
                return gx, gw
            return gx, gw, g3.sum(axis=(0, 2))

        parents = (x, w) if b is None else (x, w, b)
        return _result(out.reshape(N, O, H, W), parents, backward, "conv2d")

    if kh == 3 and kw == 3 and stride == 1 and padding == 1:
        return _conv3x3_same(x, w, b)

    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    win = win[:, :, :Ho, :Wo]
    # im2col: rows are output pixels, columns are (C, kh, kw) patches
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(N * Ho * Wo, C * kh * kw)
    wmat = wd.reshape(O, C * kh * kw)
    out = cols @ wmat.T
    if b is not None:
        out += b.data
    out = np.ascontiguousarray(out.reshape(N, Ho, Wo, O).transpose(0, 3, 1, 2))
    pshape = xp.shape

    def backward(g):
        gm = g.transpose(0, 2, 3, 1).reshape(N * Ho * Wo, O)
        gw = (gm.T @ cols).reshape(wd.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = np.ascontiguousarray(
                (gm @ wmat).reshape(N, Ho, Wo, C, kh, kw).transpose(0, 3, 4, 5, 1, 2))
            gxp = np.zeros(pshape, dtype=xd.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += dcols[:, :, i, j]
            gx = gxp[:, :, padding:padding + H, padding:padding + W] if padding else gxp
        if b is None:
            return gx, gw
        return gx, gw, gm.sum(axis=0)

    parents = (x, w) if b is None else (x, w, b)
    return _result(out, parents, backward, "conv2d")


def _conv3x3_same(x: Tensor, w: Tensor, b: Optional[Tensor]) -> Tensor:
    """3x3, stride 1, padding 1 convolution as nine shifted GEMMs.

    The input is laid out channel-major and zero padded, (C, N*(H+2)*(W+2)).
    Output pixel (n, y, x) then sits at flat offset n*Hp*Wp + y*Wp + x and
    kernel tap (i, j) reads the input shifted by i*Wp + j, so every tap is a
    single (O, C) x (C, L) product over the whole batch.
    """
    xd, wd = x.data, w.data
    N, C, H, W = xd.shape
    O = wd.shape[0]
    Hp, Wp = H + 2, W + 2
    P = N * Hp * Wp
    L = P - 2 * Wp - 2
    offsets = [i * Wp + j for i in range(3) for j in range(3)]
    xp = np.zeros((C, N, Hp, Wp), dtype=xd.dtype)
    xp[:, :, 1:-1, 1:-1] = xd.transpose(1, 0, 2, 3)
    flat = xp.reshape(C, P)
    taps = np.ascontiguousarray(wd.transpose(2, 3, 0, 1)).reshape(9, O, C)
    acc = np.zeros((O, P), dtype=xd.dtype)
    for t, off in enumerate(offsets):
        acc[:, :L] += taps[t] @ flat[:, off:off + L]
    out = acc.reshape(O, N, Hp, Wp)[:, :, :H, :W].transpose(1, 0, 2, 3)
    if b is not None:
        out = out + b.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def backward(g):
        gflat = np.zeros((O, N, Hp, Wp), dtype=xd.dtype)
        gflat[:, :, :H, :W] = g.transpose(1, 0, 2, 3)
        gflat = gflat.reshape(O, P)[:, :L]
        gw = None
        if w.requires_grad:
            gtaps = np.empty((9, O, C), dtype=xd.dtype)
            for t, off in enumerate(offsets):
                gtaps[t] = gflat @ flat[:, off:off + L].T
            gw = gtaps.reshape(3, 3, O, C).transpose(2, 3, 0, 1)
        gx = None
        if x.requires_grad:
            back = (taps.transpose(0, 2, 1).reshape(9 * C, O) @ gflat).reshape(9, C, L)
            dflat = np.zeros((C, P), dtype=xd.dtype)
            for t, off in enumerate(offsets):
                dflat[:, off:off + L] += back[t]
            gx = dflat.reshape(C, N, Hp, Wp)[:, :, 1:-1, 1:-1].transpose(1, 0, 2, 3)
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    parents = (x, w) if b is None else (x, w, b)
    return _result(out, parents, backward, "conv2d")


# ------------------------------------------------------------- normalisation
def group_norm(x: Tensor, groups: int, scale: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    N, C = x.shape[:2]
    if C % groups:
        raise ConfigError(f"group_norm: {C} channels not divisible by {groups} groups")
    xd = x.data
    xg = xd.reshape(N, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    xc = xg - mu
    var = (xc * xc).mean(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xc * inv).reshape(xd.shape)
    bshape = (1, C) + (1,) * (xd.ndim - 2)
    sc, sh = scale.data.reshape(bshape), shift.data.reshape(bshape)
    out = xhat * sc + sh
    red = (0,) + tuple(range(2, xd.ndim))

    def backward(g):
        gx = None
        if x.requires_grad:
            dxhat = (g * sc).reshape(N, groups, -1)
            xh = xhat.reshape(N, groups, -1)
            gx = inv * (dxhat - dxhat.mean(axis=2, keepdims=True)
                        - xh * (dxhat * xh).mean(axis=2, keepdims=True))
            gx = gx.reshape(xd.shape)
        gs = (g * xhat).sum(axis=red)
        gb = g.sum(axis=red)
        return gx, gs, gb

    return _result(out, (x, scale, shift), backward, "group_norm")


def batch_norm_1d(x: Tensor, scale: Tensor, shift: Tensor, running_mean: np.ndarray,
                  running_var: np.ndarray, training: bool, momentum: float = 0.1,
                  eps: float = 1e-5) -> Tensor:
    """Batch normalisation over axis 0 of an (N, F) input.

    In training mode batch statistics (population variance) normalise the
    input and ``running_mean``/``running_var`` are updated in place; in
    inference mode the running statistics are used.
    """
    if x.ndim != 2:
        raise ShapeError(f"batch_norm_1d expects (N, F) input, got {x.shape}")
    xd = x.data
    N = xd.shape[0]
    sc, sh = scale.data, shift.data
    if training:
        if N < 2:
            raise DegenerateError("batch_norm_1d needs at least 2 samples in training mode")
        mu = xd.mean(axis=0)
        xc = xd - mu
        var = (xc * xc).mean(axis=0)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * (N / (N - 1))
    else:
        mu = running_mean.astype(xd.dtype)
        xc = xd - mu
        var = running_var.astype(xd.dtype)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * sc + sh

    def backward(g):
        gx = None
        if x.requires_grad:
            dxhat = g * sc
            if training:
                gx = inv * (dxhat - dxhat.mean(axis=0) - xhat * (dxhat * xhat).mean(axis=0))
            else:
                gx = dxhat * inv
        return gx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _result(out, (x, scale, shift), backward, "batch_norm_1d")


# ----------------------------------------------------------------- attention
def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, max-subtracted for stability."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    return _result(y, (x,), lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),),
                   "softmax")


# --------------------------------------------------------------------- shape
def upsample_nearest_2x(x: Tensor) -> Tensor:
    N, C, H, W = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)
    return _result(out, (x,), lambda g: (g.reshape(N, C, H, 2, W, 2).sum(axis=(3, 5)),),
                   "upsample")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != b.ndim or a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat_channels: incompatible shapes {a.shape} and {b.shape}")
    c1 = a.shape[1]
    out = np.concatenate([a.data, b.data.astype(a.dtype, copy=False)], axis=1)
    return _result(out, (a, b), lambda g: (g[:, :c1], g[:, c1:]), "concat")


# ---------------------------------------------------------------------- loss
def mse_loss(pred: Tensor, target, mask=None) -> Tensor:
    """Mean squared error over the elements where ``mask`` is 1.

    ``mask`` may be any array broadcastable to ``pred.shape``; the mean is
    taken over the broadcast count of unmasked elements.
    """
    t = target.data if isinstance(target, Tensor) else np.asarray(target)
    if t.shape != pred.shape:
        raise ShapeError(f"mse_loss: prediction {pred.shape} vs target {t.shape}")
    diff = pred.data - t.astype(pred.dtype, copy=False)
    if mask is None:
        count = diff.size
        weight = None
    else:
        m = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
        weight = np.broadcast_to(m.astype(pred.dtype, copy=False), pred.shape)
        count = float(weight.sum())
        if count == 0:
            raise DegenerateError("mse_loss: mask excludes every element")
        diff = diff * weight
    loss = np.asarray((diff * diff).sum(dtype=np.float64) / count, dtype=pred.dtype)
    scale = 2.0 / count

    def backward(g):
        gp = diff * (g * scale)
        if weight is not None:
            gp = gp * weight
        return (gp.astype(pred.dtype, copy=False),)

    return _result(loss, (pred,), backward, "mse_loss")
