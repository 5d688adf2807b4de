"""Dense tensors with reverse-mode automatic differentiation.

Covers exactly the operation set the segmentation network needs: conv2d
(strided/dilated, zero "same" padding), bilinear resizing, bilinear warping
by a flow field, group normalization, elementwise math, and reductions.
Arrays are NCHW for image-like data. Gradients are recorded on an explicit
:class:`Tape`; a tape and its tensors belong to a single thread.
"""

from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import expit


class ShapeError(ValueError):
    """Raised when operand shapes violate an operation's contract."""


_tls = threading.local()


def _tape_stack() -> list:
    stack = getattr(_tls, "tapes", None)
    if stack is None:
        stack = []
        _tls.tapes = stack
    return stack


def active_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """N-d array that can participate in gradient recording.

    ``grad`` is populated by :meth:`Tape.backward` and holds d(loss)/d(self)
    with the same shape as ``data``. Accumulation across multiple uses is a
    sum over all paths.
    """

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._tape: Optional[Tape] = None

    @property
    def shape(self):
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

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # Operator sugar; scalars are plain Python numbers, everything else must
    # be a same-shape Tensor.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return pow_const(self, exponent)


class _Op:
    __slots__ = ("inputs", "out", "backward_fn")

    def __init__(self, inputs, out, backward_fn):
        self.inputs = inputs
        self.out = out
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of operations for one reverse-mode sweep.

    Ops are appended in creation order, so every op's inputs precede it;
    :meth:`backward` walks the list once, in reverse.
    """

    def __init__(self):
        self._ops: list[_Op] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        assert popped is self, "tape stack corrupted (exited out of order)"
        return False

    def __len__(self) -> int:
        return len(self._ops)

    def backward(self, loss: Tensor) -> None:
        """Populate ``grad`` on every requires_grad tensor reachable from loss."""
        if loss.data.size != 1:
            raise ValueError(
                f"backward requires a scalar loss, got shape {tuple(loss.shape)}"
            )
        loss.grad = np.ones_like(loss.data)
        for op in reversed(self._ops):
            gout = op.out.grad
            if gout is None:
                continue
            in_grads = op.backward_fn(gout)
            for t, g in zip(op.inputs, in_grads):
                if g is None or not t.requires_grad:
                    continue
                # Never mutate in place: a backward rule may hand the same
                # array to several inputs.
                t.grad = g if t.grad is None else t.grad + g


def backward(loss: Tensor) -> None:
    """Run reverse-mode accumulation from a scalar loss through its tape."""
    if loss._tape is None:
        raise ValueError("loss is not connected to a tape")
    loss._tape.backward(loss)


def _result(out_data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable):
    tape = active_tape()
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs and tape is not None, dtype=out_data.dtype)
    if tape is not None and needs:
        tape._ops.append(_Op(tuple(inputs), out, backward_fn))
        out._tape = tape
    return out


def _as_pair(a, b):
    """Coerce (tensor, tensor-or-scalar) operands, enforcing equal shapes."""
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        if a.shape != b.shape:
            raise ShapeError(f"operand shapes differ: {a.shape} vs {b.shape}")
        return a, b, None
    if isinstance(a, Tensor):
        return a, None, float(b)
    if isinstance(b, Tensor):
        return b, None, float(a)
    raise TypeError("at least one operand must be a Tensor")


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b):
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        if a.shape != b.shape:
            raise ShapeError(f"add: operand shapes differ: {a.shape} vs {b.shape}")
        out = a.data + b.data
        return _result(out, (a, b), lambda g: (g, g))
    t, _, s = _as_pair(a, b)
    return _result(t.data + s, (t,), lambda g: (g,))


def sub(a, b):
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        if a.shape != b.shape:
            raise ShapeError(f"sub: operand shapes differ: {a.shape} vs {b.shape}")
        return _result(a.data - b.data, (a, b), lambda g: (g, -g))
    if isinstance(a, Tensor):
        s = float(b)
        return _result(a.data - s, (a,), lambda g: (g,))
    s = float(a)
    t = b
    return _result(s - t.data, (t,), lambda g: (-g,))


def neg(a: Tensor):
    return _result(-a.data, (a,), lambda g: (-g,))


def mul(a, b):
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        if a.shape != b.shape:
            raise ShapeError(f"mul: operand shapes differ: {a.shape} vs {b.shape}")
        ad, bd = a.data, b.data
        return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad))
    t, _, s = _as_pair(a, b)
    return _result(t.data * s, (t,), lambda g: (g * s,))


def div(a, b):
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        if a.shape != b.shape:
            raise ShapeError(f"div: operand shapes differ: {a.shape} vs {b.shape}")
        ad, bd = a.data, b.data
        out = ad / bd
        return _result(out, (a, b), lambda g: (g / bd, -g * ad / (bd * bd)))
    if isinstance(a, Tensor):
        s = float(b)
        return _result(a.data / s, (a,), lambda g: (g / s,))
    s = float(a)
    t = b
    td = t.data
    return _result(s / td, (t,), lambda g: (-g * s / (td * td),))


def pow_const(a: Tensor, exponent: float):
    """a ** exponent for a real constant exponent (a must be >= 0 when exponent < 1)."""
    e = float(exponent)
    if e == 0.0:
        out = np.ones_like(a.data)
        return _result(out, (a,), lambda g: (np.zeros_like(g),))
    ad = a.data
    out = ad ** e
    return _result(out, (a,), lambda g: (g * e * ad ** (e - 1.0),))


def log(a: Tensor):
    ad = a.data
    return _result(np.log(ad), (a,), lambda g: (g / ad,))


def sigmoid(a: Tensor):
    y = expit(a.data)
    return _result(y, (a,), lambda g: (g * y * (1.0 - y),))


def relu(a: Tensor):
    mask = a.data > 0
    return _result(a.data * mask, (a,), lambda g: (g * mask,))


def clip(a: Tensor, lo: float, hi: float):
    """Clamp to [lo, hi]; gradient passes through inside the interval, zero outside."""
    ad = a.data
    out = np.clip(ad, lo, hi)
    mask = (ad >= lo) & (ad <= hi)
    return _result(out, (a,), lambda g: (g * mask,))


def tensor_sum(a: Tensor):
    out = np.asarray(a.data.sum(), dtype=a.dtype)
    return _result(out, (a,), lambda g: (np.broadcast_to(g, a.shape).astype(a.dtype),))


def mean(a: Tensor):
    n = a.size
    out = np.asarray(a.data.mean(), dtype=a.dtype)
    return _result(out, (a,), lambda g: ((np.broadcast_to(g, a.shape) / n).astype(a.dtype),))


def spatial_mean(a: Tensor):
    """Mean over the trailing H, W axes of an NCHW tensor -> shape (N, C)."""
    if a.ndim != 4:
        raise ShapeError(f"spatial_mean expects NCHW, got shape {a.shape}")
    n_px = a.shape[2] * a.shape[3]
    out = a.data.mean(axis=(2, 3))
    return _result(
        out, (a,), lambda g: (np.broadcast_to(g[:, :, None, None] / n_px, a.shape).astype(a.dtype),)
    )


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = a.data.reshape(shape)
    return _result(out, (a,), lambda g: (g.reshape(a.shape),))


def concat_channels(tensors: Sequence[Tensor]):
    """Concatenate NCHW tensors along the channel axis."""
    if not tensors:
        raise ValueError("concat_channels needs at least one tensor")
    base = tensors[0]
    for t in tensors[1:]:
        if t.ndim != base.ndim or t.shape[0] != base.shape[0] or t.shape[2:] != base.shape[2:]:
            raise ShapeError(
                f"concat_channels: incompatible shapes {base.shape} vs {t.shape}"
            )
    out = np.concatenate([t.data for t in tensors], axis=1)
    splits = np.cumsum([t.shape[1] for t in tensors])[:-1]

    def backward_fn(g):
        return tuple(np.split(g, splits, axis=1))

    return _result(out, tuple(tensors), backward_fn)


# ---------------------------------------------------------------------------
# group normalization


def group_normalize(a: Tensor, groups: int = 4, eps: float = 1e-5):
    """Normalize each (sample, channel-group) slice to zero mean, unit variance."""
    N, C = a.shape[0], a.shape[1]
    if C % groups != 0:
        raise ShapeError(f"group_normalize: {C} channels not divisible by {groups} groups")
    xg = a.data.reshape(N, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xg - mu) * inv
    out = xhat.reshape(a.shape).astype(a.dtype)

    def backward_fn(g):
        gg = g.reshape(N, groups, -1)
        # d/dx of (x - mu)/sigma with mu, sigma over the group:
        # (1/sigma) * (g - mean(g) - xhat * mean(g * xhat))
        gm = gg.mean(axis=2, keepdims=True)
        gxm = (gg * xhat).mean(axis=2, keepdims=True)
        dx = inv * (gg - gm - xhat * gxm)
        return (dx.reshape(a.shape).astype(a.dtype),)

    return _result(out, (a,), backward_fn)


# ---------------------------------------------------------------------------
# convolution


def _same_pad(in_size: int, k: int, stride: int, dilation: int):
    eff_k = (k - 1) * dilation + 1
    out_size = -(-in_size // stride)  # ceil
    total = max((out_size - 1) * stride + eff_k - in_size, 0)
    return out_size, total // 2, total - total // 2


def _im2col(xp: np.ndarray, KH: int, KW: int, stride: int, dilation: int, OH: int, OW: int):
    N, C = xp.shape[0], xp.shape[1]
    cols = np.empty((N, C, KH, KW, OH, OW), dtype=xp.dtype)
    for i in range(KH):
        ii = i * dilation
        for j in range(KW):
            jj = j * dilation
            cols[:, :, i, j] = xp[:, :, ii : ii + OH * stride : stride, jj : jj + OW * stride : stride]
    return cols


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, dilation: int = 1):
    """Cross-correlation with zero "same" padding (output spatial = ceil(in/stride)).

    x: (N, C, H, W); w: (O, C, KH, KW); b: (O,). Differentiable w.r.t. all three.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input/weight, got {x.shape} and {w.shape}")
    if dilation < 1 or stride < 1:
        raise ValueError("conv2d: stride and dilation must be >= 1")
    N, C, H, W = x.shape
    O, CI, KH, KW = w.shape
    if CI != C:
        raise ShapeError(
            f"conv2d channel mismatch: input {tuple(x.shape)} has {C} channels, "
            f"weight {tuple(w.shape)} expects {CI}"
        )
    if b.shape != (O,):
        raise ShapeError(f"conv2d bias shape {b.shape} != ({O},)")

    OH, pt, pb = _same_pad(H, KH, stride, dilation)
    OW, pl, pr = _same_pad(W, KW, stride, dilation)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    # column tensor (N, C*KH*KW, OH*OW); one batched GEMM per direction
    colmat = _im2col(xp, KH, KW, stride, dilation, OH, OW).reshape(N, C * KH * KW, OH * OW)
    wmat = w.data.reshape(O, -1)
    out = np.matmul(wmat, colmat).reshape(N, O, OH, OW)
    out += b.data[:, None, None]

    pad_shape = xp.shape

    def backward_fn(g):
        g3 = g.reshape(N, O, OH * OW)
        dw = np.matmul(g3, colmat.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        db = g.sum(axis=(0, 2, 3))
        dcol = np.matmul(wmat.T, g3).reshape(N, C, KH, KW, OH, OW)
        dxp = np.zeros(pad_shape, dtype=g.dtype)
        for i in range(KH):
            ii = i * dilation
            for j in range(KW):
                jj = j * dilation
                dxp[:, :, ii : ii + OH * stride : stride, jj : jj + OW * stride : stride] += dcol[:, :, i, j]
        dx = dxp[:, :, pt : pt + H, pl : pl + W]
        return dx, dw, db

    return _result(out, (x, w, b), backward_fn)


# ---------------------------------------------------------------------------
# resampling


def _interp_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    """Row-interpolation matrix for half-pixel-center bilinear sampling, edge-clamped."""
    A = np.zeros((n_out, n_in), dtype=dtype)
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    i0 = np.floor(src).astype(np.int64)
    f = src - i0
    lo = np.clip(i0, 0, n_in - 1)
    hi = np.clip(i0 + 1, 0, n_in - 1)
    rows = np.arange(n_out)
    np.add.at(A, (rows, lo), (1.0 - f).astype(dtype))
    np.add.at(A, (rows, hi), f.astype(dtype))
    return A


def bilinear_resize(x: Tensor, out_h: int, out_w: int):
    """Resize NCHW spatially with half-pixel-center bilinear sampling."""
    if x.ndim != 4:
        raise ShapeError(f"bilinear_resize expects NCHW, got {x.shape}")
    if out_h < 1 or out_w < 1:
        raise ValueError("bilinear_resize: output size must be >= 1")
    N, C, H, W = x.shape
    if (out_h, out_w) == (H, W):
        return _result(x.data.copy(), (x,), lambda g: (g,))
    A = _interp_matrix(H, out_h, x.data.dtype)
    B = _interp_matrix(W, out_w, x.data.dtype)
    out = A @ x.data @ B.T

    def backward_fn(g):
        return (A.T @ g @ B,)

    return _result(out, (x,), backward_fn)


def _gather_corner(x_flat, yc, xc, H, W):
    valid = (yc >= 0) & (yc < H) & (xc >= 0) & (xc < W)
    idx = np.clip(yc, 0, H - 1) * W + np.clip(xc, 0, W - 1)
    N, C = x_flat.shape[0], x_flat.shape[1]
    idx_b = np.broadcast_to(idx[:, None, :], (N, C, idx.shape[-1]))
    vals = np.take_along_axis(x_flat, idx_b, axis=2) * valid[:, None, :]
    return vals, valid, idx


def warp_bilinear(x: Tensor, flow: Tensor):
    """Sample x at (x + flow_x, y + flow_y) bilinearly; out-of-image reads 0.

    flow: (N, 2, H, W), channel 0 = x-displacement, channel 1 = y-displacement,
    in pixels. Differentiable w.r.t. both x and flow.
    """
    if x.ndim != 4 or flow.ndim != 4:
        raise ShapeError(f"warp_bilinear expects NCHW inputs, got {x.shape} and {flow.shape}")
    N, C, H, W = x.shape
    if flow.shape != (N, 2, H, W):
        raise ShapeError(
            f"warp_bilinear flow must be ({N}, 2, {H}, {W}), got {tuple(flow.shape)}"
        )
    dt = x.data.dtype
    gy, gx = np.meshgrid(np.arange(H, dtype=dt), np.arange(W, dtype=dt), indexing="ij")
    sx = (gx + flow.data[:, 0]).reshape(N, H * W)
    sy = (gy + flow.data[:, 1]).reshape(N, H * W)
    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    fx = (sx - x0).astype(dt)
    fy = (sy - y0).astype(dt)

    x_flat = x.data.reshape(N, C, H * W)
    v00, m00, i00 = _gather_corner(x_flat, y0, x0, H, W)
    v01, m01, i01 = _gather_corner(x_flat, y0, x0 + 1, H, W)
    v10, m10, i10 = _gather_corner(x_flat, y0 + 1, x0, H, W)
    v11, m11, i11 = _gather_corner(x_flat, y0 + 1, x0 + 1, H, W)

    w00 = ((1 - fx) * (1 - fy))[:, None, :]
    w01 = (fx * (1 - fy))[:, None, :]
    w10 = ((1 - fx) * fy)[:, None, :]
    w11 = (fx * fy)[:, None, :]
    out = (w00 * v00 + w01 * v01 + w10 * v10 + w11 * v11).reshape(N, C, H, W)

    def backward_fn(g):
        gf = g.reshape(N, C, H * W)
        dx_flat = np.zeros((N * C * H * W,), dtype=g.dtype)
        base = (np.arange(N)[:, None, None] * C + np.arange(C)[None, :, None]) * (H * W)
        for wgt, msk, idx in ((w00, m00, i00), (w01, m01, i01), (w10, m10, i10), (w11, m11, i11)):
            contrib = gf * wgt * msk[:, None, :]
            gidx = (base + idx[:, None, :]).reshape(-1)
            np.add.at(dx_flat, gidx, contrib.reshape(-1))
        dx = dx_flat.reshape(N, C, H, W)

        fxc = fx[:, None, :]
        fyc = fy[:, None, :]
        dsx = (gf * ((1 - fyc) * (v01 - v00) + fyc * (v11 - v10))).sum(axis=1)
        dsy = (gf * ((1 - fxc) * (v10 - v00) + fxc * (v11 - v01))).sum(axis=1)
        dflow = np.stack([dsx.reshape(N, H, W), dsy.reshape(N, H, W)], axis=1)
        return dx, dflow

    return _result(out, (x, flow), backward_fn)
