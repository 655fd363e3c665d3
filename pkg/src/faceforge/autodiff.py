"""Minimal deterministic reverse-mode autodiff over dense float arrays.

Design notes:

* A ``Tensor`` wraps a numpy array plus an optional gradient accumulator.
  Operations record ``Node`` entries on the active ``Tape`` (a thread-local
  stack), in creation order, which is automatically a topological order.
* Every backward rule is itself written in terms of the primitives below,
  so gradients can be differentiated again.  ``backward(..., create_graph=True)``
  leaves recording enabled while the rules run, which is what the WGAN
  gradient penalty needs (gradient-of-gradient w.r.t. critic weights).
* Layout conventions: 2-d tensors are plain matrices, 3-d tensors are single
  images in (c, h, w) order, and 4-d tensors are batches in (n, h, w, c)
  order.  The channels-last batched layout keeps the convolution inner loops
  BLAS-friendly; the 3-d entry points transpose in and out of it.
* Convolutions are fixed 3x3 / stride 1 / pad 1 and run as nine
  shift-accumulate GEMM calls on a zero-padded, flattened buffer.  The halo
  rows absorb the out-of-range products and are discarded, which avoids the
  large im2col intermediate.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numba
import numpy as np
from scipy.linalg import blas as _blas

from .errors import ContractError, ShapeError

__all__ = [
    "Tensor",
    "Tape",
    "record_paused",
    "set_debug_checks",
    "constant",
    "parameter",
    "add",
    "mul",
    "neg",
    "sub",
    "add_const",
    "mul_const",
    "pow_const",
    "sum_axes",
    "sum_all",
    "mean_all",
    "broadcast_to",
    "reshape",
    "transpose",
    "matmul",
    "tanh",
    "leaky_relu",
    "conv2d",
    "avgpool2x",
    "upsample_bilinear2x",
    "pixel_norm",
    "concat_channels",
    "inject_static_noise",
    "dense",
    "backward",
]

_state = threading.local()

# When True, every primitive asserts its output is finite.  Meant for tests;
# training checks loss finiteness instead of paying a full scan per op.
_DEBUG_CHECKS = False


def set_debug_checks(enabled: bool) -> None:
    global _DEBUG_CHECKS
    _DEBUG_CHECKS = bool(enabled)


def _tape_stack() -> list:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = []
        _state.tapes = stack
    return stack


def _recording() -> bool:
    return getattr(_state, "record", True)


class record_paused:
    """Context manager that suspends node recording on the active tape."""

    def __enter__(self):
        self._prev = _recording()
        _state.record = False
        return self

    def __exit__(self, *exc):
        _state.record = self._prev
        return False


class Tensor:
    """Dense n-dimensional float array with an optional gradient accumulator."""

    __slots__ = ("data", "requires_grad", "grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, copy=True)
        else:
            self.grad += g

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"

    # Small operator sugar; everything maps onto the primitives.
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_const(self, float(other))

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return mul_const(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_const(self, -float(other))

    def __rsub__(self, other):
        return add_const(neg(self), float(other))

    def __matmul__(self, other):
        return matmul(self, other)


class Node:
    """One recorded operation: inputs, output, and its backward rule."""

    __slots__ = ("op", "inputs", "output", "bwd")

    def __init__(self, op: str, inputs: tuple, output: Tensor, bwd: Callable):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.bwd = bwd


class Tape:
    """Ordered record of operations; creation order is topological order."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        assert stack and stack[-1] is self
        stack.pop()
        return False


def _active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def constant(data, dtype=None) -> Tensor:
    arr = np.asarray(data, dtype=dtype)
    return Tensor(arr, requires_grad=False)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, copy=True), requires_grad=True, name=name)


def _emit(op: str, inputs: tuple, out_data: np.ndarray, bwd: Callable) -> Tensor:
    if _DEBUG_CHECKS and not np.all(np.isfinite(out_data)):
        raise FloatingPointError(f"non-finite values produced by op '{op}'")
    rg = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=rg)
    if rg and _recording():
        tape = _active_tape()
        if tape is not None:
            node = Node(op, inputs, out, bwd)
            out.node = node
            tape.nodes.append(node)
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


def _check_same_dtype(*tensors: Tensor) -> None:
    dt = tensors[0].dtype
    for t in tensors[1:]:
        if t.dtype != dt:
            raise ShapeError(f"mixed dtypes {dt} vs {t.dtype}")


# ---------------------------------------------------------------------------
# elementwise and shape primitives


def _reduce_to(g: Tensor, shape: tuple) -> Tensor:
    """Sum a broadcast gradient back down to `shape`."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    axes = tuple(range(extra))
    axes += tuple(
        i + extra for i, s in enumerate(shape) if s == 1 and g.shape[i + extra] != 1
    )
    out = sum_axes(g, axes, keepdims=False) if axes else g
    if out.shape != tuple(shape):
        out = reshape(out, shape)
    return out


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_dtype(a, b)
    try:
        out = a.data + b.data
    except ValueError as e:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}") from e

    def bwd(g, need):
        ga = _reduce_to(g, a.shape) if need[0] else None
        gb = _reduce_to(g, b.shape) if need[1] else None
        return ga, gb

    return _emit("add", (a, b), out, bwd)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_dtype(a, b)
    try:
        out = a.data * b.data
    except ValueError as e:
        raise ShapeError(f"mul: cannot broadcast {a.shape} with {b.shape}") from e

    def bwd(g, need):
        ga = _reduce_to(mul(g, b), a.shape) if need[0] else None
        gb = _reduce_to(mul(g, a), b.shape) if need[1] else None
        return ga, gb

    return _emit("mul", (a, b), out, bwd)


def neg(a) -> Tensor:
    a = _as_tensor(a)

    def bwd(g, need):
        return (neg(g),)

    return _emit("neg", (a,), -a.data, bwd)


def sub(a, b) -> Tensor:
    return add(a, neg(b))


def add_const(a, c: float) -> Tensor:
    a = _as_tensor(a)

    def bwd(g, need):
        return (g,)

    return _emit("add_const", (a,), a.data + a.dtype.type(c), bwd)


def mul_const(a, c: float) -> Tensor:
    a = _as_tensor(a)
    cc = a.dtype.type(c)

    def bwd(g, need):
        return (mul_const(g, cc),)

    return _emit("mul_const", (a,), a.data * cc, bwd)


def pow_const(a, p: float) -> Tensor:
    a = _as_tensor(a)
    out = a.data ** a.dtype.type(p)

    def bwd(g, need):
        return (mul(g, mul_const(pow_const(a, p - 1.0), p)),)

    return _emit("pow_const", (a,), out, bwd)


def sum_axes(a, axes=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(range(a.ndim))
    elif isinstance(axes, int):
        axes = (axes,)
    else:
        axes = tuple(axes)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bwd(g, need):
        if not keepdims:
            kshape = list(a.shape)
            for ax in axes:
                kshape[ax] = 1
            g = reshape(g, tuple(kshape))
        return (broadcast_to(g, a.shape),)

    return _emit("sum_axes", (a,), out, bwd)


def sum_all(a) -> Tensor:
    return sum_axes(a, None)


def mean_all(a) -> Tensor:
    a = _as_tensor(a)
    return mul_const(sum_axes(a, None), 1.0 / a.data.size)


def broadcast_to(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape)
    out = np.broadcast_to(a.data, shape)

    def bwd(g, need):
        return (_reduce_to(g, a.shape),)

    # copy: downstream ops may assume contiguity
    return _emit("broadcast_to", (a,), np.ascontiguousarray(out), bwd)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape)
    out = a.data.reshape(shape)

    def bwd(g, need):
        return (reshape(g, a.shape),)

    return _emit("reshape", (a,), out, bwd)


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    inv = tuple(int(i) for i in np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))

    def bwd(g, need):
        return (transpose(g, inv),)

    return _emit("transpose", (a,), out, bwd)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_dtype(a, b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} vs {b.shape}")
    out = a.data @ b.data

    def bwd(g, need):
        ga = matmul(g, transpose(b, (1, 0))) if need[0] else None
        gb = matmul(transpose(a, (1, 0)), g) if need[1] else None
        return ga, gb

    return _emit("matmul", (a, b), out, bwd)


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)

    def bwd(g, need, _out=out):
        y = constant(_out)
        return (mul(g, add_const(neg(mul(y, y)), 1.0)),)

    return _emit("tanh", (a,), out, bwd)


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = _as_tensor(a)
    s = a.dtype.type(slope)
    out = np.maximum(a.data, s * a.data)  # slope < 1 makes this exact

    def bwd(g, need):
        # The derivative mask is piecewise constant, held fixed under
        # further differentiation (measure-zero kink at 0); built lazily so
        # gradient-free forward passes never pay for it.
        mask = np.where(a.data > 0, a.dtype.type(1.0), s)
        return (mul(g, constant(mask)),)

    return _emit("leaky_relu", (a,), out, bwd)


def concat_axis(parts: Sequence, axis: int) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    _check_same_dtype(*parts)
    base = list(parts[0].shape)
    for p in parts[1:]:
        other = list(p.shape)
        if len(other) != len(base) or any(
            i != axis and other[i] != base[i] for i in range(len(base))
        ):
            raise ShapeError(
                f"concat: incompatible shapes {[tuple(q.shape) for q in parts]}"
            )
    out = np.concatenate([p.data for p in parts], axis=axis)
    offsets = np.cumsum([0] + [p.shape[axis] for p in parts])

    def bwd(g, need):
        grads = []
        for i, p in enumerate(parts):
            if need[i]:
                grads.append(slice_axis(g, axis, int(offsets[i]), int(offsets[i + 1])))
            else:
                grads.append(None)
        return tuple(grads)

    return _emit("concat", tuple(parts), out, bwd)


def slice_axis(a, axis: int, start: int, stop: int) -> Tensor:
    a = _as_tensor(a)
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    out = np.ascontiguousarray(a.data[tuple(idx)])
    n = a.shape[axis]

    def bwd(g, need):
        zeros_before = None
        zeros_after = None
        if start > 0:
            shp = list(a.shape)
            shp[axis] = start
            zeros_before = constant(np.zeros(shp, a.dtype.type))
        if stop < n:
            shp = list(a.shape)
            shp[axis] = n - stop
            zeros_after = constant(np.zeros(shp, a.dtype.type))
        pieces = [p for p in (zeros_before, g, zeros_after) if p is not None]
        if len(pieces) == 1:
            return (pieces[0],)
        return (concat_axis(pieces, axis),)

    return _emit("slice", (a,), out, bwd)


# ---------------------------------------------------------------------------
# convolution (3x3, stride 1, pad 1, NHWC) via shift-accumulate GEMM


def _gemm_fn(dtype):
    return _blas.sgemm if dtype == np.float32 else _blas.dgemm


def _scratch(shape: tuple, dtype, slot: str) -> np.ndarray:
    """Reusable zero-initialised work buffer (per thread, per shape).

    Convolution pads into multi-megabyte temporaries every call; recycling
    them avoids repeated page-fault zeroing.  Buffers start zeroed and
    callers only ever write the interior, so halos stay zero across reuses.
    """
    pool = getattr(_state, "scratch", None)
    if pool is None:
        pool = {}
        _state.scratch = pool
    key = (shape, np.dtype(dtype), slot)
    buf = pool.get(key)
    if buf is None:
        buf = np.zeros(shape, dtype)
        pool[key] = buf
    return buf


def _conv3x3_data(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Cross-correlate NHWC `x` with kernels (c_out, c_in, 3, 3)."""
    n, h, w, ci = x.shape
    co = k.shape[0]
    hp, wp = h + 2, w + 2
    xp = _scratch((n, hp, wp, ci), x.dtype, "conv_x")
    xp[:, 1:-1, 1:-1, :] = x
    xf = xp.reshape(-1, ci)
    L = xf.shape[0]
    out = _scratch((L, co), x.dtype, "conv_out")
    kt = np.ascontiguousarray(k.transpose(2, 3, 1, 0))  # (3, 3, ci, co)
    gemm = _gemm_fn(x.dtype)
    # center tap first with beta=0: it spans every row, initialising `out`
    taps = [(1, 1)] + [(dy, dx) for dy in range(3) for dx in range(3) if (dy, dx) != (1, 1)]
    for i, (dy, dx) in enumerate(taps):
        delta = (dy - 1) * wp + (dx - 1)
        kk = kt[dy, dx]
        if delta >= 0:
            src, dst = xf[delta:], out[: L - delta]
        else:
            src, dst = xf[: L + delta], out[-delta:]
        # dst^T (+)= kk^T @ src^T; all three views are F-contiguous,
        # so the BLAS call updates `out` in place without copies.
        gemm(1.0, kk.T, src.T, 0.0 if i == 0 else 1.0, dst.T, overwrite_c=1)
    outp = out.reshape(n, hp, wp, co)
    return np.ascontiguousarray(outp[:, 1:-1, 1:-1, :])


def _conv3x3_kgrad_data(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Kernel gradient for `_conv3x3_data`: returns (c_out, c_in, 3, 3)."""
    n, h, w, ci = x.shape
    co = g.shape[3]
    hp, wp = h + 2, w + 2
    xp = _scratch((n, hp, wp, ci), x.dtype, "conv_x")
    xp[:, 1:-1, 1:-1, :] = x
    gp = _scratch((n, hp, wp, co), g.dtype, "conv_g")
    gp[:, 1:-1, 1:-1, :] = g
    xf = xp.reshape(-1, ci)
    gf = gp.reshape(-1, co)
    L = xf.shape[0]
    gemm = _gemm_fn(x.dtype)
    kg = np.empty((co, ci, 3, 3), x.dtype)
    for dy in range(3):
        for dx in range(3):
            delta = (dy - 1) * wp + (dx - 1)
            if delta >= 0:
                gs, xs = gf[: L - delta], xf[delta:]
            else:
                gs, xs = gf[-delta:], xf[: L + delta]
            # (co, ci) = gs^T @ xs; zero halos cancel invalid alignments.
            res = gemm(1.0, gs.T, xs.T, trans_b=1)
            kg[:, :, dy, dx] = res
    return kg


def kernel_swapflip(k) -> Tensor:
    """Swap in/out channels and flip the 3x3 taps (conv transpose kernel)."""
    k = _as_tensor(k)
    out = np.ascontiguousarray(k.data.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])

    def bwd(g, need):
        return (kernel_swapflip(g),)

    return _emit("kernel_swapflip", (k,), out, bwd)


def conv3x3(x, k) -> Tensor:
    """3x3 stride-1 same-padding cross-correlation, NHWC, no bias."""
    x, k = _as_tensor(x), _as_tensor(k)
    _check_same_dtype(x, k)
    if x.ndim != 4 or k.ndim != 4 or k.shape[2:] != (3, 3):
        raise ShapeError(f"conv3x3: got x {x.shape}, kernels {k.shape}")
    if x.shape[3] != k.shape[1]:
        raise ShapeError(
            f"conv3x3: input channels {x.shape} do not match kernels {k.shape}"
        )
    out = _conv3x3_data(x.data, k.data)

    def bwd(g, need):
        gx = conv3x3(g, kernel_swapflip(k)) if need[0] else None
        gk = conv3x3_kgrad(x, g) if need[1] else None
        return gx, gk

    return _emit("conv3x3", (x, k), out, bwd)


def conv3x3_kgrad(x, g) -> Tensor:
    """Correlation of activations with output gradients (bilinear in both)."""
    x, g = _as_tensor(x), _as_tensor(g)
    _check_same_dtype(x, g)
    out = _conv3x3_kgrad_data(x.data, g.data)

    def bwd(u, need):
        gx = conv3x3(g, kernel_swapflip(u)) if need[0] else None
        gg = conv3x3(x, u) if need[1] else None
        return gx, gg

    return _emit("conv3x3_kgrad", (x, g), out, bwd)


# ---------------------------------------------------------------------------
# pooling / resampling primitives (NHWC)


def avgpool2x_nhwc(x) -> Tensor:
    x = _as_tensor(x)
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avgpool2x: odd spatial size {x.shape}")
    out = x.data.reshape(n, h // 2, 2, w // 2, 2, c).mean(axis=(2, 4))

    def bwd(g, need):
        return (_avgpool2x_adjoint(g, (n, h, w, c)),)

    return _emit("avgpool2x", (x,), out, bwd)


def _avgpool2x_adjoint(g, full_shape) -> Tensor:
    g = _as_tensor(g)
    n, h, w, c = full_shape
    quarter = g.dtype.type(0.25)
    out = np.repeat(np.repeat(g.data * quarter, 2, axis=1), 2, axis=2)

    def bwd(u, need):
        return (avgpool2x_nhwc(u),)

    return _emit("avgpool2x_adj", (g,), out, bwd)


@numba.njit(cache=True)
def _upsample2x_kernel(x, out):  # pragma: no cover - via upsample2x_nhwc
    n, h, w, c = x.shape
    for s in range(n):
        for yy in range(2 * h):
            py = (yy + 0.5) * 0.5 - 0.5
            y0 = int(np.floor(py))
            ty = py - y0
            y1 = min(y0 + 1, h - 1)
            y0 = max(y0, 0)
            for xx in range(2 * w):
                px = (xx + 0.5) * 0.5 - 0.5
                x0 = int(np.floor(px))
                tx = px - x0
                x1 = min(x0 + 1, w - 1)
                x0 = max(x0, 0)
                for ch in range(c):
                    top = x[s, y0, x0, ch] * (1 - tx) + x[s, y0, x1, ch] * tx
                    bot = x[s, y1, x0, ch] * (1 - tx) + x[s, y1, x1, ch] * tx
                    out[s, yy, xx, ch] = top * (1 - ty) + bot * ty


@numba.njit(cache=True)
def _upsample2x_adjoint_kernel(g, out):  # pragma: no cover - via adjoint op
    n, h2, w2, c = g.shape
    h, w = h2 // 2, w2 // 2
    for s in range(n):
        for yy in range(h2):
            py = (yy + 0.5) * 0.5 - 0.5
            y0 = int(np.floor(py))
            ty = py - y0
            y1 = min(y0 + 1, h - 1)
            y0 = max(y0, 0)
            for xx in range(w2):
                px = (xx + 0.5) * 0.5 - 0.5
                x0 = int(np.floor(px))
                tx = px - x0
                x1 = min(x0 + 1, w - 1)
                x0 = max(x0, 0)
                for ch in range(c):
                    v = g[s, yy, xx, ch]
                    out[s, y0, x0, ch] += v * (1 - ty) * (1 - tx)
                    out[s, y0, x1, ch] += v * (1 - ty) * tx
                    out[s, y1, x0, ch] += v * ty * (1 - tx)
                    out[s, y1, x1, ch] += v * ty * tx


def _upsample2x_data(x: np.ndarray) -> np.ndarray:
    n, h, w, c = x.shape
    out = np.empty((n, 2 * h, 2 * w, c), x.dtype)
    _upsample2x_kernel(x, out)
    return out


def _upsample2x_adjoint_data(g: np.ndarray) -> np.ndarray:
    n, h2, w2, c = g.shape
    out = np.zeros((n, h2 // 2, w2 // 2, c), g.dtype)
    _upsample2x_adjoint_kernel(g, out)
    return out


def upsample2x_nhwc(x) -> Tensor:
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"upsample2x: expected NHWC tensor, got {x.shape}")
    out = _upsample2x_data(x.data)

    def bwd(g, need):
        return (_upsample2x_adjoint(g),)

    return _emit("upsample2x", (x,), out, bwd)


def _upsample2x_adjoint(g) -> Tensor:
    g = _as_tensor(g)
    out = _upsample2x_adjoint_data(g.data)

    def bwd(u, need):
        return (upsample2x_nhwc(u),)

    return _emit("upsample2x_adj", (g,), out, bwd)


# ---------------------------------------------------------------------------
# public ops in the (c, h, w) single-image convention


def _chw_to_nhwc(x: Tensor) -> Tensor:
    c, h, w = x.shape
    return reshape(transpose(x, (1, 2, 0)), (1, h, w, c))


def _nhwc_to_chw(x: Tensor) -> Tensor:
    _, h, w, c = x.shape
    return transpose(reshape(x, (h, w, c)), (2, 0, 1))


def conv2d(x, kernels, bias) -> Tensor:
    """3x3/stride-1/pad-1 convolution plus per-channel bias.

    Accepts a single (c_in, h, w) image or an NHWC batch; kernels are
    (c_out, c_in, 3, 3), bias is (c_out,).
    """
    x, kernels, bias = _as_tensor(x), _as_tensor(kernels), _as_tensor(bias)
    if kernels.ndim != 4 or kernels.shape[2:] != (3, 3):
        raise ShapeError(f"conv2d: kernels must be (c_out, c_in, 3, 3), got {kernels.shape}")
    if bias.shape != (kernels.shape[0],):
        raise ShapeError(f"conv2d: bias {bias.shape} does not match kernels {kernels.shape}")
    single = x.ndim == 3
    xb = _chw_to_nhwc(x) if single else x
    y = conv3x3(xb, kernels)
    y = add(y, reshape(bias, (1, 1, 1, bias.shape[0])))
    return _nhwc_to_chw(y) if single else y


def avgpool2x(x) -> Tensor:
    x = _as_tensor(x)
    if x.ndim == 3:
        return _nhwc_to_chw(avgpool2x_nhwc(_chw_to_nhwc(x)))
    return avgpool2x_nhwc(x)


def upsample_bilinear2x(x) -> Tensor:
    """Bilinear x2 upsampling, half-pixel centers (align_corners=False)."""
    x = _as_tensor(x)
    if x.ndim == 3:
        return _nhwc_to_chw(upsample2x_nhwc(_chw_to_nhwc(x)))
    return upsample2x_nhwc(x)


@numba.njit(cache=True)
def _pixel_norm_kernel(x, out, scale, inv_c, eps):  # pragma: no cover
    n, h, w, c = x.shape
    for s in range(n):
        for y in range(h):
            for xx in range(w):
                acc = 0.0
                for ch in range(c):
                    v = x[s, y, xx, ch]
                    acc += v * v
                r = 1.0 / np.sqrt(acc * inv_c + eps)
                scale[s, y, xx] = r
                for ch in range(c):
                    out[s, y, xx, ch] = x[s, y, xx, ch] * r


def pixel_norm(x, eps: float = 1e-8) -> Tensor:
    """Normalise each spatial location by the RMS over channels."""
    x = _as_tensor(x)
    if x.ndim == 3:
        c = x.shape[0]
        ms = mul_const(sum_axes(mul(x, x), 0, keepdims=True), 1.0 / c)
        return mul(x, pow_const(add_const(ms, eps), -0.5))
    n, h, w, c = x.shape
    out = np.empty_like(x.data)
    scale = np.empty((n, h, w), x.data.dtype)
    _pixel_norm_kernel(x.data, out, scale, 1.0 / c, eps)

    def bwd(g, need):
        # y_i = x_i * r with r = (mean_c x^2 + eps)^(-1/2):
        # dx_j = r * g_j - x_j * r^3 / c * sum_i(g_i * x_i)
        r = constant(scale[..., None])
        r3c = constant((scale.astype(np.float64) ** 3 / c).astype(x.data.dtype)[..., None])
        inner = sum_axes(mul(x, g), 3, keepdims=True)
        return (sub(mul(g, r), mul(mul(x, inner), r3c)),)

    return _emit("pixel_norm", (x,), out, bwd)


def concat_channels(parts: Iterable) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ContractError("concat_channels: empty part list")
    axis = 0 if parts[0].ndim == 3 else 3
    return concat_axis(parts, axis)


def inject_static_noise(x, noise, scale) -> Tensor:
    """Add a frozen noise map scaled by a trained per-channel gain.

    `noise` is (1, h, w) for a (c, h, w) input, or (h, w) / (1, h, w, 1) for
    an NHWC batch.  `scale` is (c,).  The noise tensor never receives
    gradients; x and scale do.
    """
    x, noise, scale = _as_tensor(x), _as_tensor(noise), _as_tensor(scale)
    if x.ndim == 3:
        c = x.shape[0]
        if scale.shape != (c,):
            raise ShapeError(f"inject_static_noise: scale {scale.shape} for input {x.shape}")
        term = mul(reshape(scale, (c, 1, 1)), noise)
    else:
        c = x.shape[3]
        if scale.shape != (c,):
            raise ShapeError(f"inject_static_noise: scale {scale.shape} for input {x.shape}")
        if noise.ndim == 2:
            noise = reshape(noise, (1,) + noise.shape + (1,))
        term = mul(noise, reshape(scale, (1, 1, 1, c)))
    return add(x, term)


def dense(x, weight, bias) -> Tensor:
    """Affine layer: (n, d_in) @ (d_in, d_out) + bias."""
    y = matmul(x, weight)
    return add(y, reshape(bias, (1, bias.shape[0])))


# ---------------------------------------------------------------------------
# reverse pass


def backward(
    loss: Tensor,
    wrt: Sequence[Tensor] | None = None,
    create_graph: bool = False,
    tape: Tape | None = None,
):
    """Reverse-replay the tape from a scalar loss.

    Populates ``.grad`` (accumulating) on every reachable tensor with
    ``requires_grad`` — or only on `wrt` when given, which also prunes the
    traversal.  With ``create_graph=True`` the rules run recorded, nothing
    is written to ``.grad``, and the gradients are returned as live tensors
    keyed by the `wrt` entries.
    """
    if tape is None:
        tape = _active_tape()
    if tape is None:
        raise ContractError("backward: no active tape")
    if loss.data.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
    if create_graph and wrt is None:
        raise ContractError("backward: create_graph requires an explicit wrt list")

    nodes = list(tape.nodes)  # snapshot: create_graph appends while we walk

    # Which tensors can lead to a requested gradient?
    if wrt is not None:
        needed_ids = {id(t) for t in wrt}
        for node in nodes:
            if any(id(i) in needed_ids for i in node.inputs):
                needed_ids.add(id(node.output))

        def needed(t: Tensor) -> bool:
            return id(t) in needed_ids

    else:

        def needed(t: Tensor) -> bool:
            return t.requires_grad

    grads: dict[int, Tensor] = {
        id(loss): constant(np.ones(loss.shape, loss.dtype.type))
    }

    def run_rules():
        for node in reversed(nodes):
            g = grads.pop(id(node.output), None)
            if g is None or not needed(node.output):
                continue
            need_mask = tuple(needed(i) for i in node.inputs)
            if not any(need_mask):
                continue
            input_grads = node.bwd(g, need_mask)
            for inp, gi in zip(node.inputs, input_grads):
                if gi is None:
                    continue
                prev = grads.get(id(inp))
                grads[id(inp)] = gi if prev is None else add(prev, gi)

    if create_graph:
        run_rules()
        return {t: grads.get(id(t)) for t in wrt}

    with record_paused():
        run_rules()

    targets = wrt if wrt is not None else None
    if targets is None:
        # every tensor that both required grad and received one
        for node in nodes:
            for inp in node.inputs:
                g = grads.get(id(inp))
                if g is not None and inp.requires_grad and inp.node is None:
                    inp.accumulate_grad(g.data)
                    grads.pop(id(inp), None)
        if loss.requires_grad and loss.node is None and id(loss) in grads:
            loss.accumulate_grad(grads[id(loss)].data)
    else:
        for t in targets:
            g = grads.get(id(t))
            if g is not None:
                t.accumulate_grad(g.data)
    return None
