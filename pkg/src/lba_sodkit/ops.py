"""Differentiable numeric operations on :class:`~lba_sodkit.tensor.Tensor`.

Every function here computes its forward value with numpy and, when a tape is
active, records an analytic vector-Jacobian product. Rank-4 operands use the
(n, c, h, w) layout; rank-3 operands are batched matrices (n, r, c).
"""
from __future__ import annotations

from enum import Enum
from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, make_result

BN_EPS = 1e-5
BCE_EPS = 1e-7


class PadMode(str, Enum):
    ZERO = "zero"
    REPLICATE = "replicate"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _operand(b, like: Tensor) -> Tensor:
    """Python/numpy scalars become constants broadcastable against ``like``."""
    if isinstance(b, Tensor):
        return b
    b = np.asarray(b, dtype=np.float64)
    if b.ndim == 0:
        b = np.full((1,) * like.ndim, b)
    return Tensor(b)


def _require_rank(x: Tensor, rank: int, what: str) -> None:
    if x.ndim != rank:
        raise ShapeError(f"{what}: expected rank {rank}, got shape {x.shape}")


# ---------------------------------------------------------------------------
# padding helpers (not ops themselves; conv and sobel fold them into their VJPs)

def _pad(x: np.ndarray, p: int, mode: PadMode) -> np.ndarray:
    if p == 0:
        return x
    width = ((0, 0), (0, 0), (p, p), (p, p))
    if mode is PadMode.REPLICATE:
        return np.pad(x, width, mode="edge")
    return np.pad(x, width)


def _unpad_grad(gp: np.ndarray, p: int, mode: PadMode) -> np.ndarray:
    """Adjoint of :func:`_pad`: fold the halo gradient back onto the interior."""
    if p == 0:
        return gp
    if mode is PadMode.REPLICATE:
        gp = gp.copy()
        gp[:, :, p, :] += gp[:, :, :p, :].sum(axis=2)
        gp[:, :, -p - 1, :] += gp[:, :, -p:, :].sum(axis=2)
        gp[:, :, :, p] += gp[:, :, :, :p].sum(axis=3)
        gp[:, :, :, -p - 1] += gp[:, :, :, -p:].sum(axis=3)
    return gp[:, :, p:-p, p:-p]


# ---------------------------------------------------------------------------
# elementwise

def _broadcast_shape(a: tuple, b: tuple, op: str) -> tuple:
    if a == b:
        return a
    if len(a) != len(b):
        raise ShapeError(f"{op}: rank mismatch {a} vs {b}")
    out = []
    for i, (da, db) in enumerate(zip(a, b)):
        if da == db or db == 1 or da == 1:
            out.append(max(da, db))
        else:
            raise ShapeError(f"{op}: dimension {i} not broadcastable ({da} vs {db})")
    return tuple(out)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), _operand(b, a)
    _broadcast_shape(a.shape, b.shape, "add")

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result("add", a.data + b.data, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), _operand(b, a)
    _broadcast_shape(a.shape, b.shape, "sub")

    def vjp(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return make_result("sub", a.data - b.data, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), _operand(b, a)
    _broadcast_shape(a.shape, b.shape, "mul")

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make_result("mul", a.data * b.data, (a, b), vjp)


def sigmoid(x: Tensor) -> Tensor:
    z = x.data
    e = np.exp(-np.abs(z))
    y = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def vjp(g):
        return (g * y * (1.0 - y),)

    return make_result("sigmoid", y, (x,), vjp)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def vjp(g):
        return (g * mask,)

    return make_result("relu", np.where(mask, x.data, 0.0), (x,), vjp)


def activation(kind: str, x: Tensor) -> Tensor:
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "relu":
        return relu(x)
    raise ValueError(f"unknown activation {kind!r}")


# ---------------------------------------------------------------------------
# reductions and shape plumbing

def sum_all(x: Tensor) -> Tensor:
    shape = x.shape

    def vjp(g):
        return (np.broadcast_to(g, shape).copy(),)

    return make_result("sum", np.asarray(x.data.sum()), (x,), vjp)


def mean_all(x: Tensor) -> Tensor:
    shape, n = x.shape, x.data.size

    def vjp(g):
        return (np.full(shape, float(g) / n),)

    return make_result("mean", np.asarray(x.data.mean()), (x,), vjp)


def channel_max(x: Tensor) -> Tensor:
    """Per-pixel maximum over channels, (n, c, h, w) -> (n, 1, h, w).

    Ties route the gradient to the lowest channel index.
    """
    _require_rank(x, 4, "channel_max")
    idx = np.argmax(x.data, axis=1)[:, None]
    y = np.take_along_axis(x.data, idx, axis=1)

    def vjp(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx, g, axis=1)
        return (gx,)

    return make_result("channel_max", y, (x,), vjp)


def global_avg_pool(x: Tensor) -> Tensor:
    _require_rank(x, 4, "global_avg_pool")
    n, c, h, w = x.shape
    if h * w < 1:
        raise ShapeError("global_avg_pool: empty spatial extent")

    def vjp(g):
        return (np.broadcast_to(g / (h * w), x.shape).copy(),)

    return make_result("global_avg_pool", x.data.mean(axis=(2, 3), keepdims=True), (x,), vjp)


def concat_channels(xs: list[Tensor]) -> Tensor:
    for t in xs:
        _require_rank(t, 4, "concat_channels")
    base = xs[0].shape
    for t in xs[1:]:
        if t.shape[0] != base[0] or t.shape[2:] != base[2:]:
            raise ShapeError(f"concat_channels: {t.shape} incompatible with {base}")
    splits = np.cumsum([t.shape[1] for t in xs])[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=1))

    return make_result("concat", np.concatenate([t.data for t in xs], axis=1), tuple(xs), vjp)


def flatten_spatial(x: Tensor) -> Tensor:
    """(n, c, h, w) -> (n, c, h*w); element (n, c, y, x) lands at column y*w + x."""
    _require_rank(x, 4, "flatten_spatial")
    n, c, h, w = x.shape

    def vjp(g):
        return (g.reshape(n, c, h, w),)

    return make_result("flatten_spatial", x.data.reshape(n, c, h * w), (x,), vjp)


def unflatten_spatial(x: Tensor, h: int, w: int) -> Tensor:
    _require_rank(x, 3, "unflatten_spatial")
    n, c, L = x.shape
    if L != h * w:
        raise ShapeError(f"unflatten_spatial: {L} elements cannot form {h}x{w}")

    def vjp(g):
        return (g.reshape(n, c, L),)

    return make_result("unflatten_spatial", x.data.reshape(n, c, h, w), (x,), vjp)


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes of a batched matrix."""
    _require_rank(x, 3, "transpose")

    def vjp(g):
        return (np.swapaxes(g, 1, 2),)

    return make_result("transpose", np.ascontiguousarray(np.swapaxes(x.data, 1, 2)), (x,), vjp)


# ---------------------------------------------------------------------------
# matrix ops

def bmm(a: Tensor, b: Tensor) -> Tensor:
    _require_rank(a, 3, "bmm lhs")
    _require_rank(b, 3, "bmm rhs")
    if a.shape[0] != b.shape[0]:
        raise ShapeError(f"bmm: batch mismatch {a.shape[0]} vs {b.shape[0]}")
    if a.shape[2] != b.shape[1]:
        raise ShapeError(f"bmm: inner dimension mismatch {a.shape[2]} vs {b.shape[1]}")

    def vjp(g):
        return g @ np.swapaxes(b.data, 1, 2), np.swapaxes(a.data, 1, 2) @ g

    return make_result("bmm", a.data @ b.data, (a, b), vjp)


def softmax_lastdim(x: Tensor) -> Tensor:
    _require_rank(x, 3, "softmax_lastdim")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return make_result("softmax_lastdim", y, (x,), vjp)


def fully_connected(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map on (n, c, 1, 1) vectors: weight is (co, c), bias (co,)."""
    _require_rank(x, 4, "fully_connected")
    n, c, h, w = x.shape
    if (h, w) != (1, 1):
        raise ShapeError(f"fully_connected: expected 1x1 spatial extent, got {h}x{w}")
    co, ci = weight.shape
    if ci != c:
        raise ShapeError(f"fully_connected: weight expects {ci} inputs, got {c}")
    if bias.shape != (co,):
        raise ShapeError(f"fully_connected: bias shape {bias.shape}, expected ({co},)")
    v = x.data.reshape(n, c)
    y = v @ weight.data.T + bias.data

    def vjp(g):
        g2 = g.reshape(n, co)
        return (g2 @ weight.data).reshape(n, c, 1, 1), g2.T @ v, g2.sum(axis=0)

    return make_result("fully_connected", y.reshape(n, co, 1, 1), (x, weight, bias), vjp)


# ---------------------------------------------------------------------------
# convolution

def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1,
           pad: PadMode | str = PadMode.ZERO) -> Tensor:
    """Same-padded 2-D cross-correlation.

    Output extent is ceil(h/stride) x ceil(w/stride). ``kernel`` has shape
    (co, ci, kh, kw) with odd kh, kw.
    """
    pad = PadMode(pad)
    _require_rank(x, 4, "conv2d input")
    _require_rank(kernel, 4, "conv2d kernel")
    n, ci, h, w = x.shape
    co, kci, kh, kw = kernel.shape
    if kci != ci:
        raise ShapeError(f"conv2d: input channels {ci} != kernel in-channels {kci}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel extent {kh}x{kw} must be odd")
    if stride < 1:
        raise ShapeError(f"conv2d: stride must be >= 1, got {stride}")
    if kh != kw:
        raise ShapeError(f"conv2d: square kernels only, got {kh}x{kw}")
    if bias is not None and bias.shape != (co,):
        raise ShapeError(f"conv2d: bias shape {bias.shape}, expected ({co},)")
    p = kh // 2
    xp = _pad(x.data, p, pad)
    ho = (h - 1) // stride + 1
    wo = (w - 1) // stride + 1
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    y = np.tensordot(win, kernel.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        y = y + bias.data[None, :, None, None]

    def vjp(g):
        gk = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                contrib = np.tensordot(g, kernel.data[:, :, i, j], axes=([1], [0]))
                gxp[:, :, i:i + stride * (ho - 1) + 1:stride,
                    j:j + stride * (wo - 1) + 1:stride] += contrib.transpose(0, 3, 1, 2)
        gx = _unpad_grad(gxp, p, pad)
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return gx, gk, gb

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return make_result("conv2d", np.ascontiguousarray(y), inputs, vjp)


def conv_transpose2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
                     stride: int = 2) -> Tensor:
    """Unpadded transposed convolution; ``kernel`` is (ci, co, k, k).

    Output extent is (h - 1) * stride + k, so k == stride exactly multiplies
    the extent by ``stride``.
    """
    _require_rank(x, 4, "conv_transpose2d input")
    _require_rank(kernel, 4, "conv_transpose2d kernel")
    n, ci, h, w = x.shape
    kci, co, kh, kw = kernel.shape
    if kci != ci:
        raise ShapeError(f"conv_transpose2d: input channels {ci} != kernel in-channels {kci}")
    if bias is not None and bias.shape != (co,):
        raise ShapeError(f"conv_transpose2d: bias shape {bias.shape}, expected ({co},)")
    ho = (h - 1) * stride + kh
    wo = (w - 1) * stride + kw
    y = np.zeros((n, co, ho, wo))
    for i in range(kh):
        for j in range(kw):
            contrib = np.tensordot(x.data, kernel.data[:, :, i, j], axes=([1], [0]))
            y[:, :, i:i + stride * (h - 1) + 1:stride,
              j:j + stride * (w - 1) + 1:stride] += contrib.transpose(0, 3, 1, 2)
    if bias is not None:
        y += bias.data[None, :, None, None]

    def vjp(g):
        gx = np.zeros_like(x.data)
        gk = np.zeros_like(kernel.data)
        for i in range(kh):
            for j in range(kw):
                gs = g[:, :, i:i + stride * (h - 1) + 1:stride, j:j + stride * (w - 1) + 1:stride]
                gx += np.tensordot(gs, kernel.data[:, :, i, j], axes=([1], [1])).transpose(0, 3, 1, 2)
                gk[:, :, i, j] = np.tensordot(x.data, gs, axes=([0, 2, 3], [0, 2, 3]))
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return gx, gk, gb

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return make_result("conv_transpose2d", y, inputs, vjp)


SOBEL_X = np.array([[1.0, 0.0, -1.0], [2.0, 0.0, -2.0], [1.0, 0.0, -1.0]])
SOBEL_Y = np.array([[1.0, 2.0, 1.0], [0.0, 0.0, 0.0], [-1.0, -2.0, -1.0]])


def sobel_magnitude(x: Tensor) -> Tensor:
    """Depthwise Sobel gradient magnitude sqrt(gx^2 + gy^2) with replicate padding.

    The 3x3 stencils are evaluated in separable, order-symmetric form so that
    flipping the input flips the output bit-for-bit. The gradient of the square
    root at a zero magnitude is taken as zero.
    """
    _require_rank(x, 4, "sobel_magnitude")
    xp = _pad(x.data, 1, PadMode.REPLICATE)
    # vertical smoothing then horizontal difference -> gx (kernel SOBEL_X)
    sv = (xp[:, :, :-2, :] + xp[:, :, 2:, :]) + 2.0 * xp[:, :, 1:-1, :]
    gx = sv[:, :, :, :-2] - sv[:, :, :, 2:]
    # horizontal smoothing then vertical difference -> gy (kernel SOBEL_Y)
    sh = (xp[:, :, :, :-2] + xp[:, :, :, 2:]) + 2.0 * xp[:, :, :, 1:-1]
    gy = sh[:, :, :-2, :] - sh[:, :, 2:, :]
    mag = np.sqrt(gx * gx + gy * gy)

    def vjp(g):
        safe = np.where(mag > 0, mag, 1.0)
        scale = np.where(mag > 0, g / safe, 0.0)
        dgx, dgy = scale * gx, scale * gy
        dsv = np.zeros_like(sv)
        dsv[:, :, :, :-2] += dgx
        dsv[:, :, :, 2:] -= dgx
        dsh = np.zeros_like(sh)
        dsh[:, :, :-2, :] += dgy
        dsh[:, :, 2:, :] -= dgy
        dxp = np.zeros_like(xp)
        dxp[:, :, :-2, :] += dsv
        dxp[:, :, 2:, :] += dsv
        dxp[:, :, 1:-1, :] += 2.0 * dsv
        dxp[:, :, :, :-2] += dsh
        dxp[:, :, :, 2:] += dsh
        dxp[:, :, :, 1:-1] += 2.0 * dsh
        return (_unpad_grad(dxp, 1, PadMode.REPLICATE),)

    return make_result("sobel_magnitude", mag, (x,), vjp)


# ---------------------------------------------------------------------------
# resampling

@lru_cache(maxsize=256)
def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Half-pixel-centred linear interpolation weights, shape (n_out, n_in)."""
    a = np.zeros((n_out, n_in))
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    lam = src - i0
    rows = np.arange(n_out)
    np.add.at(a, (rows, i0), 1.0 - lam)
    np.add.at(a, (rows, i1), lam)
    a.setflags(write=False)
    return a


def resize_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize with half-pixel centres, up or down (no antialiasing)."""
    _require_rank(x, 4, "resize_bilinear")
    n, c, h, w = x.shape
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"resize_bilinear: invalid target {out_h}x{out_w}")
    if (out_h, out_w) == (h, w):
        return make_result("resize_bilinear", x.data.copy(), (x,), lambda g: (g,))
    ah = _interp_matrix(h, out_h)
    aw = _interp_matrix(w, out_w)
    y = np.einsum("ih,nchw,jw->ncij", ah, x.data, aw, optimize=True)

    def vjp(g):
        return (np.einsum("ih,ncij,jw->nchw", ah, g, aw, optimize=True),)

    return make_result("resize_bilinear", y, (x,), vjp)


def upsample_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    _require_rank(x, 4, "upsample_bilinear")
    h, w = x.shape[2:]
    if out_h < h or out_w < w:
        raise ShapeError(f"upsample_bilinear: {h}x{w} -> {out_h}x{out_w} is a downscale")
    return resize_bilinear(x, out_h, out_w)


# ---------------------------------------------------------------------------
# normalisation and loss

def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = BN_EPS) -> Tensor:
    """Per-channel standardisation over (n, h, w) using batch statistics."""
    _require_rank(x, 4, "batchnorm")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm: affine shape {gamma.shape}/{beta.shape} for {c} channels")
    m = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]
    mu = x.data.mean(axis=(0, 2, 3), keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=(0, 2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gm = gamma.data[None, :, None, None]
    y = gm * xhat + beta.data[None, :, None, None]

    def vjp(g):
        dxhat = g * gm
        s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
        s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
        gx = inv / m * (m * dxhat - s1 - xhat * s2)
        return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return make_result("batchnorm", y, (x, gamma, beta), vjp)


def bce(p: Tensor, target: np.ndarray, eps: float = BCE_EPS) -> Tensor:
    """Mean binary cross-entropy of probabilities ``p`` against ``target``.

    Probabilities are clamped to [eps, 1 - eps]; the gradient is zero where
    the clamp is active.
    """
    t = np.asarray(target, dtype=np.float64)
    if t.shape != p.shape:
        raise ShapeError(f"bce: prediction {p.shape} vs target {t.shape}")
    pc = np.clip(p.data, eps, 1.0 - eps)
    n = pc.size
    loss = -np.mean(t * np.log(pc) + (1.0 - t) * np.log(1.0 - pc))
    inside = (p.data > eps) & (p.data < 1.0 - eps)

    def vjp(g):
        return (float(g) * inside * (pc - t) / (pc * (1.0 - pc)) / n,)

    return make_result("bce", np.asarray(loss), (p,), vjp)
