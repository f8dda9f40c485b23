"""Differentiable operations over :class:`Tensor`.

Every op validates shapes, checks the result for NaN/Inf, and registers its
adjoint on the active tape. Storage is the input dtype (float32 in normal
use); reductions and normalization statistics accumulate in float64.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf as _erf

from .tensor import NonFiniteError, ShapeError, Tape, Tensor, check_finite

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _result(arr: np.ndarray, op: str, inputs: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(check_finite(arr, op))
    tape = Tape.current()
    if tape is not None and any(tape.tracks(t) for t in inputs):
        tape.record(out, inputs, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    arr = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(arr, "add", (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    arr = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(arr, "sub", (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    arr = a.data * b.data
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    return _result(arr, "mul", (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, "neg", (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(a.data * c, "scale", (a,), lambda g: (g * c,))


def add_scalar(a: Tensor, c: float) -> Tensor:
    return _result(a.data + float(c), "add_scalar", (a,), lambda g: (g,))


# ---------------------------------------------------------------------------
# activations


def silu(x: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-x.data))
    arr = x.data * s
    xd = x.data

    def backward(g):
        return (g * (s * (1.0 + xd * (1.0 - s))),)

    return _result(arr, "silu", (x,), backward)


def gelu(x: Tensor) -> Tensor:
    xd = x.data
    cdf = 0.5 * (1.0 + _erf(xd * _INV_SQRT2))
    arr = (xd * cdf).astype(x.dtype, copy=False)

    def backward(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * xd * xd)
        return (g * (cdf + xd * pdf),)

    return _result(arr, "gelu", (x,), backward)


def softmax_last(x: Tensor) -> Tensor:
    """Softmax over the trailing axis; rows sum to 1 within 1e-6."""
    e = np.exp(x.data - x.data.max(axis=-1, keepdims=True))
    denom = e.sum(axis=-1, keepdims=True, dtype=np.float64)
    y = (e / denom).astype(x.dtype, copy=False)

    def backward(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - dot),)

    return _result(y, "softmax_last", (x,), backward)


# ---------------------------------------------------------------------------
# matrix products


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} vs {b.shape}")
    arr = a.data @ b.data
    ad, bd = a.data, b.data

    def backward(g):
        return g @ bd.T, ad.T @ g

    return _result(arr, "matmul", (a, b), backward)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul: (B,m,k) @ (B,k,n) -> (B,m,n)."""
    if a.data.ndim != 3 or b.data.ndim != 3:
        raise ShapeError(f"bmm expects rank-3 operands, got {a.shape} and {b.shape}")
    if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ShapeError(f"bmm shapes disagree: {a.shape} vs {b.shape}")
    arr = np.matmul(a.data, b.data)
    ad, bd = a.data, b.data

    def backward(g):
        return np.matmul(g, bd.transpose(0, 2, 1)), np.matmul(ad.transpose(0, 2, 1), g)

    return _result(arr, "bmm", (a, b), backward)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Fully-connected layer on row-vectors: x(m,k) @ w(k,n) + b(n)."""
    if x.data.ndim != 2 or w.data.ndim != 2 or b.data.ndim != 1:
        raise ShapeError(f"linear expects (m,k),(k,n),(n), got {x.shape},{w.shape},{b.shape}")
    if x.shape[1] != w.shape[0] or w.shape[1] != b.shape[0]:
        raise ShapeError(f"linear shapes disagree: {x.shape},{w.shape},{b.shape}")
    arr = x.data @ w.data + b.data
    xd, wd = x.data, w.data

    def backward(g):
        return g @ wd.T, xd.T @ g, g.sum(axis=0, dtype=np.float64).astype(g.dtype)

    return _result(arr, "linear", (x, w, b), backward)


# ---------------------------------------------------------------------------
# convolutions


def _conv_geometry(h: int, w: int, kh: int, kw: int, stride: int, pad: int):
    hp, wp = h + 2 * pad, w + 2 * pad
    if kh > hp or kw > wp:
        raise ShapeError(f"kernel ({kh},{kw}) larger than padded input ({hp},{wp})")
    if (hp - kh) % stride or (wp - kw) % stride:
        raise ShapeError(
            f"non-divisible conv geometry: input ({h},{w}), kernel ({kh},{kw}), "
            f"stride {stride}, pad {pad}"
        )
    return (hp - kh) // stride + 1, (wp - kw) // stride + 1


def _pad_nchw(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    n, c, h, w = x.shape
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
    out[:, :, pad : pad + h, pad : pad + w] = x
    return out


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    # (N,C,Hp,Wp) -> (N*Ho*Wo, C*kh*kw)
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    n, c, ho, wo = win.shape[:4]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)


def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of NCHW input with OIHW kernel."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d expects rank-4 operands, got {x.shape} and {w.shape}")
    n, c, h, wd_ = x.shape
    o, cw, kh, kw = w.shape
    if cw != c:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape}, kernel {w.shape}")
    ho, wo = _conv_geometry(h, wd_, kh, kw, stride, pad)
    xp = _pad_nchw(x.data, pad)
    col = _im2col(xp, kh, kw, stride)  # kept alive for the adjoint
    wmat = w.data.reshape(o, c * kh * kw)
    out = (col @ wmat.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)

    def backward(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * ho * wo, o)
        dw = (g2.T @ col).reshape(o, c, kh, kw)
        # input gradient as a transposed convolution: dilate g by the
        # stride, pad by k-1-pad, correlate with the rotated kernel
        if stride == 1:
            gx = g
        else:
            gx = np.zeros((n, o, (ho - 1) * stride + 1, (wo - 1) * stride + 1), dtype=g.dtype)
            gx[:, :, ::stride, ::stride] = g
        ph, pw = kh - 1 - pad, kw - 1 - pad
        if ph < 0 or pw < 0:
            raise ShapeError(f"conv2d pad {pad} exceeds kernel-1 ({kh - 1},{kw - 1})")
        gp = gx
        if ph or pw:
            gp = np.zeros((n, o, gx.shape[2] + 2 * ph, gx.shape[3] + 2 * pw), dtype=g.dtype)
            gp[:, :, ph : ph + gx.shape[2], pw : pw + gx.shape[3]] = gx
        w_rot = np.ascontiguousarray(w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)).reshape(
            c, o * kh * kw
        )
        colg = _im2col(gp, kh, kw, 1)
        dx = (colg @ w_rot.T).reshape(n, h, wd_, c).transpose(0, 3, 1, 2)
        return np.ascontiguousarray(dx), dw

    return _result(out, "conv2d", (x, w), backward)


def depthwise_conv2d(x: Tensor, w: Tensor, pad: int = 1) -> Tensor:
    """Per-channel convolution, stride 1; kernel shape (C,1,kh,kw)."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"depthwise_conv2d expects rank-4 operands, got {x.shape},{w.shape}")
    n, c, h, wd_ = x.shape
    cw, one, kh, kw = w.shape
    if cw != c or one != 1:
        raise ShapeError(f"depthwise kernel must be (C,1,kh,kw) with C={c}, got {w.shape}")
    ho, wo = _conv_geometry(h, wd_, kh, kw, 1, pad)
    if (ho, wo) != (h, wd_):
        raise ShapeError(f"depthwise_conv2d must preserve extents; pad {pad} gives ({ho},{wo})")
    xp = _pad_nchw(x.data, pad)
    wk = w.data[:, 0]  # (C,kh,kw)
    out = np.zeros_like(x.data)
    for i in range(kh):
        for j in range(kw):
            out += xp[:, :, i : i + h, j : j + wd_] * wk[:, i, j][None, :, None, None]

    def backward(g):
        dxp = np.zeros_like(xp)
        dw = np.zeros_like(w.data)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i : i + h, j : j + wd_] += g * wk[:, i, j][None, :, None, None]
                dw[:, 0, i, j] = np.einsum(
                    "nchw,nchw->c", g, xp[:, :, i : i + h, j : j + wd_], optimize=True
                )
        dx = dxp if pad == 0 else dxp[:, :, pad:-pad, pad:-pad]
        return np.ascontiguousarray(dx), dw

    return _result(out, "depthwise_conv2d", (x, w), backward)


# ---------------------------------------------------------------------------
# pooling / resampling


def pool2d(x: Tensor, kind: str, stride: int) -> Tensor:
    """Non-overlapping pooling with window == stride."""
    if kind not in ("max", "avg"):
        raise ValueError(f"pool kind must be 'max' or 'avg', got {kind!r}")
    if x.data.ndim != 4:
        raise ShapeError(f"pool2d expects rank-4 input, got {x.shape}")
    n, c, h, w = x.shape
    s = int(stride)
    if s < 1 or h % s or w % s:
        raise ShapeError(f"extents ({h},{w}) not divisible by pool stride {s}")
    ho, wo = h // s, w // s
    win = x.data.reshape(n, c, ho, s, wo, s)

    if kind == "avg":
        out = win.mean(axis=(3, 5), dtype=np.float64).astype(x.dtype)

        def backward(g):
            spread = g[:, :, :, None, :, None] / (s * s)
            return (np.broadcast_to(spread, (n, c, ho, s, wo, s)).reshape(n, c, h, w).copy(),)

        return _result(out, "avg_pool2d", (x,), backward)

    flat = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 3, 5)).reshape(n, c, ho, wo, s * s)
    idx = flat.argmax(axis=-1)  # first max wins: deterministic under ties
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        dflat = np.zeros_like(flat)
        np.put_along_axis(dflat, idx[..., None], g[..., None], axis=-1)
        dx = dflat.reshape(n, c, ho, wo, s, s).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (np.ascontiguousarray(dx),)

    return _result(out, "max_pool2d", (x,), backward)


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError(f"upsample_nearest expects rank-4 input, got {x.shape}")
    f = int(factor)
    if f < 1:
        raise ShapeError(f"upsample factor must be >= 1, got {factor}")
    if f == 1:
        return _result(x.data.copy(), "upsample_nearest", (x,), lambda g: (g,))
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, f, axis=2), f, axis=3)

    def backward(g):
        return (g.reshape(n, c, h, f, w, f).sum(axis=(3, 5)),)

    return _result(out, "upsample_nearest", (x,), backward)


# ---------------------------------------------------------------------------
# normalization


def group_norm(x: Tensor, gamma: Tensor, beta: Tensor, groups: int = 8, eps: float = 1e-5) -> Tensor:
    """Per-sample, per-group normalization over (C/G, H, W) with affine."""
    if x.data.ndim != 4:
        raise ShapeError(f"group_norm expects rank-4 input, got {x.shape}")
    n, c, h, w = x.shape
    g_ = int(groups)
    if c % g_:
        raise ShapeError(f"channels {c} not divisible by {g_} groups")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"affine params must have shape ({c},)")
    m = (c // g_) * h * w
    xg = x.data.reshape(n, g_, m)
    # statistics accumulate in f64; the normalized array itself stays in
    # the storage dtype
    mu = xg.mean(axis=-1, keepdims=True, dtype=np.float64)
    var = np.square(xg, dtype=np.float64).mean(axis=-1, keepdims=True) - mu * mu
    inv_std = 1.0 / np.sqrt(np.maximum(var, 0.0) + eps)
    mu_s = mu.astype(x.dtype)
    inv_s = inv_std.astype(x.dtype)
    xhat = ((xg - mu_s) * inv_s).reshape(n, c, h, w)
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def backward(g):
        dxhat = (g * gamma.data[None, :, None, None]).reshape(n, g_, m)
        xh = xhat.reshape(n, g_, m)
        s1 = dxhat.mean(axis=-1, keepdims=True, dtype=np.float64).astype(x.dtype)
        s2 = (dxhat * xh).mean(axis=-1, keepdims=True, dtype=np.float64).astype(x.dtype)
        dx = (inv_s * (dxhat - s1 - xh * s2)).reshape(n, c, h, w)
        dgamma = (g * xhat).sum(axis=(0, 2, 3), dtype=np.float64).astype(gamma.dtype)
        dbeta = g.sum(axis=(0, 2, 3), dtype=np.float64).astype(beta.dtype)
        return dx, dgamma, dbeta

    return _result(out, "group_norm", (x, gamma, beta), backward)


def layer_norm_last(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalization over the trailing axis with affine (MHSA pre-norm)."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"affine params must have shape ({d},)")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True, dtype=np.float64)
    var = np.square(xd, dtype=np.float64).mean(axis=-1, keepdims=True) - mu * mu
    inv_std = (1.0 / np.sqrt(np.maximum(var, 0.0) + eps)).astype(x.dtype)
    xhat = (xd - mu.astype(x.dtype)) * inv_std
    out = xhat * gamma.data + beta.data

    def backward(g):
        dxhat = g * gamma.data
        xh = xhat
        s1 = dxhat.mean(axis=-1, keepdims=True, dtype=np.float64).astype(x.dtype)
        s2 = (dxhat * xh).mean(axis=-1, keepdims=True, dtype=np.float64).astype(x.dtype)
        dx = inv_std * (dxhat - s1 - xh * s2)
        red = tuple(range(x.data.ndim - 1))
        dgamma = (g * xhat).sum(axis=red, dtype=np.float64).astype(gamma.dtype)
        dbeta = g.sum(axis=red, dtype=np.float64).astype(beta.dtype)
        return dx, dgamma, dbeta

    return _result(out, "layer_norm_last", (x, gamma, beta), backward)


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    old = x.shape
    arr = x.data.reshape(shape)

    def backward(g):
        return (g.reshape(old),)

    return _result(np.ascontiguousarray(arr), "reshape", (x,), backward)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(int(a) for a in axes)
    inv = tuple(np.argsort(axes))
    arr = np.ascontiguousarray(x.data.transpose(axes))

    def backward(g):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return _result(arr, "transpose", (x,), backward)


def concat_channels(parts) -> Tensor:
    parts = tuple(parts)
    if not parts:
        raise ShapeError("concat_channels needs at least one part")
    base = parts[0].shape
    for p in parts:
        if p.data.ndim != 4 or p.shape[0] != base[0] or p.shape[2:] != base[2:]:
            raise ShapeError(f"concat parts disagree spatially: {[p.shape for p in parts]}")
    sizes = [p.shape[1] for p in parts]
    arr = np.concatenate([p.data for p in parts], axis=1)

    def backward(g):
        outs, lo = [], 0
        for s in sizes:
            outs.append(np.ascontiguousarray(g[:, lo : lo + s]))
            lo += s
        return tuple(outs)

    return _result(arr, "concat_channels", parts, backward)


def slice_channels(x: Tensor, lo: int, hi: int) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError(f"slice_channels expects rank-4 input, got {x.shape}")
    c = x.shape[1]
    if not (0 <= lo <= hi <= c):
        raise ShapeError(f"channel slice [{lo},{hi}) out of bounds for {c} channels")
    arr = np.ascontiguousarray(x.data[:, lo:hi])

    def backward(g):
        dx = np.zeros_like(x.data)
        dx[:, lo:hi] = g
        return (dx,)

    return _result(arr, "slice_channels", (x,), backward)


def split_channels(x: Tensor, sizes) -> tuple[Tensor, ...]:
    """Split along channels into contiguous ranges; inverse of concat."""
    sizes = [int(s) for s in sizes]
    if sum(sizes) != x.shape[1]:
        raise ShapeError(f"split sizes {sizes} do not cover {x.shape[1]} channels")
    out, lo = [], 0
    for s in sizes:
        out.append(slice_channels(x, lo, lo + s))
        lo += s
    return tuple(out)


# ---------------------------------------------------------------------------
# reductions


def sum_all(x: Tensor) -> Tensor:
    arr = np.asarray(x.data.sum(dtype=np.float64), dtype=x.dtype)
    shape, dt = x.shape, x.dtype

    def backward(g):
        return (np.full(shape, g, dtype=dt),)

    return _result(arr, "sum_all", (x,), backward)


def mean_all(x: Tensor) -> Tensor:
    n = x.size
    arr = np.asarray(x.data.mean(dtype=np.float64), dtype=x.dtype)
    shape, dt = x.shape, x.dtype

    def backward(g):
        return (np.full(shape, g / n, dtype=dt),)

    return _result(arr, "mean_all", (x,), backward)


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean squared error over all elements."""
    if a.shape != b.shape:
        raise ShapeError(f"mse operands disagree: {a.shape} vs {b.shape}")
    d = sub(a, b)
    return mean_all(mul(d, d))
