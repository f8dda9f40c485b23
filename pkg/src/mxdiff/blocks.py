"""Denoiser building blocks.

The central block splits channels into a convolution-based high-frequency
mixer and an attention-based low-frequency mixer, fuses the branch outputs,
and adds the result back onto the input. A conventional pre-activation Res
block and a bottleneck self-attention block complete the kit. All blocks
receive the per-sample time embedding by addition.

Residual-branch output layers are zero-initialized, so every freshly built
block is the identity map.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import Tensor, ops
from .numerics.tensor import ShapeError

POOL_STRIDE = 2
HEAD_WIDTH = 32
NORM_GROUPS = 8


class ParamStore:
    """Named trainable tensors in deterministic construction order."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, array: np.ndarray) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(array, dtype=np.float32), requires_grad=True)
        self._params[name] = t
        return t

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __len__(self) -> int:
        return len(self._params)

    def total_size(self) -> int:
        return sum(t.size for t in self._params.values())

    def as_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self._params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(arrays)
        extra = set(arrays) - set(self._params)
        if missing or extra:
            raise KeyError(f"parameter set mismatch: missing {sorted(missing)}, extra {sorted(extra)}")
        for k, t in self._params.items():
            arr = np.asarray(arrays[k], dtype=np.float32)
            if arr.shape != t.shape:
                raise ShapeError(f"parameter {k!r}: shape {arr.shape} != {t.shape}")
            t.data = np.ascontiguousarray(arr)


def fan_in_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


# ---------------------------------------------------------------------------
# layer primitives


class Conv2d:
    def __init__(self, store, name, c_in, c_out, k, rng, stride=1, pad=None, zero_init=False):
        self.stride = stride
        self.pad = k // 2 if pad is None else pad
        shape = (c_out, c_in, k, k)
        w = np.zeros(shape, np.float32) if zero_init else fan_in_uniform(rng, shape, c_in * k * k)
        self.w = store.add(f"{name}/w", w)
        self.b = store.add(f"{name}/b", np.zeros(c_out, np.float32))
        self.c_out = c_out

    def __call__(self, x: Tensor) -> Tensor:
        y = ops.conv2d(x, self.w, stride=self.stride, pad=self.pad)
        return ops.add(y, ops.reshape(self.b, (1, self.c_out, 1, 1)))


class DepthwiseConv2d:
    def __init__(self, store, name, c, k, rng):
        self.pad = k // 2
        self.w = store.add(f"{name}/w", fan_in_uniform(rng, (c, 1, k, k), k * k))
        self.b = store.add(f"{name}/b", np.zeros(c, np.float32))
        self.c = c

    def __call__(self, x: Tensor) -> Tensor:
        y = ops.depthwise_conv2d(x, self.w, pad=self.pad)
        return ops.add(y, ops.reshape(self.b, (1, self.c, 1, 1)))


class Linear:
    def __init__(self, store, name, d_in, d_out, rng, zero_init=False):
        w = np.zeros((d_in, d_out), np.float32) if zero_init else fan_in_uniform(rng, (d_in, d_out), d_in)
        self.w = store.add(f"{name}/w", w)
        self.b = store.add(f"{name}/b", np.zeros(d_out, np.float32))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.w, self.b)


class GroupNorm:
    def __init__(self, store, name, c, groups=NORM_GROUPS):
        if c % groups:
            raise ShapeError(f"channels {c} not divisible by {groups} norm groups")
        self.groups = groups
        self.gamma = store.add(f"{name}/gamma", np.ones(c, np.float32))
        self.beta = store.add(f"{name}/beta", np.zeros(c, np.float32))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.group_norm(x, self.gamma, self.beta, groups=self.groups)


class LayerNorm:
    def __init__(self, store, name, d):
        self.gamma = store.add(f"{name}/gamma", np.ones(d, np.float32))
        self.beta = store.add(f"{name}/beta", np.zeros(d, np.float32))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.layer_norm_last(x, self.gamma, self.beta)


# ---------------------------------------------------------------------------
# time conditioning


def sinusoidal_embedding(t, dim: int) -> Tensor:
    """Fixed sin/cos features of the step index; shape (batch, dim)."""
    if dim % 2:
        raise ShapeError(f"time embedding dim must be even, got {dim}")
    tt = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half - 1, 1))
    args = tt[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    return Tensor(emb.astype(np.float32))


class TimeProjection:
    """Per-block two-layer map from the sinusoidal base to channel width."""

    def __init__(self, store, name, time_dim, c_out, rng):
        self.fc1 = Linear(store, f"{name}/fc1", time_dim, time_dim, rng)
        self.fc2 = Linear(store, f"{name}/fc2", time_dim, c_out, rng)
        self.c_out = c_out

    def __call__(self, temb: Tensor) -> Tensor:
        h = self.fc2(ops.silu(self.fc1(temb)))
        return ops.reshape(h, (temb.shape[0], self.c_out, 1, 1))


# ---------------------------------------------------------------------------
# channel split bookkeeping


@dataclass(frozen=True)
class ChannelSplit:
    """How a block's channels divide between the two mixers.

    d = d_h + d_l always; the high share is further halved into d_h1/d_h2
    with the remainder going to d_h2.
    """

    d: int
    d_h: int
    d_l: int
    d_h1: int
    d_h2: int

    def __post_init__(self):
        if min(self.d, self.d_h, self.d_l, self.d_h1, self.d_h2) < 0:
            raise ShapeError(f"negative channel counts in {self}")
        if self.d_h + self.d_l != self.d:
            raise ShapeError(f"d_h + d_l must equal d: {self}")
        if self.d_h1 + self.d_h2 != self.d_h:
            raise ShapeError(f"d_h1 + d_h2 must equal d_h: {self}")
        if self.d_l > 0 and self.d_l < attention_heads(self.d_l):
            raise ShapeError(f"d_l {self.d_l} smaller than head count")

    @property
    def heads(self) -> int:
        return attention_heads(self.d_l)


def attention_heads(d: int) -> int:
    """Head count for width d: one head per HEAD_WIDTH channels, at least one."""
    return max(1, d // HEAD_WIDTH)


def make_channel_split(d: int, frac_high) -> ChannelSplit:
    """Round frac_high * d to an integer high-mixer width, nudging so the
    low-mixer width divides evenly into heads."""
    if d < 1:
        raise ShapeError(f"total channels must be positive, got {d}")
    if not 0 <= float(frac_high) <= 1:
        raise ShapeError(f"split fraction {frac_high} outside [0, 1]")
    target = int(round(float(frac_high) * d))
    for offset in range(d + 1):
        for cand in (target - offset, target + offset):
            if not 0 <= cand <= d:
                continue
            d_l = d - cand
            if d_l == 0 or d_l % attention_heads(d_l) == 0:
                return ChannelSplit(d, cand, d_l, cand // 2, cand - cand // 2)
    raise ShapeError(f"no feasible split for d={d}, frac={frac_high}")


def channel_split(z: Tensor, cs: ChannelSplit) -> tuple[Tensor, Tensor, Tensor]:
    """Contiguous channel ranges [0,d_h1), [d_h1,d_h), [d_h,d)."""
    if z.shape[1] != cs.d:
        raise ShapeError(f"input has {z.shape[1]} channels, split expects {cs.d}")
    return ops.split_channels(z, (cs.d_h1, cs.d_h2, cs.d_l))


# ---------------------------------------------------------------------------
# attention


class Mhsa:
    """Multi-head self-attention over token sequences (B, S, D).

    No positional encoding, so the map is permutation-equivariant in S.
    """

    def __init__(self, store, name, dim, heads, rng, zero_out=False):
        if dim % heads:
            raise ShapeError(f"dim {dim} not divisible by {heads} heads")
        self.dim, self.heads, self.head_dim = dim, heads, dim // heads
        self.wq = Linear(store, f"{name}/q", dim, dim, rng)
        self.wk = Linear(store, f"{name}/k", dim, dim, rng)
        self.wv = Linear(store, f"{name}/v", dim, dim, rng)
        self.out = Linear(store, f"{name}/out", dim, dim, rng, zero_init=zero_out)

    def __call__(self, tokens: Tensor, return_attn: bool = False):
        b, s, d = tokens.shape
        h, hd = self.heads, self.head_dim
        flat = ops.reshape(tokens, (b * s, d))

        def heads_of(lin):
            y = ops.reshape(lin(flat), (b, s, h, hd))
            return ops.reshape(ops.transpose(y, (0, 2, 1, 3)), (b * h, s, hd))

        q = ops.scale(heads_of(self.wq), 1.0 / math.sqrt(hd))
        k = heads_of(self.wk)
        v = heads_of(self.wv)
        attn = ops.softmax_last(ops.bmm(q, ops.transpose(k, (0, 2, 1))))
        ctx = ops.bmm(attn, v)  # (b*h, s, hd)
        ctx = ops.reshape(ops.transpose(ops.reshape(ctx, (b, h, s, hd)), (0, 2, 1, 3)), (b * s, d))
        y = ops.reshape(self.out(ctx), (b, s, d))
        return (y, attn) if return_attn else y


def to_tokens(x: Tensor) -> Tensor:
    """(N,C,H,W) -> (N, H*W, C)."""
    n, c, h, w = x.shape
    return ops.transpose(ops.reshape(x, (n, c, h * w)), (0, 2, 1))


def from_tokens(x: Tensor, h: int, w: int) -> Tensor:
    """(N, H*W, C) -> (N,C,H,W)."""
    n, s, c = x.shape
    return ops.reshape(ops.transpose(x, (0, 2, 1)), (n, c, h, w))


# ---------------------------------------------------------------------------
# mixers


class HighMixer:
    """Convolutional branch pair: max-pool/FC (restored to input resolution)
    and FC/depthwise-conv. Preserves each branch's channel count."""

    def __init__(self, store, name, d_h1, d_h2, rng):
        self.d_h1, self.d_h2 = d_h1, d_h2
        if d_h1:
            self.fc1 = Conv2d(store, f"{name}/pool_fc", d_h1, d_h1, 1, rng)
        if d_h2:
            self.fc2 = Conv2d(store, f"{name}/conv_fc", d_h2, d_h2, 1, rng)
            self.dconv = DepthwiseConv2d(store, f"{name}/dconv", d_h2, 3, rng)

    def __call__(self, z_h1: Tensor | None, z_h2: Tensor | None):
        y1 = y2 = None
        if self.d_h1:
            p = ops.pool2d(z_h1, "max", POOL_STRIDE)
            y1 = ops.upsample_nearest(ops.gelu(self.fc1(p)), POOL_STRIDE)
        if self.d_h2:
            y2 = self.dconv(ops.gelu(self.fc2(z_h2)))
        return y1, y2


class LowMixer:
    """Attention branch: average-pool to tokens, pre-norm MHSA, upsample back."""

    def __init__(self, store, name, d_l, heads, rng):
        self.d_l = d_l
        if d_l:
            self.norm = LayerNorm(store, f"{name}/prenorm", d_l)
            self.attn = Mhsa(store, f"{name}/attn", d_l, heads, rng)

    def __call__(self, z_l: Tensor | None) -> Tensor | None:
        if not self.d_l:
            return None
        n, c, h, w = z_l.shape
        p = ops.pool2d(z_l, "avg", POOL_STRIDE)
        tokens = self.attn(self.norm(to_tokens(p)))
        return ops.upsample_nearest(from_tokens(tokens, h // POOL_STRIDE, w // POOL_STRIDE), POOL_STRIDE)


class Fusion:
    """Counter-smoothing fusion: FC(Y_c + D-Conv(Y_c)); FC zero-initialized
    so the enclosing residual block starts as the identity."""

    def __init__(self, store, name, d, rng):
        self.dconv = DepthwiseConv2d(store, f"{name}/dconv", d, 3, rng)
        self.fc = Conv2d(store, f"{name}/fc", d, d, 1, rng, zero_init=True)

    def __call__(self, y_h1, y_h2, y_l) -> Tensor:
        parts = [p for p in (y_h1, y_h2, y_l) if p is not None]
        y_c = parts[0] if len(parts) == 1 else ops.concat_channels(parts)
        return self.fc(ops.add(y_c, self.dconv(y_c)))


class FrequencyMixerBlock:
    """Channel-split mixer block: time-shift, normalize, split, run both
    mixers, fuse, residual-add. Shape preserving."""

    def __init__(self, store, name, d, cs: ChannelSplit, time_dim, rng):
        if cs.d != d:
            raise ShapeError(f"split {cs} does not match block width {d}")
        self.cs = cs
        self.tproj = TimeProjection(store, f"{name}/time", time_dim, d, rng)
        self.norm = GroupNorm(store, f"{name}/norm", d)
        self.high = HighMixer(store, f"{name}/high", cs.d_h1, cs.d_h2, rng)
        self.low = LowMixer(store, f"{name}/low", cs.d_l, cs.heads, rng)
        self.fuse = Fusion(store, f"{name}/fuse", d, rng)

    def __call__(self, z: Tensor, temb: Tensor) -> Tensor:
        h = self.norm(ops.add(z, self.tproj(temb)))
        z_h1, z_h2, z_l = channel_split(h, self.cs)
        y_h1, y_h2 = self.high(z_h1 if self.cs.d_h1 else None, z_h2 if self.cs.d_h2 else None)
        y_l = self.low(z_l if self.cs.d_l else None)
        return ops.add(z, self.fuse(y_h1, y_h2, y_l))


class ResBlock:
    """Pre-activation residual block with time injection between the convs;
    1x1 shortcut when the channel count changes."""

    def __init__(self, store, name, c_in, c_out, time_dim, rng):
        self.norm1 = GroupNorm(store, f"{name}/norm1", c_in)
        self.conv1 = Conv2d(store, f"{name}/conv1", c_in, c_out, 3, rng)
        self.tproj = TimeProjection(store, f"{name}/time", time_dim, c_out, rng)
        self.norm2 = GroupNorm(store, f"{name}/norm2", c_out)
        self.conv2 = Conv2d(store, f"{name}/conv2", c_out, c_out, 3, rng, zero_init=True)
        self.shortcut = None if c_in == c_out else Conv2d(store, f"{name}/shortcut", c_in, c_out, 1, rng)

    def __call__(self, x: Tensor, temb: Tensor) -> Tensor:
        h = self.conv1(ops.silu(self.norm1(x)))
        h = ops.add(h, self.tproj(temb))
        h = self.conv2(ops.silu(self.norm2(h)))
        sc = x if self.shortcut is None else self.shortcut(x)
        return ops.add(sc, h)


class AttentionBlock:
    """Bottleneck self-attention: normalized tokens through MHSA with a
    zero-initialized output projection, added back onto the input."""

    def __init__(self, store, name, c, rng):
        self.norm = GroupNorm(store, f"{name}/norm", c)
        self.attn = Mhsa(store, f"{name}/attn", c, attention_heads(c), rng, zero_out=True)

    def __call__(self, x: Tensor) -> Tensor:
        n, c, h, w = x.shape
        tokens = to_tokens(self.norm(x))
        return ops.add(x, from_tokens(self.attn(tokens), h, w))
