"""U-shaped denoiser with frequency-mixer encoder blocks.

Encoder stages run two channel-split mixer blocks (plus a Res block on all
but the deepest stage); the decoder mirrors the ladder with Res blocks only,
consuming skip connections. Each expert variant differs only in how much of
every stage's channel budget goes to the convolutional (high-frequency)
mixer versus the attention (low-frequency) mixer: experts assigned to
noisier chain segments shift the budget toward attention, and deeper stages
do the same within one expert.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from fractions import Fraction

import numpy as np

from .blocks import (
    AttentionBlock,
    Conv2d,
    FrequencyMixerBlock,
    GroupNorm,
    ParamStore,
    ResBlock,
    make_channel_split,
    sinusoidal_embedding,
)
from .numerics import Tensor, ops
from .numerics.tensor import ShapeError

# High-mixer channel share per (expert row, stage column) for the canonical
# four-expert, four-stage layout. Expert rows are ordered from the cleanest
# chain segment (more convolution) to the noisiest (more attention).
SPLIT_FRACTION_TABLE: tuple[tuple[Fraction, ...], ...] = (
    (Fraction(3, 4), Fraction(5, 8), Fraction(1, 2), Fraction(1, 4)),
    (Fraction(3, 4), Fraction(1, 2), Fraction(3, 8), Fraction(1, 8)),
    (Fraction(3, 4), Fraction(3, 8), Fraction(1, 4), Fraction(1, 16)),
    (Fraction(3, 4), Fraction(1, 4), Fraction(1, 8), Fraction(1, 16)),
)


@dataclass(frozen=True)
class StageSpec:
    channels: int
    num_mixer_blocks: int
    has_res_block: bool
    split_fraction_high: Fraction


@dataclass(frozen=True)
class ExpertArchConfig:
    base_channels: int
    multipliers: tuple[int, ...]
    time_embed_dim: int
    in_channels: int
    stages: tuple[StageSpec, ...]

    def __post_init__(self):
        if len(self.stages) != len(self.multipliers):
            raise ValueError("one stage spec per multiplier required")
        prev = Fraction(1)
        for st in self.stages:
            f = Fraction(st.split_fraction_high)
            if not 0 <= f <= 1:
                raise ValueError(f"split fraction {f} outside [0, 1]")
            if f > prev:
                raise ValueError("split fractions must be non-increasing with depth")
            prev = f

    @property
    def num_stages(self) -> int:
        return len(self.stages)

    def to_json(self) -> dict:
        return {
            "base_channels": self.base_channels,
            "multipliers": list(self.multipliers),
            "time_embed_dim": self.time_embed_dim,
            "in_channels": self.in_channels,
            "stages": [
                {
                    "channels": st.channels,
                    "num_mixer_blocks": st.num_mixer_blocks,
                    "has_res_block": st.has_res_block,
                    "split_fraction_high": str(st.split_fraction_high),
                }
                for st in self.stages
            ],
        }

    @staticmethod
    def from_json(d: dict) -> "ExpertArchConfig":
        stages = tuple(
            StageSpec(
                channels=int(st["channels"]),
                num_mixer_blocks=int(st["num_mixer_blocks"]),
                has_res_block=bool(st["has_res_block"]),
                split_fraction_high=Fraction(st["split_fraction_high"]),
            )
            for st in d["stages"]
        )
        return ExpertArchConfig(
            base_channels=int(d["base_channels"]),
            multipliers=tuple(int(m) for m in d["multipliers"]),
            time_embed_dim=int(d["time_embed_dim"]),
            in_channels=int(d["in_channels"]),
            stages=stages,
        )


def make_base_arch(
    base_channels: int,
    multipliers,
    time_embed_dim: int = 128,
    in_channels: int = 1,
    num_mixer_blocks: int = 2,
) -> ExpertArchConfig:
    """Stage ladder with the first expert row's split fractions as default."""
    multipliers = tuple(int(m) for m in multipliers)
    fracs = split_fractions_for(1, 1, len(multipliers))
    stages = tuple(
        StageSpec(
            channels=base_channels * m,
            num_mixer_blocks=num_mixer_blocks,
            has_res_block=(k < len(multipliers) - 1),
            split_fraction_high=fracs[k],
        )
        for k, m in enumerate(multipliers)
    )
    return ExpertArchConfig(base_channels, multipliers, time_embed_dim, in_channels, stages)


def split_fractions_for(n: int, num_experts: int, num_stages: int) -> tuple[Fraction, ...]:
    """High-mixer share per stage for expert n of N.

    The canonical 4x4 table is interpolated piecewise-linearly (exact
    rational arithmetic) in normalized expert index and stage index, so the
    four-expert, four-stage case reproduces the table verbatim and a single
    expert gets the first row.
    """
    if not 1 <= n <= num_experts:
        raise ValueError(f"expert index {n} outside 1..{num_experts}")
    if num_stages < 1:
        raise ValueError("need at least one stage")

    def axis_pos(i: int, count: int) -> Fraction:
        return Fraction(0) if count == 1 else Fraction(3 * i, count - 1)

    def bounds(pos: Fraction) -> tuple[int, int, Fraction]:
        lo = min(int(pos), 2)
        return lo, lo + 1, pos - lo

    u0, u1, wu = bounds(axis_pos(n - 1, num_experts))
    out = []
    for k in range(num_stages):
        v0, v1, wv = bounds(axis_pos(k, num_stages))
        t = SPLIT_FRACTION_TABLE
        f = (
            (1 - wu) * (1 - wv) * t[u0][v0]
            + (1 - wu) * wv * t[u0][v1]
            + wu * (1 - wv) * t[u1][v0]
            + wu * wv * t[u1][v1]
        )
        out.append(f)
    return tuple(out)


def expert_arch_for(n: int, num_experts: int, base: ExpertArchConfig) -> ExpertArchConfig:
    """Specialize the base ladder for expert n of N (split fractions only)."""
    fracs = split_fractions_for(n, num_experts, base.num_stages)
    stages = tuple(replace(st, split_fraction_high=f) for st, f in zip(base.stages, fracs))
    return replace(base, stages=stages)


class Denoiser:
    """Noise-prediction network; output shape equals input shape."""

    def __init__(self, config: ExpertArchConfig, seed: int):
        self.config = config
        self.seed = int(seed)
        self.schedule = None  # attached by training / checkpoint load
        self.params = ParamStore()
        rng = np.random.default_rng(self.seed)
        store, tdim = self.params, config.time_embed_dim
        chans = [st.channels for st in config.stages]

        self.stem = Conv2d(store, "stem/conv", config.in_channels, chans[0], 3, rng)

        self.enc_stages = []
        self.downs = []
        for k, st in enumerate(config.stages):
            cs = make_channel_split(st.channels, st.split_fraction_high)
            mixers = [
                FrequencyMixerBlock(store, f"blocks/enc{k + 1}/{i}", st.channels, cs, tdim, rng)
                for i in range(st.num_mixer_blocks)
            ]
            res = None
            if st.has_res_block:
                res = ResBlock(store, f"blocks/enc{k + 1}/{st.num_mixer_blocks}", st.channels, st.channels, tdim, rng)
            self.enc_stages.append((mixers, res))
            if k < len(chans) - 1:
                self.downs.append(Conv2d(store, f"blocks/enc{k + 1}/down", chans[k], chans[k + 1], 2, rng, stride=2, pad=0))

        c_mid = chans[-1]
        self.mid_res1 = ResBlock(store, "blocks/mid/0", c_mid, c_mid, tdim, rng)
        self.mid_attn = AttentionBlock(store, "blocks/mid/1", c_mid, rng)
        self.mid_res2 = ResBlock(store, "blocks/mid/2", c_mid, c_mid, tdim, rng)

        self.dec_stages = []
        self.ups = []
        for k in range(len(chans) - 1, -1, -1):
            c = chans[k]
            res1 = ResBlock(store, f"blocks/dec{k + 1}/0", 2 * c, c, tdim, rng)
            res2 = ResBlock(store, f"blocks/dec{k + 1}/1", c, c, tdim, rng)
            self.dec_stages.append((k, res1, res2))
            if k > 0:
                self.ups.append(Conv2d(store, f"blocks/dec{k + 1}/up", c, chans[k - 1], 3, rng))

        self.head_norm = GroupNorm(store, "head/norm", chans[0])
        self.head_conv = Conv2d(store, "head/conv", chans[0], config.in_channels, 3, rng, zero_init=True)

    # -- forward -----------------------------------------------------------

    def _check_input(self, x: Tensor) -> None:
        if x.data.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise ShapeError(f"expected (N,{self.config.in_channels},H,W), got {x.shape}")
        div = 2 ** (self.config.num_stages - 1)
        if x.shape[2] % div or x.shape[3] % div:
            raise ShapeError(f"spatial extents {x.shape[2:]} not divisible by {div}")

    def _forward(self, x: Tensor, t, want_taps: bool):
        self._check_input(x)
        batch = x.shape[0]
        tt = np.asarray(t)
        if self.schedule is not None:
            lo, hi = int(tt.min()), int(tt.max())
            if lo < 0 or hi >= self.schedule.steps:
                raise ShapeError(f"time-step {t} outside [0, {self.schedule.steps})")
        temb = sinusoidal_embedding(np.broadcast_to(tt, (batch,)), self.config.time_embed_dim)

        taps: list[tuple[str, Tensor]] = []
        h = self.stem(x)
        skips = []
        for k, (mixers, res) in enumerate(self.enc_stages):
            for blk in mixers:
                h = blk(h, temb)
            if res is not None:
                h = res(h, temb)
            if want_taps:
                taps.append((f"enc#{k + 1}", h))
            skips.append(h)
            if k < len(self.downs):
                h = self.downs[k](h)

        h = self.mid_res1(h, temb)
        h = self.mid_attn(h)
        h = self.mid_res2(h, temb)

        up_i = 0
        for k, res1, res2 in self.dec_stages:
            h = ops.concat_channels((h, skips[k]))
            h = res1(h, temb)
            h = res2(h, temb)
            if want_taps:
                taps.append((f"dec#{k + 1}", h))
            if k > 0:
                h = self.ups[up_i](ops.upsample_nearest(h, 2))
                up_i += 1

        eps = self.head_conv(ops.silu(self.head_norm(h)))
        return eps, taps

    def predict(self, x_t: Tensor, t) -> Tensor:
        eps, _ = self._forward(x_t, t, want_taps=False)
        return eps

    def predict_with_taps(self, x_t: Tensor, t):
        return self._forward(x_t, t, want_taps=True)

    def num_parameters(self) -> int:
        return self.params.total_size()

    def tap_layout(self) -> list[str]:
        k = self.config.num_stages
        return [f"enc#{i + 1}" for i in range(k)] + [f"dec#{i}" for i in range(k, 0, -1)]


def build_denoiser(config: ExpertArchConfig, seed: int) -> Denoiser:
    return Denoiser(config, seed)


def denoise(model: Denoiser, x_t: Tensor, t) -> Tensor:
    return model.predict(x_t, t)


def denoise_with_taps(model: Denoiser, x_t: Tensor, t):
    return model.predict_with_taps(x_t, t)
