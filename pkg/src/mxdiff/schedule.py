"""Noise schedules, the forward corruption process, the training objective,
and both ancestral and deterministic reverse samplers.

Time-steps are 0-based internally: t = 0 is the least-noised chain state and
t = T-1 the most-noised. Signal retention is tracked by the cumulative
product ``alpha_bar``; the "one step past the chain start" value
``alpha_bar(-1) == 1`` lets the deterministic sampler land exactly on the
clean estimate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import Tensor
from .numerics.tensor import ShapeError, check_finite


class ScheduleError(ValueError):
    """Schedule construction or step-index contract violation."""


@dataclass(frozen=True)
class DiffusionSchedule:
    """Per-step noise rates: beta[t], alpha[t] = 1 - beta[t], and the
    cumulative signal retention alpha_bar[t] = prod(alpha[:t+1])."""

    steps: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    beta_start: float
    beta_end: float
    kind: str = "linear"

    def alpha_bar_at(self, t: int) -> float:
        """alpha_bar with the t = -1 convention alpha_bar(-1) = 1 (no noise)."""
        if t == -1:
            return 1.0
        self._check_t(t)
        return float(self.alpha_bar[t])

    def _check_t(self, t: int) -> None:
        if not 0 <= t < self.steps:
            raise ScheduleError(f"time-step {t} outside [0, {self.steps})")

    def describe(self) -> dict:
        return {
            "steps": self.steps,
            "beta_start": self.beta_start,
            "beta_end": self.beta_end,
            "kind": self.kind,
        }


DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 2e-2


def make_linear_schedule(
    steps: int,
    beta_start: float = DEFAULT_BETA_START,
    beta_end: float = DEFAULT_BETA_END,
) -> DiffusionSchedule:
    """Linearly interpolated beta, inclusive of both endpoints."""
    if steps < 1:
        raise ScheduleError(f"steps must be >= 1, got {steps}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ScheduleError(f"need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]")
    if steps == 1:
        beta = np.array([beta_start], dtype=np.float64)
    else:
        beta = np.linspace(beta_start, beta_end, steps, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    return DiffusionSchedule(steps, beta, alpha, alpha_bar, float(beta_start), float(beta_end))


def schedule_from_descriptor(desc: dict) -> DiffusionSchedule:
    if desc.get("kind", "linear") != "linear":
        raise ScheduleError(f"unsupported schedule kind {desc.get('kind')!r}")
    return make_linear_schedule(int(desc["steps"]), float(desc["beta_start"]), float(desc["beta_end"]))


def _per_sample(values: np.ndarray, t, batch: int) -> np.ndarray:
    """Gather a per-step scalar for scalar t or a length-batch t vector,
    shaped for NCHW broadcasting."""
    tt = np.asarray(t)
    if tt.ndim == 0:
        return np.asarray(values[int(tt)])
    if tt.shape != (batch,):
        raise ShapeError(f"per-sample t must have shape ({batch},), got {tt.shape}")
    return values[tt.astype(np.int64)].reshape(batch, 1, 1, 1)


def _check_t_range(t, steps: int) -> None:
    tt = np.asarray(t)
    if tt.min() < 0 or tt.max() >= steps:
        raise ScheduleError(f"time-step {t} outside [0, {steps})")


def forward_noise(x0: Tensor, t, eps: Tensor, s: DiffusionSchedule) -> Tensor:
    """Jump the chain directly to step t: sqrt(ab)*x0 + sqrt(1-ab)*eps.

    ``t`` may be a scalar or a per-sample vector matching x0's batch extent.
    """
    if eps.shape != x0.shape:
        raise ShapeError(f"eps shape {eps.shape} must match x0 shape {x0.shape}")
    _check_t_range(t, s.steps)
    ab = _per_sample(s.alpha_bar, t, x0.shape[0] if x0.data.ndim else 1)
    arr = np.sqrt(ab) * x0.data + np.sqrt(1.0 - ab) * eps.data
    return Tensor(check_finite(arr.astype(x0.dtype, copy=False), "forward_noise"))


def score_from_eps(eps_hat: Tensor, t, s: DiffusionSchedule) -> Tensor:
    """Convert a noise prediction into the log-density gradient:
    score = -eps_hat / sqrt(1 - alpha_bar_t)."""
    _check_t_range(t, s.steps)
    ab = _per_sample(s.alpha_bar, t, eps_hat.shape[0] if eps_hat.data.ndim else 1)
    if np.any(1.0 - ab <= 0.0):
        raise ScheduleError(f"degenerate step t={t}: alpha_bar is 1")
    arr = -eps_hat.data / np.sqrt(1.0 - ab)
    return Tensor(check_finite(arr.astype(eps_hat.dtype, copy=False), "score_from_eps"))


def training_loss(model, x0: Tensor, t, eps: Tensor, s: DiffusionSchedule) -> Tensor:
    """Noise-prediction MSE on the jumped-to state; differentiable w.r.t.
    the model parameters through the active tape."""
    from .numerics import ops

    x_t = forward_noise(x0, t, eps, s)
    eps_hat = model.predict(x_t, t)
    return ops.mse(eps_hat, eps)


def ddpm_reverse_step(x_t: Tensor, t: int, eps_hat: Tensor, s: DiffusionSchedule, noise: Tensor) -> Tensor:
    """One ancestral step: (1/sqrt(1-beta)) * (x_t + beta * score) + sqrt(beta) * z."""
    if noise.shape != x_t.shape:
        raise ShapeError(f"noise shape {noise.shape} must match x_t shape {x_t.shape}")
    s._check_t(t)
    if t == 0 and np.any(noise.data != 0.0):
        raise ScheduleError("noise must be zero at the final step t=0")
    beta = float(s.beta[t])
    score = score_from_eps(eps_hat, t, s)
    arr = (x_t.data + beta * score.data) / np.sqrt(1.0 - beta) + np.sqrt(beta) * noise.data
    return Tensor(check_finite(arr.astype(x_t.dtype, copy=False), "ddpm_reverse_step"))


def ddim_step(
    x_t: Tensor,
    t: int,
    t_prev: int,
    eps_hat: Tensor,
    eta: float,
    s: DiffusionSchedule,
    noise: Tensor | None = None,
) -> Tensor:
    """Deterministic-to-ancestral interpolating step.

    Estimates the clean signal, then re-noises it to level t_prev with a
    direction split between the predicted noise and fresh noise (weight eta).
    ``t_prev == -1`` targets the fully denoised state (alpha_bar = 1). With
    eta == 0 the step is a pure function of its inputs and ``noise`` is
    ignored.
    """
    s._check_t(t)
    if not -1 <= t_prev < t:
        raise ScheduleError(f"t_prev {t_prev} must satisfy -1 <= t_prev < t (= {t})")
    if not 0.0 <= eta <= 1.0:
        raise ScheduleError(f"eta must lie in [0, 1], got {eta}")
    ab_t = s.alpha_bar_at(t)
    ab_prev = s.alpha_bar_at(t_prev)
    x0_hat = (x_t.data - np.sqrt(1.0 - ab_t) * eps_hat.data) / np.sqrt(ab_t)
    sigma = eta * np.sqrt((1.0 - ab_prev) / (1.0 - ab_t)) * np.sqrt(1.0 - ab_t / ab_prev)
    resid = 1.0 - ab_prev - sigma**2
    if resid < -1e-12:
        raise ScheduleError(f"sigma^2 = {sigma**2} exceeds 1 - alpha_bar_prev = {1.0 - ab_prev}")
    arr = np.sqrt(ab_prev) * x0_hat + np.sqrt(max(resid, 0.0)) * eps_hat.data
    if eta > 0.0:
        if noise is None:
            raise ScheduleError("eta > 0 requires a noise tensor")
        if noise.shape != x_t.shape:
            raise ShapeError(f"noise shape {noise.shape} must match x_t shape {x_t.shape}")
        arr = arr + sigma * noise.data
    return Tensor(check_finite(arr.astype(x_t.dtype, copy=False), "ddim_step"))


def ddim_timesteps(steps: int, total: int) -> np.ndarray:
    """Uniform-stride sub-sequence over [0, total-1], both ends included,
    ascending."""
    if not 1 <= steps <= total:
        raise ScheduleError(f"steps must lie in [1, {total}], got {steps}")
    if steps == 1:
        return np.array([total - 1], dtype=np.int64)
    grid = np.linspace(0, total - 1, steps)
    return np.unique(np.round(grid).astype(np.int64))
