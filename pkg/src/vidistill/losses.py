"""Training objectives: denoising, distribution matching, adaptive regression, temporal."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .diffusion import NoiseSchedule, forward_diffuse, prediction_convert, schedule_coeffs
from .models import Denoiser, guided_prediction
from .numerics import check_finite, population_var, stop_grad


@dataclass
class LossWeights:
    w_reg: float = 2.0
    w_temp: float = 0.05
    k: float = 3.0
    temp_clip: float = 0.6
    temp_eps: float = 1e-6
    cfg_scale: float = 5.0

    def __post_init__(self) -> None:
        for name, value in vars(self).items():
            if value < 0 or (name in ("k", "temp_eps") and value == 0):
                raise ValueError(f"{name} must be positive, got {value}")


def denoising_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    return ((pred - target) ** 2).mean()


def regression_loss(y_hat: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Per-clip MSE. A single clip [F, C, H, W] gives a scalar, a batch gives [B]."""
    if y_hat.shape != y.shape:
        raise ValueError(f"shape mismatch: {tuple(y_hat.shape)} vs {tuple(y.shape)}")
    d = (y_hat - y) ** 2
    if d.dim() <= 4:
        return d.mean()
    return d.flatten(1).mean(dim=1)


def temporal_reg_raw(x: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """-log(mean per-pixel population variance along frames + eps).

    ``x`` is a clip [F, C, H, W] or a batch [B, F, C, H, W].
    """
    frame_dim = 0 if x.dim() == 4 else 1
    if x.shape[frame_dim] < 2:
        raise ValueError("temporal regularization needs at least two frames")
    return -torch.log(population_var(x, dim=frame_dim).mean() + eps)


def temporal_reg_loss(x: torch.Tensor, eps: float = 1e-6, clip: float = 0.6) -> torch.Tensor:
    """max(raw, clip): the gradient is exactly zero once raw drops below ``clip``."""
    return torch.clamp(temporal_reg_raw(x, eps), min=clip)


def combined_generator_loss(l_kl, l_reg, omega, l_temp, weights: LossWeights):
    """L_KL + w_reg * omega * L_reg + w_temp * L_temp with omega detached.

    ``l_reg`` and ``omega`` may be per-sample vectors; their product is averaged.
    """
    omega = stop_grad(omega) if isinstance(omega, torch.Tensor) else omega
    reg = omega * l_reg
    if isinstance(reg, torch.Tensor) and reg.dim() > 0:
        reg = reg.mean()
    return l_kl + weights.w_reg * reg + weights.w_temp * l_temp


class LossMeanCache:
    """Per-timestep EMA of the regression loss; ``alpha`` weights the history."""

    def __init__(self, timesteps, alpha: float = 0.95, dtype=np.float64):
        if not 0.0 <= alpha < 1.0:
            raise ValueError("alpha must be in [0, 1)")
        self.alpha = alpha
        self.dtype = dtype  # storage precision of the means; None keeps exact inputs (e.g. Fraction)
        self.timesteps = tuple(float(t) for t in timesteps)
        self.means: dict[float, float] = {}
        self.counts: dict[float, int] = {t: 0 for t in self.timesteps}

    def _key(self, t) -> float:
        t = float(t)
        if t not in self.counts:
            raise KeyError(f"timestep {t} not in cache")
        return t

    def update(self, t, loss) -> float:
        if self.dtype is not None:
            loss = float(loss)
        if not math.isfinite(loss):
            raise ValueError("cache update with non-finite loss")
        if loss < 0:
            raise ValueError("cache update with negative loss")
        key = self._key(t)
        if self.counts[key] == 0:
            new = loss
        else:
            new = self.alpha * self.means[key] + (1 - self.alpha) * loss
        self.means[key] = new if self.dtype is None else float(self.dtype(new))
        self.counts[key] += 1
        return self.means[key]

    def mean(self, t) -> float | None:
        return self.means.get(self._key(t))

    def state(self) -> tuple[list[float], list[int]]:
        return (
            [self.means.get(t, 0.0) for t in self.timesteps],
            [self.counts[t] for t in self.timesteps],
        )

    def load_state(self, means, counts) -> None:
        self.means = {t: float(m) for t, m, c in zip(self.timesteps, means, counts) if c > 0}
        self.counts = {t: int(c) for t, c in zip(self.timesteps, counts)}


def cache_update(cache: LossMeanCache, t, loss) -> LossMeanCache:
    cache.update(t, loss)
    return cache


def adaptive_weight(cache: LossMeanCache, t, loss, k: float = 3.0):
    """omega = 1 - sigmoid(k * (loss - cached mean)); 1.0 before the first cache update."""
    mean = cache.mean(t)
    if isinstance(loss, torch.Tensor):
        loss = loss.detach()
        if mean is None:
            return torch.ones_like(loss)
        return 1.0 - torch.sigmoid(k * (loss - mean))
    if mean is None:
        return 1.0
    z = k * (float(loss) - mean)
    # 1 - sigmoid(z) == sigmoid(-z), evaluated without overflow
    if z >= 0:
        e = math.exp(-z)
        return e / (1.0 + e)
    return 1.0 / (1.0 + math.exp(z))


def dmd_direction(x, s_real, s_fake, x0_real, alpha, sigma) -> torch.Tensor:
    """Normalized generator update direction from a real/fake score pair.

    The gap s_fake - s_real is rescaled by sigma^2 / alpha, which turns it
    into the clean-sample difference x0_fake - x0_real, then divided per
    clip by mean|x - x0_real|.
    """
    shape = (-1,) + (1,) * (x.dim() - 1)
    alpha = torch.as_tensor(alpha, dtype=x.dtype).reshape(shape) if torch.is_tensor(alpha) else alpha
    sigma = torch.as_tensor(sigma, dtype=x.dtype).reshape(shape) if torch.is_tensor(sigma) else sigma
    d = (sigma**2 / alpha) * (s_fake - s_real)
    c = (x - x0_real).abs().reshape(x.shape[0], -1).mean(dim=1).reshape(shape) + 1e-8
    return check_finite(d / c, "DMD direction")


def dmd_surrogate(x: torch.Tensor, direction: torch.Tensor) -> torch.Tensor:
    """0.5 * ||x - sg(x - direction)||^2 / numel; d/dx = direction / numel."""
    target = stop_grad(x - direction)
    return 0.5 * ((x - target) ** 2).sum() / x.numel()


@dataclass
class DMDOutput:
    loss: torch.Tensor
    direction: torch.Tensor
    t: torch.Tensor
    x0_real: torch.Tensor


def dmd_generator_loss(
    x: torch.Tensor,
    teacher: Denoiser,
    fake: Denoiser,
    cond,
    sched: NoiseSchedule,
    generator: torch.Generator | None = None,
    cfg_scale: float = 5.0,
    t_range: tuple[float, float] = (0.02, 0.98),
) -> DMDOutput:
    """Distribution-matching surrogate on a generator batch ``x`` [B, F, C, H, W].

    Teacher and fake model are queried without gradient at one random t per clip.
    """
    lo, hi = t_range
    if lo <= 0:
        raise ValueError("DMD timestep range must exclude 0")
    b = x.shape[0]
    t = lo + (hi - lo) * torch.rand(b, generator=generator, dtype=x.dtype)
    eps = torch.randn(x.shape, generator=generator, dtype=x.dtype)
    with torch.no_grad():
        xd = x.detach()
        x_t = forward_diffuse(sched, xd, t, eps)
        v_real = guided_prediction(teacher, x_t, t, cond, cfg_scale)
        v_fake = fake(x_t, t, cond)
        s_real = prediction_convert(v_real, x_t, t, "velocity", "score", sched)
        s_fake = prediction_convert(v_fake, x_t, t, "velocity", "score", sched)
        x0_real = prediction_convert(v_real, x_t, t, "velocity", "x0", sched)
        alpha, sigma = schedule_coeffs(sched, t)
        direction = dmd_direction(xd, s_real, s_fake, x0_real, alpha, sigma)
    return DMDOutput(loss=dmd_surrogate(x, direction), direction=direction, t=t, x0_real=x0_real)
