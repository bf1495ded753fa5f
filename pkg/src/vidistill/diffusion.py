"""Rectified-flow noise schedule, forward process and prediction conversions."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch

SPACES = ("noise", "velocity", "x0", "score")


@dataclass(frozen=True)
class NoiseSchedule:
    shift: float = 5.0
    n_train_steps: int = 1000

    def __post_init__(self) -> None:
        if self.shift <= 0:
            raise ValueError("shift must be positive")

    def tau(self, t):
        """Shifted time s*t / (1 + (s-1)*t); works on floats and tensors."""
        out = self.shift * t / (1.0 + (self.shift - 1.0) * t)
        # rounding can push the endpoint past 1
        if isinstance(out, torch.Tensor):
            return out.clamp(max=1.0)
        return min(out, 1.0)


def _check_t(t) -> None:
    if isinstance(t, torch.Tensor):
        if ((t < 0) | (t > 1)).any():
            raise ValueError("t must lie in [0, 1]")
    elif not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")


def schedule_coeffs(sched: NoiseSchedule, t):
    """Return (alpha_t, sigma_t) with alpha + sigma = 1."""
    _check_t(t)
    sigma = sched.tau(t)
    return 1.0 - sigma, sigma


def _bcast(c, like: torch.Tensor):
    """Lift a per-sample coefficient vector to broadcast over a clip batch."""
    if isinstance(c, torch.Tensor) and c.dim() == 1 and like.dim() > 1:
        return c.view(-1, *([1] * (like.dim() - 1))).to(like.dtype)
    return c


def forward_diffuse(sched: NoiseSchedule, x0: torch.Tensor, t, eps: torch.Tensor) -> torch.Tensor:
    if x0.shape != eps.shape:
        raise ValueError(f"shape mismatch: {tuple(x0.shape)} vs {tuple(eps.shape)}")
    alpha, sigma = schedule_coeffs(sched, t)
    return _bcast(alpha, x0) * x0 + _bcast(sigma, x0) * eps


def prediction_convert(pred, x_t, t, from_space: str, to_space: str, sched: NoiseSchedule):
    """Convert a network prediction between noise, velocity, clean and score spaces.

    Uses x_t = alpha*x0 + sigma*eps, v = eps - x0 and score = -eps/sigma.
    """
    if from_space not in SPACES or to_space not in SPACES:
        raise ValueError(f"unknown space {from_space!r} -> {to_space!r}")
    if from_space == to_space:
        return pred
    alpha, sigma = schedule_coeffs(sched, t)
    alpha, sigma = _bcast(alpha, x_t), _bcast(sigma, x_t)

    def nonzero(c, name):
        if (c == 0).any() if isinstance(c, torch.Tensor) else c == 0:
            raise ZeroDivisionError(f"{name}_t is 0 at this t")

    # first recover (x0, eps)
    if from_space == "noise":
        eps = pred
        nonzero(alpha, "alpha")
        x0 = (x_t - sigma * eps) / alpha
    elif from_space == "score":
        nonzero(sigma, "sigma")
        eps = -sigma * pred
        nonzero(alpha, "alpha")
        x0 = (x_t - sigma * eps) / alpha
    elif from_space == "velocity":
        # x_t = alpha*x0 + sigma*(v + x0) = x0 + sigma*v since alpha + sigma = 1
        x0 = x_t - sigma * pred
        eps = pred + x0
    else:
        x0 = pred
        nonzero(sigma, "sigma")
        eps = (x_t - alpha * x0) / sigma

    if to_space == "x0":
        return x0
    if to_space == "noise":
        return eps
    if to_space == "velocity":
        return eps - x0
    nonzero(sigma, "sigma")
    return -eps / sigma


@dataclass(frozen=True)
class TimestepSchedule:
    steps: tuple[float, ...]

    def __post_init__(self) -> None:
        if not self.steps:
            raise ValueError("empty timestep schedule")
        if any(not 0.0 < s <= 1.0 for s in self.steps):
            raise ValueError("timesteps must lie in (0, 1]")
        if any(a <= b for a, b in zip(self.steps, self.steps[1:])):
            raise ValueError("timesteps must be strictly descending")

    def __len__(self) -> int:
        return len(self.steps)

    def __iter__(self):
        return iter(self.steps)

    def __getitem__(self, i):
        return self.steps[i]

    def index(self, t: float) -> int:
        return self.steps.index(t)


def make_student_schedule(q: int, sched: NoiseSchedule) -> TimestepSchedule:
    """Shifted right endpoints of q equal intervals, descending from 1."""
    if q < 1:
        raise ValueError("need at least one student step")
    return TimestepSchedule(tuple(float(sched.tau(k / q)) for k in range(q, 0, -1)))


def as_schedule(steps: Sequence[float]) -> TimestepSchedule:
    return TimestepSchedule(tuple(float(s) for s in steps))
