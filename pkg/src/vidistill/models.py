"""Small video denoiser shared by teacher, student generator and fake-score model."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .diffusion import NoiseSchedule, TimestepSchedule, forward_diffuse, prediction_convert

NULL = -1  # unconditional class id


@dataclass(frozen=True)
class DenoiserConfig:
    channels: int = 1
    width: int = 16
    n_classes: int = 4
    emb_dim: int = 64
    n_train_steps: int = 1000
    zero_init_out: bool = False


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=t.dtype) / half)
    args = t[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class Denoiser(nn.Module):
    """Velocity predictor for clips shaped [B, F, C, H, W] (H, W even).

    Per-frame conv encoder, a temporal conv across frames on the
    half-resolution features, then a decoder with one skip connection.
    Class and timestep embeddings enter as per-channel biases.
    """

    def __init__(self, cfg: DenoiserConfig = DenoiserConfig()):
        super().__init__()
        self.cfg = cfg
        w, e, c = cfg.width, cfg.emb_dim, cfg.channels
        self.class_emb = nn.Embedding(cfg.n_classes + 1, e)  # last row is NULL
        self.t_mlp = nn.Sequential(nn.Linear(e, e), nn.SiLU(), nn.Linear(e, e))
        self.conv_in = nn.Conv2d(c, w, 3, padding=1)
        self.emb_in = nn.Linear(e, w)
        self.down = nn.Conv2d(w, 2 * w, 3, stride=2, padding=1)
        self.temporal = nn.Conv3d(2 * w, 2 * w, (3, 1, 1), padding=(1, 0, 0))
        self.mid = nn.Conv2d(2 * w, 2 * w, 3, padding=1)
        self.emb_mid = nn.Linear(e, 2 * w)
        self.up = nn.ConvTranspose2d(2 * w, w, 4, stride=2, padding=1)
        self.fuse = nn.Conv2d(2 * w, w, 3, padding=1)
        self.conv_out = nn.Conv2d(w, c, 3, padding=1)
        if cfg.zero_init_out:
            nn.init.zeros_(self.conv_out.weight)
            nn.init.zeros_(self.conv_out.bias)
        self.calls = 0
        self.frames_processed = 0

    def reset_counters(self) -> None:
        self.calls = 0
        self.frames_processed = 0

    def _class_index(self, cond, batch: int) -> torch.Tensor:
        k = self.cfg.n_classes
        cond = torch.as_tensor(cond, dtype=torch.long)
        if cond.dim() == 0:
            cond = cond.expand(batch)
        if ((cond < NULL) | (cond >= k)).any():
            raise ValueError(f"class id outside [0, {k}) and not NULL")
        return torch.where(cond == NULL, torch.full_like(cond, k), cond)

    def forward(self, x: torch.Tensor, t, cond) -> torch.Tensor:
        single = x.dim() == 4
        if single:
            x = x.unsqueeze(0)
        b, f, c, h, w = x.shape
        self.calls += 1
        self.frames_processed += b * f
        t = torch.as_tensor(t, dtype=x.dtype)
        if t.dim() == 0:
            t = t.expand(b)
        emb = self.t_mlp(timestep_embedding(t * self.cfg.n_train_steps, self.cfg.emb_dim))
        emb = emb + self.class_emb(self._class_index(cond, b))
        emb_f = emb.repeat_interleave(f, dim=0)

        h0 = F.silu(self.conv_in(x.reshape(b * f, c, h, w)) + self.emb_in(emb_f)[:, :, None, None])
        h1 = F.silu(self.down(h0))
        ch, hh, ww = h1.shape[1:]
        v = h1.view(b, f, ch, hh, ww).transpose(1, 2)
        v = F.silu(self.temporal(v)).transpose(1, 2).reshape(b * f, ch, hh, ww)
        h1 = h1 + v
        h1 = F.silu(self.mid(h1) + self.emb_mid(emb_f)[:, :, None, None])
        u = self.up(h1)
        u = F.silu(self.fuse(torch.cat([u, h0], dim=1)))
        out = self.conv_out(u).view(b, f, c, h, w)
        return out[0] if single else out


def guided_prediction(model: Denoiser, x_t, t, cond, w: float) -> torch.Tensor:
    """Classifier-free guidance: pred(NULL) + w * (pred(cond) - pred(NULL))."""
    if w < 0:
        raise ValueError("guidance scale must be non-negative")
    if w == 1.0:
        return model(x_t, t, cond)
    uncond = model(x_t, t, NULL)
    if w == 0.0:
        return uncond
    return uncond + w * (model(x_t, t, cond) - uncond)


def predict_x0(model: Denoiser, x_t, t, cond, sched: NoiseSchedule, w: float = 1.0) -> torch.Tensor:
    v = guided_prediction(model, x_t, t, cond, w)
    return prediction_convert(v, x_t, t, "velocity", "x0", sched)


def student_sample(
    g: Denoiser,
    noise: torch.Tensor,
    cond,
    steps: TimestepSchedule,
    sched: NoiseSchedule,
    generator: torch.Generator | None = None,
    trace: list | None = None,
    grad_all_steps: bool = True,
) -> torch.Tensor:
    """Few-step sampling: predict the clean clip, renoise with fresh noise, repeat.

    Returns the last clean estimate. Intermediate estimates are appended to
    ``trace`` (detached) when given. With ``grad_all_steps=False`` only the
    final call is kept on the autograd tape.
    """
    if len(steps) == 0:
        raise ValueError("empty schedule")
    x = noise
    n = len(steps)
    x0 = None
    for k, t in enumerate(steps):
        last = k == n - 1
        with torch.set_grad_enabled(torch.is_grad_enabled() and (grad_all_steps or last)):
            x0 = predict_x0(g, x, t, cond, sched)
        if trace is not None:
            trace.append(x0.detach().clone())
        if not last:
            eps = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
            x = forward_diffuse(sched, x0, steps[k + 1], eps)
    return x0


def student_denoise_once(g: Denoiser, y_t, t, cond, sched: NoiseSchedule, steps: TimestepSchedule | None = None):
    """Single-call clean reconstruction of a noised real clip."""
    if steps is not None:
        ts = t.tolist() if isinstance(t, torch.Tensor) else [t]
        if any(s not in steps.steps for s in ts):
            warnings.warn("t is not on the student grid", stacklevel=2)
    return predict_x0(g, y_t, t, cond, sched)
