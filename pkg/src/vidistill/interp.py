"""Frame-interpolation U-Net and half-frame-rate sampling."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .diffusion import NoiseSchedule, TimestepSchedule, forward_diffuse
from .models import Denoiser, predict_x0


@dataclass(frozen=True)
class InterpConfig:
    channels: int = 1
    width: int = 32
    groups: int = 8


class ConvBlock(nn.Sequential):
    def __init__(self, cin: int, cout: int, groups: int):
        g = math.gcd(groups, cout)
        super().__init__(
            nn.Conv2d(cin, cout, 3, padding=1),
            nn.GroupNorm(g, cout),
            nn.SiLU(),
            nn.Conv2d(cout, cout, 3, padding=1),
            nn.GroupNorm(g, cout),
            nn.SiLU(),
        )


class InterpUNet(nn.Module):
    """Predicts the middle frame from two neighbours as average + residual.

    Three encoder levels (W, 2W, 4W) with 2x2 max-pooling between them, a
    mirrored decoder with transposed-conv upsampling and skip concatenation,
    and a zero-initialized 1x1 output conv. Spatial dims must be divisible by 4.
    """

    def __init__(self, cfg: InterpConfig = InterpConfig()):
        super().__init__()
        self.cfg = cfg
        c, w, g = cfg.channels, cfg.width, cfg.groups
        self.enc1 = ConvBlock(2 * c, w, g)
        self.enc2 = ConvBlock(w, 2 * w, g)
        self.enc3 = ConvBlock(2 * w, 4 * w, g)
        self.up2 = nn.ConvTranspose2d(4 * w, 2 * w, 2, stride=2)
        self.dec2 = ConvBlock(4 * w, 2 * w, g)
        self.up1 = nn.ConvTranspose2d(2 * w, w, 2, stride=2)
        self.dec1 = ConvBlock(2 * w, w, g)
        self.out = nn.Conv2d(w, c, 1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        if a.shape != b.shape:
            raise ValueError(f"frame shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
        single = a.dim() == 3
        if single:
            a, b = a.unsqueeze(0), b.unsqueeze(0)
        e1 = self.enc1(torch.cat([a, b], dim=1))
        e2 = self.enc2(F.max_pool2d(e1, 2))
        e3 = self.enc3(F.max_pool2d(e2, 2))
        d2 = self.dec2(torch.cat([self.up2(e3), e2], dim=1))
        d1 = self.dec1(torch.cat([self.up1(d2), e1], dim=1))
        mid = 0.5 * (a + b) + self.out(d1)
        return mid[0] if single else mid


def interp_forward(params: InterpUNet, frame_a, frame_b):
    return params(frame_a, frame_b)


def expand_sequence(params: InterpUNet, clip: torch.Tensor) -> torch.Tensor:
    """F frames -> 2F-1: originals at even slots, interpolations between them.

    Accepts [F, C, H, W] or a batch [B, F, C, H, W].
    """
    single = clip.dim() == 4
    if single:
        clip = clip.unsqueeze(0)
    b, f = clip.shape[:2]
    if f < 2:
        raise ValueError("need at least two frames to interpolate")
    left = clip[:, :-1].reshape(b * (f - 1), *clip.shape[2:])
    right = clip[:, 1:].reshape(b * (f - 1), *clip.shape[2:])
    mids = params(left, right).reshape(b, f - 1, *clip.shape[2:])
    out = torch.empty(b, 2 * f - 1, *clip.shape[2:], dtype=mids.dtype)
    out[:, 0::2] = clip
    out[:, 1::2] = mids
    return out[0] if single else out


def temporal_downsample(clip: torch.Tensor, stride: int = 2, frame_dim: int | None = None) -> torch.Tensor:
    """Keep frames 0, stride, 2*stride, ... along the frame axis."""
    if frame_dim is None:
        frame_dim = 0 if clip.dim() == 4 else 1
    if clip.shape[frame_dim] == 0:
        raise ValueError("empty clip")
    idx = torch.arange(0, clip.shape[frame_dim], stride)
    return clip.index_select(frame_dim, idx)


def interp_training_loss(params: InterpUNet, clips: torch.Tensor) -> torch.Tensor:
    """MSE between expand(downsample(clip)) and the clip; copied frames add zero."""
    recon = expand_sequence(params, temporal_downsample(clips))
    return ((recon - clips) ** 2).mean()


def average_baseline_mse(clips: torch.Tensor) -> float:
    """MSE on the odd (interpolated) frames when predicting (a + b) / 2."""
    pred = 0.5 * (clips[:, 0:-2:2] + clips[:, 2::2])
    return float(((pred - clips[:, 1::2]) ** 2).mean())


def interpolated_mse(params: InterpUNet, clips: torch.Tensor) -> float:
    with torch.no_grad():
        recon = expand_sequence(params, temporal_downsample(clips))
    return float(((recon[:, 1::2] - clips[:, 1::2]) ** 2).mean())


def half_rate_sample(
    g: Denoiser,
    interp: InterpUNet,
    noise: torch.Tensor,
    cond,
    steps: TimestepSchedule,
    sched: NoiseSchedule,
    split: int | None = None,
    generator: torch.Generator | None = None,
    trace: list | None = None,
) -> torch.Tensor:
    """Run the first ``split`` steps on every other frame, interpolate back, finish at full rate.

    ``noise`` is a full-rate batch [B, F, C, H, W] with odd F. When
    ``split == len(steps)`` all steps run at half rate and the result is
    expanded at the end.
    """
    q = len(steps)
    if split is None:
        split = q // 2
    if not 1 <= split <= q:
        raise ValueError(f"split must be in [1, {q}], got {split}")
    if split == q and q < 1:
        raise ValueError("empty schedule")
    full_f = noise.shape[1]
    if full_f % 2 == 0:
        raise ValueError("half-rate sampling needs an odd frame count")
    x = temporal_downsample(noise, frame_dim=1)
    x0 = None
    for k in range(q):
        t = steps[k]
        x0 = predict_x0(g, x, t, cond, sched)
        if k == split - 1:
            x0 = expand_sequence(interp, x0)
        if trace is not None:
            trace.append(x0.detach().clone())
        if k < q - 1:
            # draw at full rate so the random stream matches full-rate sampling
            eps = torch.randn(noise.shape, generator=generator, dtype=x0.dtype)
            if k < split - 1:
                eps = temporal_downsample(eps, frame_dim=1)
            x = forward_diffuse(sched, x0, steps[k + 1], eps)
    return x0


def train_interpolator(
    clips: torch.Tensor,
    cfg: InterpConfig = InterpConfig(),
    steps: int = 2000,
    batch: int = 32,
    lr: float = 1e-4,
    seed: int = 0,
    log=None,
) -> InterpUNet:
    """Fit the interpolator on clean clips [N, F, C, H, W] with odd F >= 3."""
    from .optim import AdamW

    if clips.shape[1] < 3 or clips.shape[1] % 2 == 0:
        raise ValueError("training clips need an odd frame count >= 3")
    torch.manual_seed(seed)
    net = InterpUNet(cfg)
    opt = AdamW(net.parameters(), lr=lr, weight_decay=0.01, max_grad_norm=10.0)
    gen = torch.Generator().manual_seed(seed)
    for step in range(steps):
        idx = torch.randint(0, clips.shape[0], (batch,), generator=gen)
        loss = interp_training_loss(net, clips[idx])
        if not torch.isfinite(loss):
            raise FloatingPointError("interpolator training diverged")
        opt.zero_grad()
        loss.backward()
        opt.step()
        if log is not None and (step % 100 == 0 or step == steps - 1):
            log(step, loss.item())
    return net
