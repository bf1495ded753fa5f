"""Diagnostics for generated clips: motion, temporal variance, saturation, PSNR."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from matplotlib.colors import rgb_to_hsv
from scipy import ndimage

from .data import FLOW_MIN, cosine_consistency, mean_flow_magnitude


@dataclass
class MetricRow:
    run: str
    metric: str
    value: float | None = None
    bins: list[float] = field(default_factory=list)
    count: int = 1

    def __post_init__(self) -> None:
        if self.count <= 0:
            raise ValueError("sample count must be positive")
        if self.bins and not math.isclose(sum(self.bins), self.count):
            raise ValueError("histogram does not sum to the sample count")


def _np(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def temporal_variance_metric(clip) -> float:
    """Mean per-pixel population variance along the frame axis of one clip."""
    c = _np(clip)
    if c.shape[0] < 2:
        raise ValueError("need at least two frames")
    return float(c.var(axis=0).mean())


def dynamic_degree(clips, flow_threshold: float = FLOW_MIN) -> float:
    """Fraction of clips whose mean block-flow magnitude reaches the threshold."""
    flows = clip_flows(clips)
    return float(np.mean(flows >= flow_threshold))


def clip_flows(clips) -> np.ndarray:
    clips = list(clips) if not isinstance(clips, (np.ndarray, torch.Tensor)) else clips
    if len(clips) == 0:
        raise ValueError("empty clip set")
    return np.array([mean_flow_magnitude(_np(c)) for c in clips])


def saturation_profile(clip, bins: int = 16):
    """Mean HSV saturation and a ``bins``-bin histogram; (None, None) unless C == 3."""
    c = _np(clip)
    if c.shape[1] != 3:
        return None, None
    rgb = np.clip((np.moveaxis(c, 1, -1) + 1.0) / 2.0, 0.0, 1.0)
    sat = rgb_to_hsv(rgb)[..., 1].ravel()
    hist, _ = np.histogram(sat, bins=bins, range=(0.0, 1.0))
    return float(sat.mean()), hist.astype(float)


def histogram_l1(h1, h2) -> float:
    p = np.asarray(h1, float) / np.sum(h1)
    q = np.asarray(h2, float) / np.sum(h2)
    return float(np.abs(p - q).sum())


def adjacent_cosine(clip) -> float:
    return cosine_consistency(_np(clip))


def cosine_profile(trace: Sequence) -> list[tuple[float, float]]:
    """Per denoising step: (mean, std) over clips of adjacent-frame cosine similarity.

    ``trace`` holds one batch [B, F, C, H, W] (or a single clip) per step.
    """
    if len(trace) < 1:
        raise ValueError("empty trace")
    out = []
    for step in trace:
        s = _np(step)
        if s.ndim == 4:
            s = s[None]
        vals = np.array([cosine_consistency(c) for c in s])
        out.append((float(vals.mean()), float(vals.std())))
    return out


def psnr(a, b, cap: float = 100.0) -> float:
    """PSNR in dB after mapping [-1, 1] to [0, 1]."""
    a, b = _np(a), _np(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float((((a - b) / 2.0) ** 2).mean())
    if mse == 0:
        return cap
    return min(cap, 10.0 * math.log10(1.0 / mse))


def _periodic_components(mask: np.ndarray) -> int:
    """4-connected components on a torus (sprites wrap around the frame edges)."""
    labels, n = ndimage.label(mask)
    if n == 0:
        return 0
    parent = list(range(n + 1))

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for a, b in ((labels[0], labels[-1]), (labels[:, 0], labels[:, -1])):
        for la, lb in zip(a, b):
            if la and lb:
                parent[find(la)] = find(lb)
    return len({find(i) for i in range(1, n + 1)})


def sprite_counts(clip, threshold: float = 0.0) -> np.ndarray:
    """Per-frame count of wrap-aware connected components of pixels above ``threshold``."""
    c = _np(clip)
    lum = c.mean(axis=1)
    return np.array([_periodic_components(f > threshold) for f in lum])


def sprite_count_consistency(clips, threshold: float = 0.0, expected: int = 1) -> float:
    """Proxy for object stability: share of frames showing exactly ``expected`` sprites.

    Averaged over clips. Splits, merges with ghosts, and vanishing sprites all
    lower the score. Not a reproduction of any benchmark metric.
    """
    scores = [np.mean(sprite_counts(c, threshold) == expected) for c in clips]
    if not scores:
        raise ValueError("empty clip set")
    return float(np.mean(scores))


def write_metrics(rows: Sequence[MetricRow], path, append: bool = False) -> None:
    path = Path(path)
    new = not (append and path.exists())
    with path.open("a" if append else "w", newline="") as fh:
        wr = csv.writer(fh)
        if new:
            wr.writerow(["run", "metric", "value", "bins", "count"])
        for r in rows:
            value = "" if r.value is None else repr(float(r.value))
            wr.writerow([r.run, r.metric, value, " ".join(f"{b:g}" for b in r.bins), r.count])
