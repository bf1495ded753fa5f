"""Synthetic sprite videos and the corpus quality filter."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv

MOTION_CLASSES = ("horizontal", "vertical", "diagonal", "static")
_DIRECTIONS = {0: (0, 1), 1: (1, 0), 2: (1, 1), 3: (0, 0)}

# Appendix-style thresholds
MIN_WIDTH, MIN_HEIGHT = 1280, 720
HUE_ENTROPY_MIN = 0.60
LAPLACIAN_VAR_MIN = 20.0
FLOW_MIN = 0.2
HUE_BINS = 36
ZERO_MOTION_BIAS = 0.02  # per-pixel mean |diff| a moving match must win by
FRAME_POSITIONS = (1, 21, 41, 61)  # 1-indexed frames checked per video
STAGES = ("resolution", "monochrome", "blur", "motion", "consistency", "aesthetic")


@dataclass
class SpriteSpec:
    motion_class: int = 0
    speed: int = 1
    size: int = 6
    background: float = -1.0
    seed: int = 0
    frames: int = 8
    channels: int = 1
    height: int = 16
    width: int = 16
    flicker: float = 0.1


def gen_synthetic_clip(spec: SpriteSpec) -> tuple[torch.Tensor, int]:
    """Render a square sprite moving with wrap-around; returns ([F, C, H, W], class id).

    Moving classes shift the sprite by ``speed`` pixels per frame along their
    axis (random sign). The static class keeps the sprite fixed and adds
    +/- ``flicker`` to its pixels on alternating frames.
    """
    if spec.motion_class not in _DIRECTIONS:
        raise ValueError(f"unknown motion class {spec.motion_class}")
    if spec.size > min(spec.height, spec.width):
        raise ValueError("sprite larger than frame")
    rng = np.random.default_rng(spec.seed)
    y0 = int(rng.integers(spec.height))
    x0 = int(rng.integers(spec.width))
    sign = (int(rng.choice([-1, 1])), int(rng.choice([-1, 1])))
    dy, dx = _DIRECTIONS[spec.motion_class]
    dy, dx = dy * sign[0] * spec.speed, dx * sign[1] * spec.speed

    if spec.channels == 3:
        hue_bg, hue_fg = rng.uniform(0, 1, size=2)
        bg = hsv_to_rgb([hue_bg, 0.6, (spec.background + 1) / 2]) * 2 - 1
        fg = hsv_to_rgb([(hue_fg + 0.5) % 1.0, 0.9, 1.0 - spec.flicker / 2]) * 2 - 1
    else:
        bg = np.full(spec.channels, spec.background)
        fg = np.full(spec.channels, 1.0 - spec.flicker)

    clip = np.empty((spec.frames, spec.channels, spec.height, spec.width), dtype=np.float32)
    base = np.zeros((spec.height, spec.width), dtype=bool)
    base[: spec.size, : spec.size] = True
    for f in range(spec.frames):
        mask = np.roll(base, (y0 + f * dy, x0 + f * dx), axis=(0, 1))
        fg_f = fg
        if spec.motion_class == 3:
            fg_f = fg + (spec.flicker if f % 2 == 0 else -spec.flicker)
        clip[f] = np.where(mask[None], np.asarray(fg_f)[:, None, None], np.asarray(bg)[:, None, None])
    return torch.from_numpy(np.clip(clip, -1.0, 1.0)), spec.motion_class


def make_dataset(n: int, seed: int, **spec_kw) -> tuple[torch.Tensor, torch.Tensor]:
    """Class-balanced stack of ``n`` clips: ([n, F, C, H, W], [n])."""
    clips, labels = [], []
    rng = np.random.default_rng(seed)
    seeds = rng.integers(0, 2**31 - 1, size=n)
    for i in range(n):
        clip, label = gen_synthetic_clip(SpriteSpec(motion_class=i % 4, seed=int(seeds[i]), **spec_kw))
        clips.append(clip)
        labels.append(label)
    return torch.stack(clips), torch.tensor(labels, dtype=torch.long)


# ---------------------------------------------------------------------------
# per-frame measurements


def _to_unit(frame) -> np.ndarray:
    return (np.asarray(frame, dtype=np.float64) + 1.0) / 2.0


def _luma8(frame) -> np.ndarray:
    """[C, H, W] in [-1, 1] -> 8-bit-scaled luma [H, W]."""
    f = np.clip(_to_unit(frame), 0.0, 1.0)
    if f.shape[0] == 3:
        g = 0.299 * f[0] + 0.587 * f[1] + 0.114 * f[2]
    else:
        g = f.mean(axis=0)
    return g * 255.0


def hue_entropy(frame, bins: int = HUE_BINS) -> float:
    """Shannon entropy of the hue histogram divided by log(bins), in [0, 1].

    Single-channel frames have hue 0 everywhere and score 0.
    """
    f = np.clip(_to_unit(frame), 0.0, 1.0)
    if f.size == 0 or f.shape[-1] * f.shape[-2] == 0:
        raise ValueError("empty frame")
    if f.shape[0] == 1:
        f = np.repeat(f, 3, axis=0)
    hue = rgb_to_hsv(np.moveaxis(f, 0, -1))[..., 0].ravel()
    hist, _ = np.histogram(hue, bins=bins, range=(0.0, 1.0))
    p = hist[hist > 0] / hue.size
    return max(0.0, float(-(p * np.log(p)).sum() / math.log(bins)))


def laplacian_variance(frame) -> float:
    """Population variance of the 4-neighbour Laplacian over the valid interior."""
    g = _luma8(frame)
    if g.shape[0] < 3 or g.shape[1] < 3:
        raise ValueError("frame smaller than 3x3")
    lap = g[:-2, 1:-1] + g[2:, 1:-1] + g[1:-1, :-2] + g[1:-1, 2:] - 4.0 * g[1:-1, 1:-1]
    return float(lap.var())


def block_flow(a: np.ndarray, b: np.ndarray, block: int = 4, radius: int = 2,
               zero_bias: float = ZERO_MOTION_BIAS) -> np.ndarray:
    """Integer displacement per block of ``a`` that best matches ``b`` (SAD).

    Returns [By, Bx, 2] (dy, dx). A non-zero displacement must beat the
    zero-motion match by more than ``zero_bias`` mean absolute difference per
    pixel, so sensor-like noise on a still scene reads as no motion; remaining
    ties go to the smallest displacement. Candidates reaching past the frame
    edge are scored on their in-frame pixels (at least 3/4 of the block).
    """
    h, w = a.shape
    by, bx = h // block, w // block
    a = a[: by * block, : bx * block]
    pad = np.pad(b.astype(np.float64), radius, constant_values=np.nan)
    blocks_a = a.reshape(by, block, bx, block)
    cands = sorted(
        ((dy, dx) for dy in range(-radius, radius + 1) for dx in range(-radius, radius + 1)),
        key=lambda d: (d[0] ** 2 + d[1] ** 2, d),
    )
    best = np.full((by, bx), np.inf)
    flow = np.zeros((by, bx, 2))
    for dy, dx in cands:
        shifted = pad[radius + dy : radius + dy + by * block, radius + dx : radius + dx + bx * block]
        diff = np.abs(blocks_a - shifted.reshape(by, block, bx, block))
        valid = (~np.isnan(diff)).sum(axis=(1, 3))
        # mean over the pixels that land inside the frame, rescaled to a block SAD
        sad = np.nansum(diff, axis=(1, 3)) / np.maximum(valid, 1) * (block * block)
        sad = np.where(valid * 4 >= 3 * block * block, sad, np.inf)
        if dy == 0 and dx == 0:
            sad = sad - zero_bias * block * block
        better = sad < best - 1e-9
        best = np.where(better, sad, best)
        flow[better] = (dy, dx)
    return flow


def mean_flow_magnitude(clip, block: int = 4, radius: int = 2, zero_bias: float = ZERO_MOTION_BIAS) -> float:
    """Mean over consecutive frame pairs of the mean per-pixel block-flow magnitude (luma in [0, 1])."""
    clip = np.asarray(clip)
    if clip.shape[0] < 2:
        raise ValueError("flow needs at least two frames")
    lum = np.stack([_luma8(f) / 255.0 for f in clip])
    mags = []
    for f in range(lum.shape[0] - 1):
        fl = block_flow(lum[f], lum[f + 1], block, radius, zero_bias)
        mags.append(np.sqrt((fl**2).sum(axis=-1)).mean())
    return float(np.mean(mags))


def cosine_consistency(clip) -> float:
    """Mean cosine similarity between flattened adjacent frames."""
    clip = np.asarray(clip, dtype=np.float64).reshape(np.shape(clip)[0], -1)
    if clip.shape[0] < 2:
        raise ValueError("need at least two frames")
    a, b = clip[:-1], clip[1:]
    num = (a * b).sum(axis=1)
    den = np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1)
    return float(np.mean(np.where(den > 0, num / np.maximum(den, 1e-300), 1.0)))


def aesthetic_score(clip, n_frames: int = 8) -> float:
    """Heuristic stand-in: mean over 8 uniform frames of sharpness and tonal spread.

    sharpness = lapvar / (lapvar + 1000); spread = (p95 - p5) of 8-bit luma / 255.
    """
    clip = np.asarray(clip)
    idx = np.unique(np.linspace(0, clip.shape[0] - 1, n_frames).round().astype(int))
    scores = []
    for i in idx:
        lv = laplacian_variance(clip[i])
        g = _luma8(clip[i])
        spread = (np.percentile(g, 95) - np.percentile(g, 5)) / 255.0
        scores.append(0.5 * (lv / (lv + 1000.0) + spread))
    return float(np.mean(scores))


def sampled_frame_indices(n_frames: int, positions: Sequence[int] = FRAME_POSITIONS) -> list[int]:
    """0-based indices for the 1-indexed check positions, clamped to the clip."""
    return sorted({min(p - 1, n_frames - 1) for p in positions})


# ---------------------------------------------------------------------------
# corpus filtering


@dataclass
class CorpusItem:
    id: str
    clip: np.ndarray | torch.Tensor | None  # None when undecodable
    width: int
    height: int
    error: str = ""


@dataclass
class FilterRecord:
    id: str
    values: dict = field(default_factory=dict)
    reject_stage: str = ""
    reason: str = ""

    @property
    def accepted(self) -> bool:
        return not self.reject_stage


@dataclass
class FilterConfig:
    min_width: int = MIN_WIDTH
    min_height: int = MIN_HEIGHT
    hue_entropy_min: float = HUE_ENTROPY_MIN
    laplacian_min: float = LAPLACIAN_VAR_MIN
    flow_min: float = FLOW_MIN
    keep_fraction: float = 0.5
    flow_block: int = 4
    flow_radius: int = 2
    flow_zero_bias: float = ZERO_MOTION_BIAS


def _top_fraction(ids: list[str], scores: dict[str, float], frac: float) -> set[str]:
    """Top ceil(n * frac) ids by score; ties go to the lexicographically smaller id."""
    keep = math.ceil(len(ids) * frac)
    ranked = sorted(ids, key=lambda i: (-scores[i], i))
    return set(ranked[:keep])


def filter_corpus(corpus: Iterable[CorpusItem], cfg: FilterConfig = FilterConfig()):
    """Run the six stages in order; returns (accepted ids, records in corpus order).

    Threshold stages judge each video alone; the two ranking stages keep the
    top fraction of the survivors, ties broken by video id, so decisions do
    not depend on corpus order.
    """
    items = list(corpus)
    if len({it.id for it in items}) != len(items):
        raise ValueError("duplicate video ids")
    records = {it.id: FilterRecord(it.id) for it in items}
    survivors: list[CorpusItem] = []
    for it in items:
        rec = records[it.id]
        if it.clip is None:
            rec.reject_stage, rec.reason = "resolution", it.error or "undecodable"
            continue
        clip = np.asarray(it.clip, dtype=np.float64)
        w, h = max(it.width, it.height), min(it.width, it.height)
        rec.values["resolution"] = f"{it.width}x{it.height}"
        if w < cfg.min_width or h < cfg.min_height:
            rec.reject_stage = "resolution"
            continue
        frames = [clip[i] for i in sampled_frame_indices(clip.shape[0])]
        rec.values["monochrome"] = min(hue_entropy(f) for f in frames)
        if rec.values["monochrome"] < cfg.hue_entropy_min:
            rec.reject_stage = "monochrome"
            continue
        rec.values["blur"] = min(laplacian_variance(f) for f in frames)
        if rec.values["blur"] < cfg.laplacian_min:
            rec.reject_stage = "blur"
            continue
        rec.values["motion"] = mean_flow_magnitude(clip, cfg.flow_block, cfg.flow_radius, cfg.flow_zero_bias)
        if rec.values["motion"] < cfg.flow_min:
            rec.reject_stage = "motion"
            continue
        survivors.append(it)

    for stage, score_fn in (("consistency", cosine_consistency), ("aesthetic", aesthetic_score)):
        scores = {it.id: score_fn(np.asarray(it.clip, dtype=np.float64)) for it in survivors}
        for it in survivors:
            records[it.id].values[stage] = scores[it.id]
        keep = _top_fraction([it.id for it in survivors], scores, cfg.keep_fraction)
        for it in survivors:
            if it.id not in keep:
                records[it.id].reject_stage = stage
        survivors = [it for it in survivors if it.id in keep]

    ordered = [records[it.id] for it in items]
    return [it.id for it in survivors], ordered


def write_filter_report(records: Sequence[FilterRecord], path, header_note: str | None = None) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        if header_note:
            fh.write(f"# {header_note}\n")
        wr = csv.writer(fh)
        wr.writerow(["id", *STAGES, "reject_stage", "reason", "accepted"])
        for r in records:
            row = [r.id]
            for s in STAGES:
                v = r.values.get(s, "")
                row.append(f"{v:.6g}" if isinstance(v, float) else v)
            wr.writerow(row + [r.reject_stage, r.reason, int(r.accepted)])


def read_filter_report(path) -> list[dict]:
    with Path(path).open() as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))
