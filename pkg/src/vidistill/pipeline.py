"""Glue between configuration, datasets, checkpoints and the training/eval routines."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
import torch

from . import io
from .config import RunConfig
from .data import CorpusItem, SpriteSpec, gen_synthetic_clip, make_dataset
from .diffusion import NoiseSchedule, make_student_schedule
from .interp import InterpConfig, InterpUNet, half_rate_sample
from .metrics import (
    clip_flows,
    cosine_profile,
    sprite_count_consistency,
    temporal_variance_metric,
)
from .models import Denoiser, student_sample
from .trainer import build_denoiser

VAL_SEED_OFFSET = 10007
SAMPLE_SEED_OFFSET = 20011


def noise_schedule(cfg: RunConfig) -> NoiseSchedule:
    return NoiseSchedule(cfg.model.shift, cfg.model.n_train_steps)


def _spec_kw(cfg: RunConfig, frames: int | None = None) -> dict:
    d = cfg.data
    return dict(frames=frames or d.frames, channels=d.channels, height=d.height, width=d.width,
                size=d.sprite_size, speed=d.speed, flicker=d.flicker)


def train_data(cfg: RunConfig, data_dir=None):
    if data_dir:
        return load_corpus_tensors(data_dir)
    return make_dataset(cfg.data.n_train, cfg.seed, **_spec_kw(cfg))


def val_data(cfg: RunConfig):
    return make_dataset(cfg.data.n_val, cfg.seed + VAL_SEED_OFFSET, **_spec_kw(cfg))


def interp_data(cfg: RunConfig):
    i = cfg.interp
    train = make_dataset(i.n_train, cfg.seed + 1, **_spec_kw(cfg, i.frames))[0]
    val = make_dataset(i.n_val, cfg.seed + 1 + VAL_SEED_OFFSET, **_spec_kw(cfg, i.frames))[0]
    return train, val


def write_corpus(out_dir, clips, labels, width: int = 1920, height: int = 1080) -> Path:
    """Clip files plus a manifest.csv (id, file, label, width, height)."""
    out = Path(out_dir)
    (out / "clips").mkdir(parents=True, exist_ok=True)
    with (out / "manifest.csv").open("w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["id", "file", "label", "width", "height"])
        for i, (c, y) in enumerate(zip(clips, labels)):
            name = f"clips/{i:05d}.avdt"
            io.save_clip(out / name, c)
            wr.writerow([f"v{i:05d}", name, int(y), width, height])
    return out / "manifest.csv"


def read_manifest(corpus_dir) -> list[dict]:
    with (Path(corpus_dir) / "manifest.csv").open() as fh:
        return list(csv.DictReader(fh))


def load_corpus_items(corpus_dir) -> list[CorpusItem]:
    items = []
    for row in read_manifest(corpus_dir):
        try:
            clip = io.load_clip(Path(corpus_dir) / row["file"])
            err = ""
        except (OSError, io.FormatError) as exc:
            clip, err = None, f"undecodable: {exc}"
        items.append(CorpusItem(row["id"], clip, int(row["width"]), int(row["height"]), err))
    return items


def load_corpus_tensors(corpus_dir):
    rows = read_manifest(corpus_dir)
    clips = torch.stack([torch.from_numpy(io.load_clip(Path(corpus_dir) / r["file"])) for r in rows])
    labels = torch.tensor([int(r["label"]) for r in rows], dtype=torch.long)
    return clips, labels


def load_generator(path, cfg: RunConfig, prefix: str = "g") -> Denoiser:
    entries = io.load_checkpoint(path)
    if f"{prefix}/conv_in.weight" not in entries and "teacher/conv_in.weight" in entries:
        prefix = "teacher"
    model = build_denoiser(cfg.model, cfg.data.channels, cfg.data.n_classes)
    io.load_module(prefix, model, entries)
    model.eval()
    return model


def load_interp(path, cfg: RunConfig) -> InterpUNet:
    entries = io.load_checkpoint(path)
    # the width is recoverable from the first conv, so sampling needs no interp flags
    width = int(entries["interp/enc1.0.weight"].shape[0]) if "interp/enc1.0.weight" in entries else cfg.interp.width
    net = InterpUNet(InterpConfig(channels=cfg.data.channels, width=width))
    io.load_module("interp", net, entries)
    net.eval()
    return net


def sample_clips(
    g: Denoiser,
    cfg: RunConfig,
    n: int,
    seed: int,
    frames: int | None = None,
    interp: InterpUNet | None = None,
    split: int | None = None,
    batch: int = 16,
):
    """Generate ``n`` clips with class ids cycling 0..K-1.

    Returns (clips [n, F, C, H, W], per-step trace list, frames processed by G).
    Both the full-rate and half-rate paths draw identical full-size noise for
    the same seed, so their outputs are directly comparable.
    """
    sched = noise_schedule(cfg)
    steps = make_student_schedule(cfg.distill.q, sched)
    d = cfg.data
    f = frames or d.frames
    gen = torch.Generator().manual_seed(seed)
    outs, traces = [], []
    g.reset_counters()
    with torch.no_grad():
        for start in range(0, n, batch):
            b = min(batch, n - start)
            cond = torch.arange(start, start + b) % d.n_classes
            noise = torch.randn((b, f, d.channels, d.height, d.width), generator=gen)
            trace: list = []
            if interp is None:
                x = student_sample(g, noise, cond, steps, sched, generator=gen, trace=trace)
            else:
                x = half_rate_sample(g, interp, noise, cond, steps, sched, split=split, generator=gen, trace=trace)
            outs.append(x)
            traces.append(trace)
    trace = [torch.cat([t[k] for t in traces]) for k in range(len(traces[0]))]
    return torch.cat(outs), trace, g.frames_processed


def evaluate_clips(clips, flow_threshold: float = 0.2) -> dict:
    clips = np.asarray(clips.detach() if isinstance(clips, torch.Tensor) else clips)
    flows = clip_flows(clips)
    return {
        "dynamic_degree": float(np.mean(flows >= flow_threshold)),
        "mean_flow": float(flows.mean()),
        "temporal_variance": float(np.mean([temporal_variance_metric(c) for c in clips])),
        "sprite_consistency": sprite_count_consistency(clips),
    }


def trace_profile(trace):
    return cosine_profile(trace)


def _rgb_clip(seed: int, speed: int, sprite: int, frames: int = 8, size: int = 32, texture: float = 0.35) -> np.ndarray:
    """Colourful textured background with a white square sprite moving right."""
    from matplotlib.colors import hsv_to_rgb

    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size]
    hue = ((xx + yy) / (2.0 * size) + rng.uniform()) % 1.0
    val = 0.6 + texture * (rng.uniform(size=(size, size)) - 0.5)
    bg = hsv_to_rgb(np.stack([hue, np.full_like(hue, 0.8), val], axis=-1))
    y0, x0 = rng.integers(0, size - sprite, size=2)
    clip = np.empty((frames, 3, size, size), dtype=np.float32)
    for f in range(frames):
        img = bg.copy()
        xs = (x0 + f * speed + np.arange(sprite)) % size
        img[y0 : y0 + sprite][:, xs] = 1.0
        clip[f] = np.moveaxis(img, -1, 0) * 2.0 - 1.0
    return clip


def crafted_filter_corpus(seed: int = 0) -> tuple[list[CorpusItem], dict[str, str]]:
    """Twelve RGB clips: one per rejection stage plus eight sharp movers.

    Returns the corpus and id -> expected reject stage for the threshold
    stages; the eight movers map to "ranked" since their fate depends on the
    two top-50% stages.
    """
    from scipy.ndimage import gaussian_filter

    items, expected = [], {}

    def add(vid, clip, fate, w=1920, h=1080):
        items.append(CorpusItem(vid, clip, w, h))
        expected[vid] = fate

    add("lowres_640x480", _rgb_clip(seed, 2, 10), "resolution", 640, 480)
    solid = np.empty((8, 3, 32, 32), dtype=np.float32)
    solid[:] = np.array([0.6, -0.4, -0.4], dtype=np.float32)[:, None, None]
    add("solid_color", solid, "monochrome")
    blurred = gaussian_filter(_rgb_clip(seed + 1, 2, 10), sigma=(0, 0, 2.5, 2.5), mode="nearest")
    add("blurred", blurred.astype(np.float32), "blur")
    add("static", _rgb_clip(seed + 2, 0, 10), "motion")
    for n in range(8):
        add(f"moving_{n}", _rgb_clip(seed + 10 + n, 2, 10 + n, texture=0.2 + 0.05 * n), "ranked")
    return items, expected
