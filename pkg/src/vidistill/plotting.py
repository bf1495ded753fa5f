"""
Figures for training logs and evaluation tables.

Every function writes PNG and SVG copies next to each other and returns the
written paths.
"""

from __future__ import annotations

import csv
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

FORMATS = ("png", "svg")


def pretty_plot(width=6.0, height=None, nrows=1, ncols=1):
    """Figure with consistent font sizes; height defaults to width * golden ratio."""
    golden = (math.sqrt(5) - 1.0) / 2.0
    height = height or width * golden
    plt.rcParams.update({
        "font.size": 9,
        "axes.labelsize": 9,
        "axes.titlesize": 10,
        "legend.fontsize": 8,
        "xtick.labelsize": 8,
        "ytick.labelsize": 8,
        "axes.spines.top": False,
        "axes.spines.right": False,
        "svg.hashsalt": "vidistill",
    })
    return plt.subplots(nrows, ncols, figsize=(width, height), squeeze=False)


def save(fig, stem) -> list[Path]:
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    paths = []
    for ext in FORMATS:
        p = stem.with_suffix("." + ext)
        # metadata pinned so reruns produce identical files
        meta = {"Date": None} if ext == "svg" else {"Software": None}
        fig.savefig(p, dpi=120, bbox_inches="tight", metadata=meta)
        paths.append(p)
    plt.close(fig)
    return paths


def _read(path):
    with Path(path).open() as fh:
        return list(csv.DictReader(ln for ln in fh if not ln.startswith("#")))


def _col(rows, key):
    """Column as floats; blank cells become NaN so lines stay aligned with steps."""
    return np.array([float(r[key]) if r.get(key, "") != "" else np.nan for r in rows])


def _smooth(y, n=50):
    if len(y) < n:
        return y
    return np.convolve(y, np.ones(n) / n, mode="valid")


def plot_distill_metrics(metrics_csv, stem) -> list[Path]:
    """Loss components, adaptive weights and per-timestep cache means over training."""
    rows = [r for r in _read(metrics_csv) if r["phase"] == "generator"]
    fake = [r for r in _read(metrics_csv) if r["phase"] == "fake"]
    step = _col(rows, "step")
    fig, ax = pretty_plot(9, 6, 2, 2)
    for key in ("L_KL", "L_reg_mean"):
        y = _smooth(_col(rows, key))
        ax[0, 0].plot(step[len(step) - len(y):], y, label=key)
    ax[0, 0].set_yscale("log")
    ax[0, 0].set_title("generator losses")
    ax[0, 0].legend()
    for key in ("L_temp_raw", "L_temp_eff"):
        y = _col(rows, key)
        ax[0, 1].plot(step, y, label=key, lw=0.8)
    ax[0, 1].set_title("temporal regularizer")
    ax[0, 1].legend()
    ax[1, 0].fill_between(step, _col(rows, "omega_min"), _col(rows, "omega_max"), alpha=0.25, lw=0)
    ax[1, 0].plot(step, _col(rows, "omega_mean"), lw=0.8)
    ax[1, 0].set_ylim(0, 1)
    ax[1, 0].set_title("adaptive weight (batch min / mean / max)")
    ax[1, 0].set_xlabel("generator step")
    for key in [k for k in rows[0] if k.startswith("cache_t")] if rows else []:
        ax[1, 1].plot(step, _col(rows, key), label=key, lw=0.8)
    if fake:
        y = _smooth(_col(fake, "L_denoise"), 250)
        ax[1, 1].plot(np.linspace(step.min(), step.max(), len(y)), y, "k--", lw=0.8, label="fake denoise")
    ax[1, 1].set_yscale("log")
    ax[1, 1].set_title("loss-mean cache")
    ax[1, 1].set_xlabel("generator step")
    ax[1, 1].legend()
    return save(fig, stem)


def plot_teacher_metrics(metrics_csv, stem) -> list[Path]:
    rows = _read(metrics_csv)
    fig, axs = pretty_plot(5)
    ax = axs[0, 0]
    step = _col(rows, "step")
    ax.plot(step, _col(rows, "loss"), label="train (trailing mean)")
    if rows and rows[0].get("val_loss"):
        ax.plot(step, _col(rows, "val_loss"), label="held-out")
        ax.axhline(float(rows[0]["zero_baseline"]), color="gray", ls=":", label="zero predictor")
    ax.set_xlabel("step")
    ax.set_ylabel("velocity MSE")
    ax.legend()
    return save(fig, stem)


def plot_cosine_profile(profile, stem, labels=None) -> list[Path]:
    """``profile`` maps a run name to [(mean, std), ...] per denoising step."""
    fig, axs = pretty_plot(5)
    ax = axs[0, 0]
    for name, prof in profile.items():
        m = np.array([p[0] for p in prof])
        s = np.array([p[1] for p in prof])
        x = np.arange(1, len(m) + 1)
        ax.plot(x, m, marker="o", label=name)
        ax.fill_between(x, m - s, m + s, alpha=0.2, lw=0)
    ax.set_xlabel("denoising step")
    ax.set_ylabel("adjacent-frame cosine similarity")
    ax.set_xticks(np.arange(1, max(len(p) for p in profile.values()) + 1))
    ax.legend()
    return save(fig, stem)


def plot_bars(values: dict, stem, ylabel: str, ylim=None) -> list[Path]:
    fig, axs = pretty_plot(5)
    ax = axs[0, 0]
    names = list(values)
    ax.bar(names, [values[n] for n in names], color="0.55")
    for i, n in enumerate(names):
        ax.text(i, values[n], f"{values[n]:.3f}", ha="center", va="bottom", fontsize=8)
    ax.set_ylabel(ylabel)
    if ylim:
        ax.set_ylim(*ylim)
    return save(fig, stem)


def plot_clip_strip(clips, stem, max_clips: int = 4) -> list[Path]:
    """Frames of a few clips laid out as rows (grayscale or RGB in [-1, 1])."""
    clips = np.asarray(clips)[:max_clips]
    n, f = clips.shape[:2]
    fig, axs = pretty_plot(f * 0.8, n * 0.8, n, f)
    for i in range(n):
        for j in range(f):
            fr = (clips[i, j] + 1) / 2
            img = fr[0] if fr.shape[0] == 1 else np.moveaxis(fr, 0, -1)
            axs[i, j].imshow(np.clip(img, 0, 1), cmap="gray", vmin=0, vmax=1)
            axs[i, j].axis("off")
    return save(fig, stem)
