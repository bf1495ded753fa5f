"""Teacher pre-training and the two-timescale distillation loop."""

from __future__ import annotations

import copy
import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import io
from .config import DistillConfig, ModelConfig, TeacherConfig
from .diffusion import NoiseSchedule, forward_diffuse, make_student_schedule
from .losses import (
    LossMeanCache,
    LossWeights,
    adaptive_weight,
    combined_generator_loss,
    denoising_loss,
    dmd_generator_loss,
    regression_loss,
    temporal_reg_loss,
    temporal_reg_raw,
)
from .models import NULL, Denoiser, DenoiserConfig, student_denoise_once, student_sample
from .numerics import NonFiniteError, check_finite, stop_grad
from .optim import AdamW

log = logging.getLogger(__name__)

METRIC_COLUMNS = [
    "step", "phase", "L_KL", "L_reg_mean", "L_temp_raw", "L_temp_eff",
    "omega_mean", "omega_min", "omega_max",
]
OMEGA_BINS = np.linspace(0.0, 1.0, 11)


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss; the last good checkpoint is kept."""


def build_denoiser(mcfg: ModelConfig, channels: int, n_classes: int) -> Denoiser:
    return Denoiser(DenoiserConfig(channels=channels, width=mcfg.width, n_classes=n_classes,
                                   emb_dim=mcfg.emb_dim, n_train_steps=mcfg.n_train_steps))


def velocity_batch(x0: torch.Tensor, sched: NoiseSchedule, gen: torch.Generator):
    """Noised inputs, times and velocity targets for a clean batch."""
    t = torch.rand(x0.shape[0], generator=gen, dtype=x0.dtype)
    eps = torch.randn(x0.shape, generator=gen, dtype=x0.dtype)
    return forward_diffuse(sched, x0, t, eps), t, eps - x0


def denoiser_val_loss(model: Denoiser, clips, labels, sched, seed: int = 1234) -> tuple[float, float]:
    """(model loss, zero-predictor loss) on velocity targets with fixed noise."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        x_t, t, target = velocity_batch(clips, sched, gen)
        pred = model(x_t, t, labels)
    return float(denoising_loss(pred, target)), float((target**2).mean())


# ---------------------------------------------------------------------------
# teacher


def teacher_entries(model: Denoiser, opt: AdamW, gen: torch.Generator, step: int) -> dict:
    names = [n for n, _ in model.named_parameters()]
    e = io.module_entries("teacher", model)
    e.update(opt.state_entries("opt_teacher", names))
    e["rng"] = io.rng_entry(gen)
    e["step"] = np.array([step])
    return e


def train_teacher(
    tcfg: TeacherConfig,
    mcfg: ModelConfig,
    clips: torch.Tensor,
    labels: torch.Tensor,
    n_classes: int,
    seed: int = 0,
    out_dir=None,
    val: tuple[torch.Tensor, torch.Tensor] | None = None,
) -> tuple[Denoiser, list[float]]:
    """Velocity-matching training with NULL-label dropout. Returns (model, loss history)."""
    torch.manual_seed(seed)
    sched = NoiseSchedule(mcfg.shift, mcfg.n_train_steps)
    model = build_denoiser(mcfg, clips.shape[2], n_classes)
    opt = AdamW(model.parameters(), lr=tcfg.lr, weight_decay=tcfg.weight_decay, max_grad_norm=tcfg.max_grad_norm)
    gen = torch.Generator().manual_seed(seed)
    out_dir = Path(out_dir) if out_dir else None
    writer = None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        fh = (out_dir / "teacher_metrics.csv").open("w", newline="")
        writer = csv.writer(fh)
        writer.writerow(["step", "loss", "val_loss", "zero_baseline", "grad_norm"])
    history: list[float] = []
    ckpt = out_dir / "teacher.ckpt" if out_dir else None
    try:
        for step in range(1, tcfg.steps + 1):
            idx = torch.randint(0, clips.shape[0], (tcfg.batch,), generator=gen)
            x0, y = clips[idx], labels[idx].clone()
            drop = torch.rand(tcfg.batch, generator=gen) < tcfg.null_prob
            y[drop] = NULL
            x_t, t, target = velocity_batch(x0, sched, gen)
            loss = denoising_loss(model(x_t, t, y), target)
            if not torch.isfinite(loss):
                raise DivergenceError(f"teacher loss is {float(loss)} at step {step}")
            opt.zero_grad()
            loss.backward()
            gnorm = opt.step()
            history.append(loss.item())
            if writer and (step % tcfg.log_every == 0 or step == tcfg.steps):
                vl, zb = denoiser_val_loss(model, *val, sched) if val is not None else ("", "")
                writer.writerow([step, f"{np.mean(history[-tcfg.log_every:]):.6g}", vl, zb, f"{gnorm:.6g}"])
                fh.flush()
            if ckpt and step == tcfg.steps:
                io.save_checkpoint(ckpt, teacher_entries(model, opt, gen, step))
            elif ckpt and tcfg.ckpt_every and step % tcfg.ckpt_every == 0:
                # intermediate snapshots never take the final name, so a killed run is not mistaken for a finished one
                io.save_checkpoint(out_dir / f"teacher_{step:06d}.ckpt", teacher_entries(model, opt, gen, step))
    finally:
        if writer:
            fh.close()
    return model, history


def load_teacher(path, mcfg: ModelConfig, channels: int, n_classes: int) -> Denoiser:
    entries = io.load_checkpoint(path)
    model = build_denoiser(mcfg, channels, n_classes)
    io.load_module("teacher", model, entries)
    return model


# ---------------------------------------------------------------------------
# distillation


@dataclass
class DistillState:
    teacher: Denoiser
    g: Denoiser
    fake: Denoiser
    cache: LossMeanCache
    opt_g: AdamW
    opt_fake: AdamW
    gen: torch.Generator
    cfg: DistillConfig
    sched: NoiseSchedule
    gen_steps: int = 0
    fake_steps: int = 0
    latest_x: torch.Tensor | None = None
    latest_c: torch.Tensor | None = None
    last_metrics: dict = field(default_factory=dict)

    @property
    def weights(self) -> LossWeights:
        c = self.cfg
        return LossWeights(w_reg=c.w_reg, w_temp=c.w_temp, k=c.k, temp_clip=c.temp_clip,
                           temp_eps=c.temp_eps, cfg_scale=c.cfg_scale)

    @property
    def steps(self):
        return make_student_schedule(self.cfg.q, self.sched)


def init_distill_state(teacher: Denoiser, cfg: DistillConfig, sched: NoiseSchedule, seed: int) -> DistillState:
    """G and the fake-score model both start as copies of the frozen teacher."""
    teacher = copy.deepcopy(teacher)
    for p in teacher.parameters():
        p.requires_grad_(False)
    g, fake = copy.deepcopy(teacher), copy.deepcopy(teacher)
    for m in (g, fake):
        for p in m.parameters():
            p.requires_grad_(True)
    for m in (teacher, g, fake):
        m.reset_counters()
    steps = make_student_schedule(cfg.q, sched)
    return DistillState(
        teacher=teacher,
        g=g,
        fake=fake,
        cache=LossMeanCache(steps.steps, cfg.ema_alpha, dtype=np.float32),
        opt_g=AdamW(g.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay, max_grad_norm=cfg.max_grad_norm),
        opt_fake=AdamW(fake.parameters(), lr=cfg.fake_lr, weight_decay=cfg.weight_decay, max_grad_norm=cfg.max_grad_norm),
        gen=torch.Generator().manual_seed(seed),
        cfg=cfg,
        sched=sched,
    )


def fake_score_step(state: DistillState, x: torch.Tensor | None = None, cond=None) -> DistillState:
    """One denoising update of the fake-score model on detached generator samples."""
    x = stop_grad(state.latest_x if x is None else x)
    cond = state.latest_c if cond is None else cond
    if x is None:
        raise RuntimeError("no generator samples yet")
    x_t, t, target = velocity_batch(x, state.sched, state.gen)
    loss = denoising_loss(state.fake(x_t, t, cond), target)
    check_finite(loss, "fake-score loss")
    state.opt_fake.zero_grad()
    loss.backward()
    gnorm = state.opt_fake.step()
    state.fake_steps += 1
    state.last_metrics = {"phase": "fake", "L_denoise": loss.item(), "grad_norm": gnorm}
    return state


def generator_step(state: DistillState, clips: torch.Tensor, labels: torch.Tensor) -> DistillState:
    """One generator update: DMD + temporal term on fresh samples, weighted regression on real clips."""
    cfg, sched, gen = state.cfg, state.sched, state.gen
    steps = state.steps
    b = cfg.batch
    shape = (b, *clips.shape[1:])

    c = labels[torch.randint(0, labels.shape[0], (b,), generator=gen)]
    z = torch.randn(shape, generator=gen)
    x = student_sample(state.g, z, c, steps, sched, generator=gen, grad_all_steps=cfg.grad_all_steps)
    dmd = dmd_generator_loss(x, state.teacher, state.fake, c, sched, generator=gen,
                             cfg_scale=cfg.cfg_scale, t_range=(cfg.t_lo, cfg.t_hi))
    raw_temp = temporal_reg_raw(x, cfg.temp_eps)
    l_temp = temporal_reg_loss(x, cfg.temp_eps, cfg.temp_clip)

    idx = torch.randint(0, clips.shape[0], (b,), generator=gen)
    y, cy = clips[idx], labels[idx]
    t_idx = torch.randint(0, len(steps), (b,), generator=gen)
    t_list = [steps[i] for i in t_idx.tolist()]
    t_b = torch.tensor(t_list, dtype=y.dtype)
    eps = torch.randn(y.shape, generator=gen)
    y_t = forward_diffuse(sched, y, t_b, eps)
    l_reg = torch.zeros(b)
    omega = torch.zeros(b)
    w = state.weights
    if cfg.regression != "none":
        y_hat = student_denoise_once(state.g, y_t, t_b, cy, sched)
        l_reg = regression_loss(y_hat, y)
        if cfg.regression == "adaptive":
            omega = torch.stack([
                torch.as_tensor(adaptive_weight(state.cache, float(t), float(l), w.k), dtype=torch.float32)
                for t, l in zip(t_list, l_reg.detach().tolist())
            ])
        else:
            omega = torch.ones(b)
    if not cfg.temporal:
        w.w_temp = 0.0
    if cfg.regression == "none":
        w.w_reg = 0.0
    loss = combined_generator_loss(dmd.loss, l_reg, omega, l_temp, w)
    if not torch.isfinite(loss):
        raise DivergenceError(f"generator loss is {float(loss)} at step {state.gen_steps + 1}")
    state.opt_g.zero_grad()
    loss.backward()
    gnorm = state.opt_g.step()
    state.gen_steps += 1

    if cfg.regression != "none":
        detached = l_reg.detach()
        for i, t in enumerate(steps):
            sel = t_idx == i
            if sel.any():
                state.cache.update(t, float(detached[sel].mean()))

    state.latest_x, state.latest_c = x.detach(), c
    state.last_metrics = {
        "phase": "generator",
        "L_KL": dmd.loss.item(),
        "L_reg_mean": l_reg.detach().mean().item(),
        "L_temp_raw": raw_temp.item(),
        "L_temp_eff": l_temp.item(),
        "omega_mean": float(omega.mean()),
        "omega_min": float(omega.min()),
        "omega_max": float(omega.max()),
        "omega_hist": np.histogram(omega.numpy(), bins=OMEGA_BINS)[0],
        "grad_norm": gnorm,
    }
    return state


def distill_entries(state: DistillState, iteration: int) -> dict:
    e = {}
    for prefix, m in (("teacher", state.teacher), ("g", state.g), ("fake", state.fake)):
        e.update(io.module_entries(prefix, m))
    names = [n for n, _ in state.g.named_parameters()]
    e.update(state.opt_g.state_entries("opt_g", names))
    e.update(state.opt_fake.state_entries("opt_fake", names))
    means, counts = state.cache.state()
    e["cache/means"] = np.asarray(means, dtype=np.float32)
    e["cache/counts"] = np.asarray(counts)
    e["rng"] = io.rng_entry(state.gen)
    e["counters"] = np.array([state.gen_steps, state.fake_steps, iteration])
    if state.latest_x is not None:
        e["latest/x"] = state.latest_x.numpy()
        e["latest/c"] = state.latest_c.numpy()
    return e


def restore_distill_state(state: DistillState, entries) -> int:
    """Load a distillation checkpoint into ``state``; returns the iteration count."""
    for prefix, m in (("teacher", state.teacher), ("g", state.g), ("fake", state.fake)):
        io.load_module(prefix, m, entries)
    names = [n for n, _ in state.g.named_parameters()]
    state.opt_g.load_entries("opt_g", names, entries)
    state.opt_fake.load_entries("opt_fake", names, entries)
    state.cache.load_state(entries["cache/means"], entries["cache/counts"])
    io.restore_rng(state.gen, entries["rng"])
    state.gen_steps, state.fake_steps, iteration = (int(v) for v in entries["counters"])
    if "latest/x" in entries:
        state.latest_x = torch.from_numpy(entries["latest/x"])
        state.latest_c = torch.from_numpy(entries["latest/c"]).long()
    return iteration


def _fmt(v) -> str:
    return "" if v is None else f"{v:.8g}"


def run_distillation(
    cfg: DistillConfig,
    teacher: Denoiser,
    clips: torch.Tensor,
    labels: torch.Tensor,
    sched: NoiseSchedule,
    out_dir,
    seed: int = 0,
    resume=None,
    on_sample: Callable[[DistillState], None] | None = None,
) -> DistillState:
    """Alternate ``update_ratio`` fake-score steps per generator step until ``cfg.steps``.

    Writes metrics.csv, omega_hist.csv and checkpoints (distill_XXXXXX.ckpt,
    distill_final.ckpt) under ``out_dir``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    state = init_distill_state(teacher, cfg, sched, seed)
    iteration = 0
    if resume:
        iteration = restore_distill_state(state, io.load_checkpoint(resume))
    cache_cols = [f"cache_t{i}" for i in range(len(state.steps))]
    header = METRIC_COLUMNS + cache_cols + ["grad_norm", "L_denoise"]
    metrics_path, hist_path = out / "metrics.csv", out / "omega_hist.csv"
    if resume:
        _truncate_log(metrics_path, iteration, cfg.update_ratio)
        _truncate_log(hist_path, state.gen_steps, None)
    mode = "a" if resume else "w"
    with metrics_path.open(mode, newline="") as mfh, hist_path.open(mode, newline="") as hfh:
        mw, hw = csv.writer(mfh), csv.writer(hfh)
        if not resume:
            mw.writerow(header)
            hw.writerow(["step"] + [f"bin{i}" for i in range(len(OMEGA_BINS) - 1)])
        total_iters = cfg.steps * cfg.update_ratio
        last_good = None
        while iteration < total_iters:
            try:
                if iteration % cfg.update_ratio == 0:
                    generator_step(state, clips, labels)
                    m = state.last_metrics
                    means = [state.cache.mean(t) for t in state.steps]
                    mw.writerow([state.gen_steps, "generator"] + [_fmt(m[k]) for k in METRIC_COLUMNS[2:]]
                                + [_fmt(v) for v in means] + [_fmt(m["grad_norm"]), ""])
                    hw.writerow([state.gen_steps] + [int(v) for v in m["omega_hist"]])
                    if on_sample and cfg.sample_every and state.gen_steps % cfg.sample_every == 0:
                        on_sample(state)
                fake_score_step(state)
                m = state.last_metrics
                mw.writerow([state.gen_steps, "fake"] + [""] * (len(header) - 4) + [_fmt(m["grad_norm"]), _fmt(m["L_denoise"])])
            except (DivergenceError, NonFiniteError) as exc:
                raise DivergenceError(f"{exc}; last good checkpoint: {last_good}") from exc
            iteration += 1
            if iteration % cfg.update_ratio == 0:
                done = iteration == total_iters
                if done or (cfg.ckpt_every and state.gen_steps % cfg.ckpt_every == 0):
                    mfh.flush()
                    hfh.flush()
                    name = "distill_final.ckpt" if done else f"distill_{state.gen_steps:06d}.ckpt"
                    io.save_checkpoint(out / name, distill_entries(state, iteration))
                    last_good = out / name
    return state


def _truncate_log(path: Path, upto: int, ratio: int | None) -> None:
    """Drop rows written after the checkpoint being resumed from."""
    if not path.exists():
        return
    with path.open(newline="") as fh:  # keep the csv module's \r\n endings intact
        lines = fh.read().splitlines(keepends=True)
    keep = lines[:1]
    rows = lines[1:]
    if ratio is None:
        keep += rows[:upto]
    else:
        # each generator step writes one row, each iteration one fake row
        gen_rows = (upto + ratio - 1) // ratio
        keep += rows[: gen_rows + upto]
    with path.open("w", newline="") as fh:
        fh.write("".join(keep))
