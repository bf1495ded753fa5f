import csv

import numpy as np
import pytest
import torch

from vidistill.config import DistillConfig, ModelConfig, TeacherConfig
from vidistill.data import make_dataset
from vidistill.diffusion import NoiseSchedule
from vidistill.io import file_sha256, load_checkpoint
from vidistill.trainer import (
    DivergenceError,
    build_denoiser,
    denoiser_val_loss,
    fake_score_step,
    generator_step,
    init_distill_state,
    load_teacher,
    run_distillation,
    train_teacher,
)

SCHED = NoiseSchedule(5.0)
MCFG = ModelConfig(width=4, emb_dim=8)


@pytest.fixture(scope="module")
def data():
    return make_dataset(16, seed=0, frames=4, height=8, width=8, size=3)


@pytest.fixture(scope="module")
def teacher(data):
    torch.manual_seed(0)
    return build_denoiser(MCFG, 1, 4)


def tiny_cfg(**kw):
    base = dict(steps=3, batch=2, lr=1e-3, fake_lr=1e-3, ckpt_every=0, sample_every=0)
    base.update(kw)
    return DistillConfig(**base)


def params_equal(a, b):
    return all(torch.equal(p, q) for p, q in zip(a.parameters(), b.parameters()))


def test_teacher_training_learns(tmp_path, data):
    clips, labels = data
    tcfg = TeacherConfig(steps=150, batch=8, lr=3e-3, log_every=50, ckpt_every=100)
    model, hist = train_teacher(tcfg, MCFG, clips, labels, 4, seed=0, out_dir=tmp_path, val=data)
    assert np.mean(hist[-20:]) < np.mean(hist[:20])
    vl, zb = denoiser_val_loss(model, *data, SCHED)
    assert vl < zb
    rows = list(csv.DictReader((tmp_path / "teacher_metrics.csv").open()))
    assert [int(r["step"]) for r in rows] == [50, 100, 150]
    back = load_teacher(tmp_path / "teacher.ckpt", MCFG, 1, 4)
    assert params_equal(back, model)


def test_init_state_copies_and_freezes(teacher):
    st = init_distill_state(teacher, tiny_cfg(), SCHED, seed=0)
    assert params_equal(st.g, teacher) and params_equal(st.fake, teacher)
    assert not any(p.requires_grad for p in st.teacher.parameters())
    assert all(p.requires_grad for p in st.g.parameters())
    assert st.g is not teacher and st.teacher is not teacher


def test_generator_step_touches_only_generator(teacher, data):
    st = init_distill_state(teacher, tiny_cfg(), SCHED, seed=0)
    t_before = [p.clone() for p in st.teacher.parameters()]
    f_before = [p.clone() for p in st.fake.parameters()]
    generator_step(st, *data)
    assert all(torch.equal(a, b) for a, b in zip(t_before, st.teacher.parameters()))
    assert all(torch.equal(a, b) for a, b in zip(f_before, st.fake.parameters()))
    assert not params_equal(st.g, teacher)
    assert st.gen_steps == 1 and st.latest_x.shape == (2, 4, 1, 8, 8)
    assert any(st.cache.mean(t) is not None for t in st.steps)
    m = st.last_metrics
    assert m["omega_mean"] == 1.0  # cache warmup
    assert m["L_temp_eff"] >= 0.6
    fake_score_step(st)
    assert st.fake_steps == 1 and not params_equal(st.fake, teacher)


def test_regression_modes(teacher, data):
    st = init_distill_state(teacher, tiny_cfg(regression="naive"), SCHED, seed=0)
    for _ in range(3):
        generator_step(st, *data)
    assert st.last_metrics["omega_min"] == 1.0 == st.last_metrics["omega_max"]
    st = init_distill_state(teacher, tiny_cfg(regression="none"), SCHED, seed=0)
    generator_step(st, *data)
    assert st.last_metrics["L_reg_mean"] == 0.0
    assert all(st.cache.mean(t) is None for t in st.steps)
    st = init_distill_state(teacher, tiny_cfg(), SCHED, seed=0)
    for _ in range(6):
        generator_step(st, *data)
    assert st.last_metrics["omega_max"] < 1.0  # cache warmed, sigmoid weights below one


def test_weights_property_is_fresh_each_step(teacher, data):
    st = init_distill_state(teacher, tiny_cfg(temporal=False), SCHED, seed=0)
    generator_step(st, *data)
    assert st.weights.w_temp == 0.05  # disabling the term is per-step, not sticky state


def test_run_distillation_schedule_and_logs(tmp_path, teacher, data):
    cfg = tiny_cfg(steps=3, update_ratio=5)
    st = run_distillation(cfg, teacher, *data, SCHED, tmp_path, seed=0)
    assert st.gen_steps == 3 and st.fake_steps == 15
    rows = list(csv.DictReader((tmp_path / "metrics.csv").open()))
    phases = [r["phase"] for r in rows]
    assert phases == (["generator"] + ["fake"] * 5) * 3
    assert all(r["L_denoise"] for r in rows if r["phase"] == "fake")
    assert all(r["cache_t0"] != "" or r["cache_t1"] != "" for r in rows if r["phase"] == "generator")
    hist = list(csv.reader((tmp_path / "omega_hist.csv").open()))
    assert len(hist) == 4 and all(sum(map(int, h[1:])) == 2 for h in hist[1:])
    assert (tmp_path / "distill_final.ckpt").exists()


def test_resume_is_bit_exact(tmp_path, teacher, data):
    cfg = tiny_cfg(steps=4, update_ratio=2, ckpt_every=2)
    run_distillation(cfg, teacher, *data, SCHED, tmp_path / "a", seed=1)
    # a fresh process picks up from the mid-run checkpoint
    run_distillation(cfg, teacher, *data, SCHED, tmp_path / "c", seed=1, resume=tmp_path / "a" / "distill_000002.ckpt")
    assert file_sha256(tmp_path / "a" / "distill_final.ckpt") == file_sha256(tmp_path / "c" / "distill_final.ckpt")
    a = load_checkpoint(tmp_path / "a" / "distill_final.ckpt")
    assert a["counters"].tolist() == [4, 8, 8]


def test_resume_truncates_logs(tmp_path, teacher, data):
    cfg = tiny_cfg(steps=4, update_ratio=2, ckpt_every=2)
    out = tmp_path / "run"
    run_distillation(cfg, teacher, *data, SCHED, out, seed=1)
    full = (out / "metrics.csv").read_bytes()
    hist = (out / "omega_hist.csv").read_bytes()
    run_distillation(cfg, teacher, *data, SCHED, out, seed=1, resume=out / "distill_000002.ckpt")
    assert (out / "metrics.csv").read_bytes() == full
    assert (out / "omega_hist.csv").read_bytes() == hist


def test_same_seed_same_bytes(tmp_path, teacher, data):
    cfg = tiny_cfg(steps=2)
    run_distillation(cfg, teacher, *data, SCHED, tmp_path / "x", seed=7)
    run_distillation(cfg, teacher, *data, SCHED, tmp_path / "y", seed=7)
    for name in ("distill_final.ckpt", "metrics.csv", "omega_hist.csv"):
        assert file_sha256(tmp_path / "x" / name) == file_sha256(tmp_path / "y" / name)


def test_divergence_is_reported(tmp_path, data):
    torch.manual_seed(0)
    bad = build_denoiser(MCFG, 1, 4)
    with torch.no_grad():
        next(bad.parameters()).fill_(float("nan"))
    with pytest.raises(DivergenceError):
        run_distillation(tiny_cfg(), bad, *data, SCHED, tmp_path, seed=0)
