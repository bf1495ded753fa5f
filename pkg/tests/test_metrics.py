import csv

import numpy as np
import pytest
import torch

from vidistill.data import SpriteSpec, gen_synthetic_clip, make_dataset
from vidistill.metrics import (
    MetricRow,
    cosine_profile,
    dynamic_degree,
    histogram_l1,
    psnr,
    saturation_profile,
    sprite_count_consistency,
    sprite_counts,
    temporal_variance_metric,
    write_metrics,
)


def test_temporal_variance_examples():
    clip = np.zeros((2, 1, 2, 2))
    clip[0], clip[1] = 1.0, -1.0
    assert temporal_variance_metric(clip) == 1.0
    assert temporal_variance_metric(np.ones((4, 1, 2, 2))) == 0.0
    with pytest.raises(ValueError):
        temporal_variance_metric(np.ones((1, 1, 2, 2)))


def test_psnr_examples():
    a = np.zeros((2, 1, 4, 4))
    assert psnr(a, a) == 100.0
    assert psnr(-np.ones_like(a), np.ones_like(a)) == pytest.approx(0.0)
    assert psnr(a, a + 0.2) == pytest.approx(20.0)
    with pytest.raises(ValueError):
        psnr(a, a[:1])


def test_saturation_profile():
    grey = np.zeros((2, 3, 4, 4))
    mean, hist = saturation_profile(grey)
    assert mean == 0.0 and hist[0] == 2 * 16 and hist.sum() == 32
    red = np.full((1, 3, 2, 2), -1.0)
    red[:, 0] = 1.0
    mean, hist = saturation_profile(red)
    assert mean == 1.0 and hist[-1] == 4
    assert saturation_profile(np.zeros((2, 1, 4, 4))) == (None, None)


def test_histogram_l1():
    assert histogram_l1([1, 1], [2, 2]) == 0.0
    assert histogram_l1([1, 0], [0, 1]) == 2.0


def test_dynamic_degree_on_synthetic_classes():
    moving = [gen_synthetic_clip(SpriteSpec(motion_class=0, speed=2, seed=s, size=8))[0] for s in range(3)]
    static = [gen_synthetic_clip(SpriteSpec(motion_class=3, seed=s, size=8))[0] for s in range(3)]
    assert dynamic_degree(moving) == 1.0
    assert dynamic_degree(static) == 0.0
    assert dynamic_degree(moving + static) == 0.5
    with pytest.raises(ValueError):
        dynamic_degree([])


def test_sprite_counts_wrap_aware():
    frame = np.full((1, 1, 6, 6), -1.0)
    frame[0, 0, 0, 0] = frame[0, 0, 5, 0] = 1.0  # one sprite split by the top/bottom edge
    assert sprite_counts(frame).tolist() == [1]
    frame[0, 0, 2, 3] = 1.0
    assert sprite_counts(frame).tolist() == [2]
    assert sprite_counts(np.full((1, 1, 4, 4), -1.0)).tolist() == [0]


def test_sprite_consistency_on_training_data():
    clips, _ = make_dataset(32, seed=0)
    assert sprite_count_consistency(clips) == 1.0
    ghost = clips.clone()
    ghost[:, ::2, :, 0:2, 0:2] = 1.0  # extra blob on half the frames, away from most sprites
    assert sprite_count_consistency(ghost) < 1.0
    with pytest.raises(ValueError):
        sprite_count_consistency([])


def test_cosine_profile():
    x = torch.randn(3, 4, 1, 2, 2)
    const = x[:, :1].repeat(1, 4, 1, 1, 1)
    prof = cosine_profile([const, x[0]])
    assert prof[0] == pytest.approx((1.0, 0.0))
    assert len(prof) == 2 and -1 <= prof[1][0] <= 1 and prof[1][1] == 0.0
    with pytest.raises(ValueError):
        cosine_profile([])


def test_metric_rows(tmp_path):
    with pytest.raises(ValueError):
        MetricRow("r", "m", 1.0, count=0)
    with pytest.raises(ValueError):
        MetricRow("r", "hist", None, bins=[1, 2], count=4)
    rows = [MetricRow("r", "dd", 0.5, count=8), MetricRow("r", "hist", None, bins=[1.0, 3.0], count=4)]
    p = tmp_path / "m.csv"
    write_metrics(rows, p)
    write_metrics(rows[:1], p, append=True)
    got = list(csv.DictReader(p.open()))
    assert [r["metric"] for r in got] == ["dd", "hist", "dd"]
    assert got[1]["value"] == "" and got[1]["bins"] == "1 3"
    assert float(got[0]["value"]) == 0.5
