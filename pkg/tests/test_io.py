import json
import struct

import numpy as np
import pytest
import torch

from vidistill.io import (
    FormatError,
    file_sha256,
    load_checkpoint,
    load_clip,
    load_module,
    module_entries,
    restore_rng,
    rng_entry,
    save_checkpoint,
    save_clip,
)
from vidistill.numerics import NonFiniteError
from vidistill.optim import AdamW, optimizer_step


def test_checkpoint_byte_layout(tmp_path):
    path = tmp_path / "a.ckpt"
    save_checkpoint(path, {"w": np.array([[1.5, -2.0]], np.float32), "n": np.array([7])})
    raw = path.read_bytes()
    assert raw[:5] == b"AVDK1"
    (n,) = struct.unpack_from("<I", raw, 5)
    manifest = json.loads(raw[9 : 9 + n])
    assert manifest == [
        {"name": "w", "dtype": "f4", "shape": [1, 2]},
        {"name": "n", "dtype": "i4", "shape": [1]},
    ]
    payload = raw[9 + n :]
    assert payload == struct.pack("<2f", 1.5, -2.0) + struct.pack("<i", 7)


def test_checkpoint_roundtrip_and_hash(tmp_path):
    entries = {"a": torch.randn(3, 4), "b": np.arange(5), "c": np.zeros((0, 2), np.float32)}
    digest = save_checkpoint(tmp_path / "x.ckpt", entries)
    assert digest == file_sha256(tmp_path / "x.ckpt")
    back = load_checkpoint(tmp_path / "x.ckpt")
    assert np.array_equal(back["a"], entries["a"].numpy())
    assert back["b"].dtype == np.dtype("<i4") and back["b"].tolist() == list(range(5))
    assert back["c"].shape == (0, 2)
    assert save_checkpoint(tmp_path / "y.ckpt", entries) == digest


def test_checkpoint_rejects_corruption(tmp_path):
    p = tmp_path / "x.ckpt"
    save_checkpoint(p, {"a": np.ones(4, np.float32)})
    raw = p.read_bytes()
    (tmp_path / "bad_magic").write_bytes(b"XXXXX" + raw[5:])
    (tmp_path / "short").write_bytes(raw[:-1])
    (tmp_path / "long").write_bytes(raw + b"\0")
    for name in ("bad_magic", "short", "long"):
        with pytest.raises(FormatError):
            load_checkpoint(tmp_path / name)
    with pytest.raises(TypeError):
        save_checkpoint(p, {"s": np.array(["x"])})


def test_module_roundtrip(tmp_path):
    torch.manual_seed(0)
    a, b = torch.nn.Linear(3, 2), torch.nn.Linear(3, 2)
    save_checkpoint(tmp_path / "m.ckpt", module_entries("net", a))
    load_module("net", b, load_checkpoint(tmp_path / "m.ckpt"))
    assert torch.equal(a.weight, b.weight) and torch.equal(a.bias, b.bias)
    with pytest.raises(KeyError):
        load_module("other", b, load_checkpoint(tmp_path / "m.ckpt"))


def test_rng_roundtrip(tmp_path):
    g = torch.Generator().manual_seed(42)
    torch.randn(10, generator=g)
    state = rng_entry(g)
    assert g.get_state().numel() % 4 == 0
    save_checkpoint(tmp_path / "r.ckpt", {"rng": state})
    expected = torch.randn(5, generator=g)
    h = torch.Generator()
    restore_rng(h, load_checkpoint(tmp_path / "r.ckpt")["rng"])
    assert torch.equal(torch.randn(5, generator=h), expected)


def test_clip_format(tmp_path):
    clip = np.random.default_rng(0).normal(size=(2, 1, 3, 4)).astype(np.float32)
    p = tmp_path / "c.avdt"
    save_clip(p, clip)
    raw = p.read_bytes()
    assert raw[:4] == b"AVDT" and struct.unpack_from("<4i", raw, 4) == (2, 1, 3, 4)
    assert len(raw) == 20 + 4 * clip.size
    assert np.array_equal(load_clip(p), clip)
    p.write_bytes(raw[:-4])
    with pytest.raises(FormatError):
        load_clip(p)
    p.write_bytes(b"AVDT" + struct.pack("<4i", 0, 1, 1, 1))
    with pytest.raises(FormatError):
        load_clip(p)
    with pytest.raises(ValueError):
        save_clip(p, np.zeros((2, 3)))


# optimizer


def numpy_adamw(p, grads, lr, b1, b2, eps, wd, clip):
    p = p.copy()
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    for k, g in enumerate(grads, start=1):
        n = np.sqrt((g**2).sum())
        if n > clip:
            g = g * clip / (n + 1e-6)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p * (1 - lr * wd)
        p = p - lr * (m / (1 - b1**k)) / (np.sqrt(v / (1 - b2**k)) + eps)
    return p


def test_adamw_matches_numpy_oracle(f64):
    rng = np.random.default_rng(0)
    p0 = rng.normal(size=6)
    grads = [rng.normal(size=6) * s for s in (1.0, 50.0, 0.1, 3.0)]
    param = torch.nn.Parameter(torch.tensor(p0))
    opt = AdamW([param], lr=1e-2, weight_decay=0.1, max_grad_norm=10.0)
    norms = [optimizer_step(opt, [param], [torch.tensor(g)]) for g in grads]
    expected = numpy_adamw(p0, grads, 1e-2, 0.9, 0.999, 1e-8, 0.1, 10.0)
    assert np.allclose(param.detach().numpy(), expected, rtol=1e-12, atol=1e-14)
    assert norms[1] == pytest.approx(np.sqrt((grads[1] ** 2).sum()))


def test_adamw_matches_torch_without_clipping(f64):
    torch.manual_seed(0)
    a = torch.nn.Parameter(torch.randn(5))
    b = torch.nn.Parameter(a.detach().clone())
    ours = AdamW([a], lr=1e-3, weight_decay=0.01, max_grad_norm=None)
    ref = torch.optim.AdamW([b], lr=1e-3, weight_decay=0.01)
    for _ in range(5):
        g = torch.randn(5)
        a.grad, b.grad = g.clone(), g.clone()
        ours.step()
        ref.step()
    assert torch.allclose(a, b, rtol=1e-10, atol=1e-12)


def test_adamw_nonfinite_and_state(tmp_path):
    p = torch.nn.Parameter(torch.zeros(3))
    opt = AdamW([p])
    p.grad = torch.tensor([1.0, float("nan"), 0.0])
    with pytest.raises(NonFiniteError):
        opt.step()
    p.grad = torch.ones(3)
    opt.step()
    save_checkpoint(tmp_path / "o.ckpt", opt.state_entries("opt", ["p"]))
    other = AdamW([torch.nn.Parameter(torch.zeros(3))])
    other.load_entries("opt", ["p"], load_checkpoint(tmp_path / "o.ckpt"))
    assert other.step_count == 1
    assert torch.equal(other.m[0], opt.m[0]) and torch.equal(other.v[0], opt.v[0])
