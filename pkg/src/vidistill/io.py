"""Binary containers: checkpoints ("AVDK1") and single clips ("AVDT")."""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

CKPT_MAGIC = b"AVDK1"
CLIP_MAGIC = b"AVDT"
_DTYPES = {"f4": np.dtype("<f4"), "i4": np.dtype("<i4")}


class FormatError(ValueError):
    pass


def _as_array(value) -> np.ndarray:
    if isinstance(value, torch.Tensor):
        value = value.detach().cpu().numpy()
    arr = np.asarray(value)
    if arr.dtype.kind == "f":
        return arr.astype("<f4")
    if arr.dtype.kind in "iub":
        return arr.astype("<i4")
    raise TypeError(f"cannot store dtype {arr.dtype}")


def save_checkpoint(path, entries: Mapping[str, object]) -> str:
    """Write entries (name -> array) and return the file's sha256."""
    arrays = {k: _as_array(v) for k, v in entries.items()}
    manifest = [
        {"name": k, "dtype": "f4" if a.dtype.kind == "f" else "i4", "shape": list(a.shape)}
        for k, a in arrays.items()
    ]
    head = json.dumps(manifest, separators=(",", ":")).encode()
    blob = bytearray(CKPT_MAGIC)
    blob += struct.pack("<I", len(head))
    blob += head
    for a in arrays.values():
        blob += np.ascontiguousarray(a).tobytes()
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(bytes(blob))
    tmp.replace(path)
    return hashlib.sha256(blob).hexdigest()


def load_checkpoint(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if not data.startswith(CKPT_MAGIC):
        raise FormatError(f"{path}: not an AVDK1 checkpoint")
    off = len(CKPT_MAGIC)
    (n,) = struct.unpack_from("<I", data, off)
    off += 4
    manifest = json.loads(data[off : off + n])
    off += n
    out = {}
    for e in manifest:
        dt = _DTYPES[e["dtype"]]
        count = int(np.prod(e["shape"], dtype=np.int64))
        end = off + count * dt.itemsize
        if end > len(data):
            raise FormatError(f"{path}: truncated payload for {e['name']}")
        out[e["name"]] = np.frombuffer(data, dtype=dt, count=count, offset=off).reshape(e["shape"]).copy()
        off = end
    if off != len(data):
        raise FormatError(f"{path}: trailing bytes")
    return out


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def module_entries(prefix: str, module: torch.nn.Module) -> dict[str, np.ndarray]:
    return {f"{prefix}/{k}": v for k, v in module.state_dict().items()}


def load_module(prefix: str, module: torch.nn.Module, entries: Mapping[str, np.ndarray]) -> None:
    state = {}
    for k, ref in module.state_dict().items():
        key = f"{prefix}/{k}"
        if key not in entries:
            raise KeyError(f"checkpoint lacks {key}")
        state[k] = torch.from_numpy(np.asarray(entries[key])).to(ref.dtype)
    module.load_state_dict(state)


def rng_entry(gen: torch.Generator) -> np.ndarray:
    return gen.get_state().numpy().view("<i4").copy()


def restore_rng(gen: torch.Generator, arr: np.ndarray) -> None:
    gen.set_state(torch.from_numpy(np.ascontiguousarray(arr, dtype="<i4").view(np.uint8).copy()))


def save_clip(path, clip) -> None:
    arr = _as_array(clip)
    if arr.ndim != 4 or arr.dtype.kind != "f":
        raise ValueError("clip must be a float [F, C, H, W] array")
    Path(path).write_bytes(CLIP_MAGIC + struct.pack("<4i", *arr.shape) + arr.tobytes())


def load_clip(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if not data.startswith(CLIP_MAGIC) or len(data) < 20:
        raise FormatError(f"{path}: not an AVDT clip")
    dims = struct.unpack_from("<4i", data, 4)
    if min(dims) <= 0:
        raise FormatError(f"{path}: bad dims {dims}")
    count = int(np.prod(dims))
    if len(data) != 20 + 4 * count:
        raise FormatError(f"{path}: payload size mismatch")
    return np.frombuffer(data, dtype="<f4", offset=20).reshape(dims).copy()
