"""Checkpoint files: a flat binary tensor map plus a JSON sidecar with the model config.

Binary layout (all little-endian)::

    b"PLGFCKPT" | u32 version | u32 tensor count
    per tensor: u32 name length | utf-8 name | u32 ndim | u64 * ndim dims | f32 * prod(dims)

Names are the dot-separated module paths of ``state_dict``.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointError
from .model import ModelConfig, build_model

MAGIC = b"PLGFCKPT"
VERSION = 1


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def write_tensors(path, tensors: dict) -> None:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, t in tensors.items():
        arr = np.asarray(t.detach().cpu().numpy() if torch.is_tensor(t) else t, dtype="<f4", order="C")
        key = name.encode("utf-8")
        parts.append(struct.pack("<I", len(key)))
        parts.append(key)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_tensors(path) -> dict[str, torch.Tensor]:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if buf[:8] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file")
    version, count = struct.unpack_from("<II", buf, 8)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 16
    out = {}
    try:
        for _ in range(count):
            (klen,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos:pos + klen].decode("utf-8")
            pos += klen
            (ndim,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
            pos += 8 * ndim
            n = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(buf, dtype="<f4", count=n, offset=pos).reshape(shape)
            pos += 4 * n
            out[name] = torch.from_numpy(arr.astype(np.float32))
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"truncated or corrupt checkpoint {path}") from exc
    return out


def save_checkpoint(model: torch.nn.Module, path, architecture: str = "plgf", extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    write_tensors(path, model.state_dict())
    meta = {"format": "plgf-checkpoint", "version": VERSION, "architecture": architecture,
            "model": model.config.to_dict()}
    if extra:
        meta.update(extra)
    sidecar_path(path).write_text(json.dumps(meta, indent=2))
    return path


def load_checkpoint(path, expect: ModelConfig | None = None) -> torch.nn.Module:
    """Rebuild the model described by the sidecar and load its weights (eval mode)."""
    side = sidecar_path(path)
    try:
        meta = json.loads(side.read_text())
        cfg = ModelConfig.from_dict(meta["model"])
        arch = meta.get("architecture", "plgf")
    except (OSError, KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"bad or missing checkpoint sidecar {side}: {exc}") from exc
    if expect is not None and expect != cfg:
        raise CheckpointError("checkpoint config does not match the expected model config")
    model = build_model(cfg, arch)
    tensors = read_tensors(path)
    state = model.state_dict()
    if set(tensors) != set(state):
        missing = sorted(set(state) - set(tensors))
        unexpected = sorted(set(tensors) - set(state))
        raise CheckpointError(f"checkpoint/config mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")
    for k, v in tensors.items():
        if tuple(v.shape) != tuple(state[k].shape):
            raise CheckpointError(f"shape mismatch for {k}: {tuple(v.shape)} vs {tuple(state[k].shape)}")
    model.load_state_dict(tensors)
    model.architecture = arch
    return model.eval()
