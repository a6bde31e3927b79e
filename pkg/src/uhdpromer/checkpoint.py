"""Versioned checkpoint container.

Layout::

    b"UHDPCKPT" | u32 format_version | u64 header_len | header (UTF-8 JSON)
    | payload (row-major little-endian float32 arrays) | sha256 of all preceding bytes

The header holds the model config snapshot, step counter, optimizer
hyperparameters and an index of ``name -> (shape, offset, nbytes)``. Model
arrays are named ``model/<dotted.path>``; AdamW moments
``optim/<dotted.path>/exp_avg`` and ``.../exp_avg_sq``.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .model import ModelConfig, UHDPromer, build_model

MAGIC = b"UHDPCKPT"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")
_DIGEST = 32


class CheckpointError(RuntimeError):
    pass


class ConfigMismatchError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    model: UHDPromer
    step: int
    optimizer_state: dict | None = None
    extra: dict = field(default_factory=dict)


def _f32_bytes(t: torch.Tensor) -> bytes:
    return t.detach().cpu().to(torch.float32).contiguous().numpy().astype("<f4", copy=False).tobytes()


def save_checkpoint(model: UHDPromer, optimizer: torch.optim.Optimizer | None, step: int, path,
                    extra: dict | None = None) -> Path:
    path = Path(path)
    names = [n for n, _ in model.named_parameters()]
    index, chunks, offset = [], [], 0

    def put(name, t):
        nonlocal offset
        b = _f32_bytes(t)
        index.append({"name": name, "shape": list(t.shape), "offset": offset, "nbytes": len(b)})
        chunks.append(b)
        offset += len(b)

    for name, t in model.state_dict().items():
        put(f"model/{name}", t)

    optim_meta = None
    if optimizer is not None:
        sd = optimizer.state_dict()
        steps = {}
        for i, name in enumerate(names):
            st = sd["state"].get(i)
            if not st:
                continue
            put(f"optim/{name}/exp_avg", st["exp_avg"])
            put(f"optim/{name}/exp_avg_sq", st["exp_avg_sq"])
            steps[name] = float(st["step"])
        groups = [{k: v for k, v in g.items() if k != "params"} for g in sd["param_groups"]]
        optim_meta = {"param_groups": groups, "steps": steps}

    header = json.dumps({
        "model_config": model.config.to_dict(),
        "step": int(step),
        "optimizer": optim_meta,
        "extra": extra or {},
        "tensors": index,
    }, sort_keys=True).encode()

    body = _PREFIX.pack(MAGIC, FORMAT_VERSION, len(header)) + header + b"".join(chunks)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(body)
        fh.write(hashlib.sha256(body).digest())
    os.replace(tmp, path)
    return path


def _read(path: Path):
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(raw) < _PREFIX.size + _DIGEST:
        raise CheckpointError(f"{path}: truncated checkpoint ({len(raw)} bytes)")
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, this build reads {FORMAT_VERSION}")
    body, digest = raw[:-_DIGEST], raw[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch, file is corrupt")
    start = _PREFIX.size
    header = json.loads(body[start:start + hlen])
    payload = memoryview(body)[start + hlen:]
    arrays = {}
    for e in header["tensors"]:
        end = e["offset"] + e["nbytes"]
        if end > len(payload):
            raise CheckpointError(f"{path}: tensor {e['name']} runs past end of payload")
        a = np.frombuffer(payload[e["offset"]:end], dtype="<f4").reshape(e["shape"])
        arrays[e["name"]] = torch.from_numpy(a.astype(np.float32))
    return header, arrays


def load_checkpoint(path, expected_config: ModelConfig | None = None) -> Checkpoint:
    """Rebuild the model from the stored config and restore every array.

    If ``expected_config`` is given, any differing field is a hard error.
    """
    path = Path(path)
    header, arrays = _read(path)
    config = ModelConfig.from_dict(header["model_config"])
    if expected_config is not None:
        diff = expected_config.diff(config)
        if diff:
            detail = ", ".join(f"{k}: expected {a!r}, checkpoint has {b!r}" for k, (a, b) in sorted(diff.items()))
            raise ConfigMismatchError(f"{path}: config mismatch ({detail})")
    model = build_model(config)
    state = {k[len("model/"):]: v for k, v in arrays.items() if k.startswith("model/")}
    missing = set(model.state_dict()) - set(state)
    if missing:
        raise CheckpointError(f"{path}: missing arrays {sorted(missing)[:5]}")
    model.load_state_dict(state, strict=True)

    opt_state = None
    meta = header.get("optimizer")
    if meta is not None:
        names = [n for n, _ in model.named_parameters()]
        st = {}
        for i, name in enumerate(names):
            if name in meta["steps"]:
                st[i] = {
                    "step": torch.tensor(meta["steps"][name], dtype=torch.float32),
                    "exp_avg": arrays[f"optim/{name}/exp_avg"],
                    "exp_avg_sq": arrays[f"optim/{name}/exp_avg_sq"],
                }
        groups = [dict(g, params=list(range(len(names)))) for g in meta["param_groups"]]
        opt_state = {"state": st, "param_groups": groups}
    return Checkpoint(config, model, header["step"], opt_state, header.get("extra", {}))
