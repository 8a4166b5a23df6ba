"""Versioned checkpoint container.

Layout, little-endian::

    b"APTK" | version u32 | header_len u32 | header (UTF-8 JSON, header_len bytes) | payload

The header holds ``config`` (model config), ``stage``, ``step``, ``seed``,
free-form ``meta`` and an ``arrays`` table of ``{name, shape, offset}``
entries. Each array is a contiguous run of float32 values in the payload,
``offset`` counted in bytes from the payload start.
"""
from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch

from apt_lab.config import ModelConfig
from apt_lab.errors import CheckpointFormatError

MAGIC = b"APTK"
VERSION = 1


@dataclass
class Checkpoint:
    config: ModelConfig
    stage: str
    step: int
    seed: int
    arrays: dict[str, np.ndarray]
    meta: dict[str, Any] = field(default_factory=dict)

    @classmethod
    def from_module(cls, module: torch.nn.Module, config: ModelConfig, stage: str, step: int, seed: int,
                    meta: dict | None = None) -> "Checkpoint":
        arrays = {
            name: t.detach().cpu().to(torch.float32).numpy().copy() for name, t in module.state_dict().items()
        }
        return cls(config=config, stage=stage, step=step, seed=seed, arrays=arrays, meta=dict(meta or {}))

    def state_dict(self, dtype: torch.dtype = torch.float32) -> dict[str, torch.Tensor]:
        return {k: torch.from_numpy(v.copy()).to(dtype) for k, v in self.arrays.items()}

    def build_model(self, dtype: torch.dtype = torch.float32):
        from apt_lab.model import DiT

        model = DiT(self.config).to(dtype)
        model.load_state_dict(self.state_dict(dtype))
        return model


def _header(ckpt: Checkpoint) -> tuple[dict, list[np.ndarray]]:
    table, payload, offset = [], [], 0
    for name in sorted(ckpt.arrays):
        arr = np.ascontiguousarray(ckpt.arrays[name], dtype="<f4")
        table.append({"name": name, "shape": list(arr.shape), "offset": offset})
        payload.append(arr)
        offset += arr.nbytes
    config = {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(ckpt.config).items()}
    header = {
        "config": config,
        "stage": ckpt.stage,
        "step": int(ckpt.step),
        "seed": int(ckpt.seed),
        "meta": ckpt.meta,
        "arrays": table,
    }
    return header, payload


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header, payload = _header(ckpt)
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<II", VERSION, len(raw)))
        fh.write(raw)
        for arr in payload:
            fh.write(arr.tobytes())
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic {data[:4]!r}")
    version, header_len = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise CheckpointFormatError(f"{path}: unsupported version {version}")
    start = 12 + header_len
    try:
        header = json.loads(data[12:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"{path}: unreadable header") from exc
    payload = memoryview(data)[start:]
    arrays = {}
    for entry in header["arrays"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        end = entry["offset"] + 4 * count
        if end > len(payload):
            raise CheckpointFormatError(f"{path}: array {entry['name']!r} runs past the payload")
        arrays[entry["name"]] = np.frombuffer(payload[entry["offset"]:end], dtype="<f4").reshape(entry["shape"]).copy()
    cfg = dict(header["config"])
    cfg["data_shape"] = tuple(cfg["data_shape"])
    return Checkpoint(
        config=ModelConfig(**cfg),
        stage=header["stage"],
        step=header["step"],
        seed=header["seed"],
        arrays=arrays,
        meta=header.get("meta", {}),
    )
