"""Checkpoint container: a JSON header plus named float32 little-endian arrays.

The on-disk layout is the safetensors format (8-byte header length, JSON
header, raw tensor bytes); our own header travels as a JSON string under the
``__metadata__`` key ``header``.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
import torch
from safetensors.numpy import load_file, save_file
from safetensors import safe_open

from .model import ModelConfig, SubtypeClassifier


def save_checkpoint(path: str | Path, model: SubtypeClassifier, header: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {
        name: t.detach().cpu().numpy().astype("<f4", copy=True)
        for name, t in model.state_dict().items()
    }
    meta = {"role": model.role, "model": model.cfg.to_dict(), **(header or {})}
    save_file(arrays, str(path), metadata={"header": json.dumps(meta, sort_keys=True)})


def read_header(path: str | Path) -> dict:
    with safe_open(str(path), framework="numpy") as fh:
        return json.loads(fh.metadata()["header"])


def load_checkpoint(path: str | Path, dtype: torch.dtype = torch.float32) -> tuple[SubtypeClassifier, dict]:
    header = read_header(path)
    arrays = load_file(str(path))
    model = SubtypeClassifier(ModelConfig(**header["model"]), header["role"])
    state = {k: torch.from_numpy(np.asarray(v, dtype=np.float32)) for k, v in arrays.items()}
    model.load_state_dict(state, strict=True)
    return model.to(dtype), header


def file_hash(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
