"""
ICLF checkpoint files: model config, named parameter tensors and optional
optimizer moments.

Layout (little-endian):
    magic "ICLF", u16 version,
    u32 config length + ModelConfig JSON,
    u32 meta length + meta JSON (step, seed, adam step, ...),
    u32 tensor count, then per tensor:
        u16 name length + name bytes, u8 ndim, u32 per dim, float32 payload.
Adam moments are stored as tensors named "adam.m/<param>" and "adam.v/<param>".
"""
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Union

import numpy as np
from pydantic import ValidationError

from src.models.config import ModelConfig
from src.modules.optim import AdamState
from src.modules.transformer import TransformerModel, param_shapes
from src.utils.binio import BinaryReader, BinaryWriter
from src.utils.errors import FormatError

MAGIC = b"ICLF"
VERSION = 1
_M, _V = "adam.m/", "adam.v/"


@dataclass
class Checkpoint:
    """A loaded checkpoint."""
    model: TransformerModel
    adam: Optional[AdamState] = None
    meta: Dict[str, Any] = field(default_factory=dict)

    @property
    def step(self) -> int:
        return int(self.meta.get("step", 0))

    def __str__(self) -> str:
        return f"Checkpoint(step {self.step}, {self.model})"


def checkpoint_to_bytes(model: TransformerModel, adam: Optional[AdamState] = None,
                        meta: Optional[Dict[str, Any]] = None) -> bytes:
    meta = dict(meta or {})
    tensors = dict(model.params)
    if adam is not None:
        meta["adam_step"] = adam.step
        tensors.update({_M + k: v for k, v in adam.m.items()})
        tensors.update({_V + k: v for k, v in adam.v.items()})
    w = BinaryWriter()
    w.raw(MAGIC)
    w.u16(VERSION)
    for blob in (model.config.model_dump_json().encode(), json.dumps(meta, sort_keys=True).encode()):
        w.u32(len(blob))
        w.raw(blob)
    w.u32(len(tensors))
    for name, arr in tensors.items():
        b = name.encode("utf-8")
        w.u16(len(b))
        w.raw(b)
        w.u8(arr.ndim)
        for dim in arr.shape:
            w.u32(dim)
        w.array(arr, "<f4")
    return w.getvalue()


def checkpoint_from_bytes(data: bytes, label: str = "checkpoint") -> Checkpoint:
    rd = BinaryReader(data, label)
    rd.expect_magic(MAGIC)
    at = rd.offset
    version = rd.u16("version")
    if version != VERSION:
        raise FormatError(f"{label}: unsupported checkpoint version {version}", offset=at)
    at = rd.offset
    try:
        config = ModelConfig.model_validate_json(rd.raw(rd.u32("config length"), "config"))
        at = rd.offset
        meta = json.loads(rd.raw(rd.u32("meta length"), "meta"))
    except (ValidationError, ValueError) as exc:
        raise FormatError(f"{label}: bad header JSON: {exc}", offset=at) from exc
    tensors = {}
    for _ in range(rd.u32("tensor count")):
        at = rd.offset
        name = rd.raw(rd.u16("name length"), "name").decode("utf-8", errors="replace")
        shape = tuple(rd.u32("dim") for _ in range(rd.u8("ndim")))
        if name in tensors:
            raise FormatError(f"{label}: duplicate tensor {name}", offset=at)
        tensors[name] = rd.array(np.float32, int(np.prod(shape)), f"tensor {name}").reshape(shape)
    rd.done()

    expected = param_shapes(config)
    params = {}
    for name, shape in expected.items():
        if name not in tensors:
            raise FormatError(f"{label}: missing parameter {name}")
        if tensors[name].shape != shape:
            raise FormatError(f"{label}: parameter {name} has shape {tensors[name].shape}, expected {shape}")
        params[name] = tensors[name]
    adam = None
    if any(k.startswith(_M) for k in tensors):
        adam = AdamState(
            m={k: tensors[_M + k] for k in expected},
            v={k: tensors[_V + k] for k in expected},
            step=int(meta.get("adam_step", 0)),
        )
    return Checkpoint(TransformerModel(config, params), adam, meta)


def save_checkpoint(path: Union[str, Path], model: TransformerModel, adam: Optional[AdamState] = None,
                    meta: Optional[Dict[str, Any]] = None) -> Path:
    """Write atomically so a crash never leaves a half-written checkpoint."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(checkpoint_to_bytes(model, adam, meta))
    os.replace(tmp, path)
    return path


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    path = Path(path)
    return checkpoint_from_bytes(path.read_bytes(), label=str(path))
