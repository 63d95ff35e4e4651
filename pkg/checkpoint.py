"""
ATAL checkpoint files.

Layout (little-endian):
    b"ATAL" | u32 version | u32 header length | header JSON | f32 parameter blocks

The header carries the model config, free-form metadata (behavior class,
epochs trained), a manifest of parameter names/shapes/offsets and the batch-norm
running statistics. Parameter blocks follow in manifest order.
"""

import json
import logging
import os
import struct
from dataclasses import asdict
from pathlib import Path
from typing import Any

import numpy as np

from model import ModelConfig, ModelParams, batch_norm_names, parameter_shapes
from numerics import BatchNormState, Tensor

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"ATAL"
CHECKPOINT_VERSION = 1
_PREFIX = struct.Struct("<4sII")


class CheckpointFormatError(ValueError):
    """Raised when a checkpoint file is malformed or inconsistent with its config."""


def encode_checkpoint(params: ModelParams, config: ModelConfig, meta: dict[str, Any] | None = None) -> bytes:
    manifest = []
    blocks = []
    offset = 0
    for name, tensor in params.tensors.items():
        manifest.append({"name": name, "shape": list(tensor.shape), "offset": offset})
        blocks.append(np.ascontiguousarray(tensor.values, dtype="<f4").tobytes())
        offset += tensor.size

    batch_norm = {
        name: {
            "running_mean": [float(v) for v in state.running_mean],
            "running_var": [float(v) for v in state.running_var],
            "updates": int(state.updates),
        }
        for name, state in params.bn_states.items()
    }
    header = {
        "config": asdict(config),
        "meta": meta or {},
        "manifest": manifest,
        "batch_norm": batch_norm,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _PREFIX.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(header_bytes)) + header_bytes + b"".join(blocks)


def save_checkpoint(path: str | Path, params: ModelParams, config: ModelConfig, meta: dict[str, Any] | None = None):
    """Write a checkpoint atomically: readers never observe a partial file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp_path = path.with_name(path.name + ".tmp")
    with open(tmp_path, "wb") as handle:
        handle.write(encode_checkpoint(params, config, meta))
    os.replace(tmp_path, path)
    logger.info(f"Saved checkpoint with {params.parameter_count()} parameters to {path}")


def decode_checkpoint(data: bytes, source: str = "<bytes>") -> tuple[ModelParams, ModelConfig, dict[str, Any]]:
    if len(data) < _PREFIX.size:
        raise CheckpointFormatError(f"{source}: truncated prefix ({len(data)} bytes)")
    magic, version, header_length = _PREFIX.unpack_from(data, 0)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"{source}: bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"{source}: unsupported version {version}")
    body_start = _PREFIX.size + header_length
    if body_start > len(data):
        raise CheckpointFormatError(f"{source}: header length {header_length} runs past end of file")
    try:
        header = json.loads(data[_PREFIX.size:body_start].decode("utf-8"))
        config = ModelConfig(**header["config"])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise CheckpointFormatError(f"{source}: unreadable header: {e}") from None

    expected_shapes = parameter_shapes(config)
    manifest = header.get("manifest", [])
    if [entry["name"] for entry in manifest] != list(expected_shapes):
        raise CheckpointFormatError(f"{source}: parameter manifest does not match the stored config")

    total = sum(int(np.prod(entry["shape"], dtype=np.int64)) for entry in manifest)
    if len(data) - body_start != total * 4:
        raise CheckpointFormatError(
            f"{source}: parameter payload has {len(data) - body_start} bytes, expected {total * 4}"
        )
    flat = np.frombuffer(data, dtype="<f4", count=total, offset=body_start)

    params = ModelParams()
    for entry in manifest:
        shape = tuple(entry["shape"])
        if shape != expected_shapes[entry["name"]]:
            raise CheckpointFormatError(f"{source}: {entry['name']} has shape {shape}, config implies {expected_shapes[entry['name']]}")
        size = int(np.prod(shape, dtype=np.int64))
        values = flat[entry["offset"]:entry["offset"] + size].reshape(shape).astype(config.np_dtype)
        params.tensors[entry["name"]] = Tensor(values, requires_grad=True, name=entry["name"])

    stored_bn = header.get("batch_norm", {})
    for name, width in batch_norm_names(config).items():
        if name not in stored_bn:
            raise CheckpointFormatError(f"{source}: missing batch-norm statistics for {name}")
        state = stored_bn[name]
        params.bn_states[name] = BatchNormState(
            running_mean=np.asarray(state["running_mean"], dtype=config.np_dtype).reshape(width),
            running_var=np.asarray(state["running_var"], dtype=config.np_dtype).reshape(width),
            updates=int(state["updates"]),
        )
    return params, config, header.get("meta", {})


def load_checkpoint(path: str | Path) -> tuple[ModelParams, ModelConfig, dict[str, Any]]:
    """Load params, config and metadata from an ATAL file."""
    path = Path(path)
    return decode_checkpoint(path.read_bytes(), source=str(path))
