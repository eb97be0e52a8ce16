"""
Storyspace - Checkpoint Files

Binary layout (little-endian):
    magic "INCK" | u32 version
    u32 length | config JSON (network config + precision)
    u32 count  | parameter records
    u32 count  | Adam first-moment records
    u32 count  | Adam second-moment records
    u32 length | state JSON (epoch, Adam step and constants, rng state, history)
    u32 CRC32 of everything above

Tensor record: u16 name length | name | u8 rank | u32 dims... | raw values
"""

import io
import json
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Union

import numpy as np

from storyspace_inputs import INetConfig
from storyspace_tensor import PRECISIONS


CHECKPOINT_MAGIC = b"INCK"
CHECKPOINT_VERSION = 1

_U8 = struct.Struct("<B")
_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")


class CheckpointError(ValueError):
    """Raised for corrupted, truncated or incompatible checkpoint files."""


@dataclass
class CheckpointRecord:
    config: INetConfig
    precision: str
    params: Dict[str, np.ndarray]
    adam_m: Dict[str, np.ndarray]
    adam_v: Dict[str, np.ndarray]
    adam_t: int
    adam_beta1: float
    adam_beta2: float
    adam_eps: float
    epoch: int                      # epochs completed
    rng_state: Dict[str, Any]
    history: List[Dict[str, Any]] = field(default_factory=list)


# ============================================================================
# WRITING
# ============================================================================

def _blob(buffer: io.BytesIO, payload: bytes) -> None:
    buffer.write(_U32.pack(len(payload)))
    buffer.write(payload)


def _tensor_records(buffer: io.BytesIO, arrays: Dict[str, np.ndarray], dtype: np.dtype) -> None:
    buffer.write(_U32.pack(len(arrays)))
    for name, values in arrays.items():
        encoded = name.encode("utf-8")
        buffer.write(_U16.pack(len(encoded)))
        buffer.write(encoded)
        buffer.write(_U8.pack(values.ndim))
        for extent in values.shape:
            buffer.write(_U32.pack(extent))
        buffer.write(np.ascontiguousarray(values, dtype=dtype.newbyteorder("<")).tobytes())


def checkpoint_bytes(record: CheckpointRecord) -> bytes:
    if record.precision not in PRECISIONS:
        raise CheckpointError(f"unknown precision {record.precision}")
    dtype = np.dtype(PRECISIONS[record.precision])
    config_blob = {"inet": record.config.model_dump(), "precision": record.precision}
    state_blob = {
        "epoch": record.epoch,
        "adam": {"t": record.adam_t, "beta1": record.adam_beta1,
                 "beta2": record.adam_beta2, "eps": record.adam_eps},
        "rng_state": record.rng_state,
        "history": record.history,
    }

    buffer = io.BytesIO()
    buffer.write(CHECKPOINT_MAGIC)
    buffer.write(_U32.pack(CHECKPOINT_VERSION))
    _blob(buffer, json.dumps(config_blob, sort_keys=True).encode("utf-8"))
    _tensor_records(buffer, record.params, dtype)
    _tensor_records(buffer, record.adam_m, dtype)
    _tensor_records(buffer, record.adam_v, dtype)
    _blob(buffer, json.dumps(state_blob, sort_keys=True).encode("utf-8"))
    body = buffer.getvalue()
    return body + _U32.pack(zlib.crc32(body))


def save_checkpoint(record: CheckpointRecord, path: Union[str, Path]) -> None:
    """Write through a temporary file so a crash never leaves a partial checkpoint."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    partial = path.with_name(path.name + ".partial")
    partial.write_bytes(checkpoint_bytes(record))
    os.replace(partial, path)


# ============================================================================
# READING
# ============================================================================

class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, size: int) -> bytes:
        if self.offset + size > len(self.data):
            raise CheckpointError("truncated checkpoint payload")
        chunk = self.data[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt: struct.Struct) -> int:
        return fmt.unpack(self.take(fmt.size))[0]

    def blob(self) -> bytes:
        return self.take(self.unpack(_U32))

    def json(self) -> Dict[str, Any]:
        try:
            return json.loads(self.blob().decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointError(f"unreadable metadata section ({e})") from e

    def tensors(self, dtype: np.dtype) -> Dict[str, np.ndarray]:
        arrays = {}
        for _ in range(self.unpack(_U32)):
            name = self.take(self.unpack(_U16)).decode("utf-8")
            rank = self.unpack(_U8)
            shape = tuple(self.unpack(_U32) for _ in range(rank))
            count = int(np.prod(shape)) if shape else 1
            raw = self.take(count * dtype.itemsize)
            arrays[name] = np.frombuffer(raw, dtype=dtype.newbyteorder("<")).astype(dtype).reshape(shape)
        return arrays


def parse_checkpoint(data: bytes) -> CheckpointRecord:
    minimum = len(CHECKPOINT_MAGIC) + 2 * _U32.size
    if len(data) < minimum:
        raise CheckpointError(f"truncated checkpoint ({len(data)} bytes)")
    if data[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad magic {data[:len(CHECKPOINT_MAGIC)]!r}")
    body, trailer = data[:-_U32.size], data[-_U32.size:]
    reader = _Reader(body)
    reader.take(len(CHECKPOINT_MAGIC))
    version = reader.unpack(_U32)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if zlib.crc32(body) != _U32.unpack(trailer)[0]:
        raise CheckpointError("checksum mismatch: checkpoint is corrupted or truncated")

    config_blob = reader.json()
    precision = config_blob.get("precision")
    if precision not in PRECISIONS:
        raise CheckpointError(f"unknown precision {precision!r}")
    dtype = np.dtype(PRECISIONS[precision])
    params = reader.tensors(dtype)
    adam_m = reader.tensors(dtype)
    adam_v = reader.tensors(dtype)
    state = reader.json()
    if reader.offset != len(body):
        raise CheckpointError(f"{len(body) - reader.offset} unexpected trailing bytes")

    try:
        return CheckpointRecord(
            config=INetConfig(**config_blob["inet"]),
            precision=precision,
            params=params,
            adam_m=adam_m,
            adam_v=adam_v,
            adam_t=int(state["adam"]["t"]),
            adam_beta1=float(state["adam"]["beta1"]),
            adam_beta2=float(state["adam"]["beta2"]),
            adam_eps=float(state["adam"]["eps"]),
            epoch=int(state["epoch"]),
            rng_state=state["rng_state"],
            history=list(state.get("history", [])),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"incomplete checkpoint metadata ({e})") from e


def load_checkpoint(path: Union[str, Path]) -> CheckpointRecord:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    return parse_checkpoint(path.read_bytes())
