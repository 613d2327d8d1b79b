"""Checkpoint persistence.

Binary layout, little-endian throughout::

    magic  "ASTC"
    u32    version (1)
    u32    tensor count
    per tensor:
        u16  name length, then UTF-8 name
        u8   dtype (0 = float32, 1 = UTF-8 JSON metadata blob)
        u8   ndim
        u32  dims[ndim]
        raw  data
    u32    CRC32 of everything between the version field and here

Model weights are float32 entries. The config snapshot and training
metadata ride along as JSON blobs under the reserved names ``__config__``
and ``__meta__`` (dtype 1, stored with ndim 1 = byte length).
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .errors import CheckpointError, ConfigError
from .model import AstClassifier, ModelConfig

MAGIC = b"ASTC"
VERSION = 1
DTYPE_F32 = 0
DTYPE_JSON = 1

CONFIG_KEY = "__config__"
META_KEY = "__meta__"
_RESERVED = (CONFIG_KEY, META_KEY)


@dataclass
class Checkpoint:
    """Named weight arrays plus the config and training metadata."""

    weights: dict
    config: ModelConfig
    metadata: dict = field(default_factory=dict)

    def build_model(self) -> AstClassifier:
        model = AstClassifier.init_scratch(self.config, seed=0)
        model.load_weights(self.weights)
        return model


def pack_tensor_entry(name: str, arr: np.ndarray) -> bytes:
    """One float32 tensor entry in the checkpoint wire format."""
    raw_name = name.encode("utf-8")
    arr = np.ascontiguousarray(arr, dtype="<f4")
    head = struct.pack("<H", len(raw_name)) + raw_name
    head += struct.pack("<BB", DTYPE_F32, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b""
    return head + arr.tobytes()


def _pack_json_entry(name: str, obj) -> bytes:
    raw_name = name.encode("utf-8")
    payload = json.dumps(obj).encode("utf-8")
    head = struct.pack("<H", len(raw_name)) + raw_name
    head += struct.pack("<BB", DTYPE_JSON, 1)
    head += struct.pack("<I", len(payload))
    return head + payload


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.off = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.data):
            raise CheckpointError(f"{self.path}: truncated (needed {n} bytes at offset {self.off})")
        out = self.data[self.off : self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def unpack_tensor_entry(reader: _Reader) -> tuple:
    """Read one entry; returns (name, value) where value is an ndarray for
    dtype 0 or a decoded JSON object for dtype 1."""
    (name_len,) = reader.unpack("<H")
    name = reader.take(name_len).decode("utf-8")
    dtype, ndim = reader.unpack("<BB")
    dims = reader.unpack(f"<{ndim}I") if ndim else ()
    if dtype == DTYPE_F32:
        count = 1
        for d in dims:
            count *= d
        raw = reader.take(4 * count)
        return name, np.frombuffer(raw, dtype="<f4").reshape(dims).copy()
    if dtype == DTYPE_JSON:
        if ndim != 1:
            raise CheckpointError(f"{reader.path}: metadata entry {name!r} must be 1-D")
        raw = reader.take(dims[0])
        try:
            return name, json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointError(f"{reader.path}: bad metadata entry {name!r}: {e}") from None
    raise CheckpointError(f"{reader.path}: unknown dtype code {dtype} for entry {name!r}")


def save_checkpoint(path: Union[str, Path], ckpt: Checkpoint) -> None:
    entries = [_pack_json_entry(CONFIG_KEY, ckpt.config.to_dict()), _pack_json_entry(META_KEY, ckpt.metadata)]
    for name in sorted(ckpt.weights):
        if name in _RESERVED:
            raise ConfigError(f"weight name {name!r} is reserved")
        entries.append(pack_tensor_entry(name, ckpt.weights[name]))
    payload = struct.pack("<I", len(entries)) + b"".join(entries)
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(payload)
        f.write(struct.pack("<I", crc))


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    """Parse and CRC-validate a checkpoint file."""
    try:
        blob = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read {path}: {e}") from e
    if len(blob) < 16:
        raise CheckpointError(f"{path}: too short to be a checkpoint")
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:4]!r}, expected {MAGIC!r}")
    (version,) = struct.unpack("<I", blob[4:8])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}, expected {VERSION}")
    payload, footer = blob[8:-4], blob[-4:]
    (stored_crc,) = struct.unpack("<I", footer)
    actual_crc = zlib.crc32(payload) & 0xFFFFFFFF
    if stored_crc != actual_crc:
        raise CheckpointError(f"{path}: CRC mismatch (stored {stored_crc:#010x}, computed {actual_crc:#010x})")

    reader = _Reader(payload, path)
    (count,) = reader.unpack("<I")
    weights: dict = {}
    config_dict = None
    metadata: dict = {}
    for _ in range(count):
        name, value = unpack_tensor_entry(reader)
        if name == CONFIG_KEY:
            config_dict = value
        elif name == META_KEY:
            metadata = value
        elif name in weights:
            raise CheckpointError(f"{path}: duplicate tensor {name!r}")
        else:
            weights[name] = value
    if reader.off != len(payload):
        raise CheckpointError(f"{path}: {len(payload) - reader.off} trailing bytes after last tensor")
    if config_dict is None:
        raise CheckpointError(f"{path}: missing {CONFIG_KEY} entry")
    try:
        config = ModelConfig.from_dict(config_dict)
    except (TypeError, ConfigError) as e:
        raise CheckpointError(f"{path}: invalid embedded config: {e}") from None
    return Checkpoint(weights=weights, config=config, metadata=metadata)


def write_raw_tensor(path: Union[str, Path], name: str, arr: np.ndarray) -> None:
    """Write one bare tensor entry (the same wire format checkpoints use
    per tensor, without the container header)."""
    Path(path).write_bytes(pack_tensor_entry(name, arr))


def read_raw_tensor(path: Union[str, Path]) -> tuple:
    """Read one bare tensor entry; returns (name, array)."""
    try:
        blob = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read {path}: {e}") from e
    reader = _Reader(blob, path)
    name, value = unpack_tensor_entry(reader)
    if not isinstance(value, np.ndarray):
        raise CheckpointError(f"{path}: expected a float32 tensor entry")
    if reader.off != len(blob):
        raise CheckpointError(f"{path}: trailing bytes after tensor entry")
    return name, value


def load_weights_into(
    model: AstClassifier,
    ckpt: Checkpoint,
    strict: bool = True,
) -> None:
    """Copy checkpoint weights into ``model``.

    Strict mode demands an exact name-set match in both directions. With
    ``strict=False`` the checkpoint may carry only a subset of the model's
    parameters (head-only fine-tuning of imported encoders); shapes must
    match either way.
    """
    expected = {name: p.shape for name, p in model.params.items()}
    extra = sorted(set(ckpt.weights) - set(expected))
    if extra:
        raise ConfigError(f"checkpoint has unknown tensors: {', '.join(extra)}")
    if strict:
        missing = sorted(set(expected) - set(ckpt.weights))
        if missing:
            raise ConfigError(f"checkpoint is missing tensors: {', '.join(missing)}")
    for name, arr in ckpt.weights.items():
        if tuple(arr.shape) != expected[name]:
            raise ConfigError(f"tensor {name}: checkpoint shape {tuple(arr.shape)}, model expects {expected[name]}")
    model.load_weights(ckpt.weights)
