"""Binary named-tensor checkpoints.

Layout (little-endian): magic ``QREC``, u32 format version, u32 tensor
count, then per tensor a u16 name length, the UTF-8 name, a u8 rank, rank
u64 dims and the data as f32; a trailing CRC32 covers everything before it.

The run configuration and training step travel as two reserved tensors:
``__config__`` holds the UTF-8 bytes of the config text (one byte per f32)
and ``__step__`` holds the step as two 16-bit halves.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .autograd import ShapeError

MAGIC = b"QREC"
FORMAT_VERSION = 1
CONFIG_KEY = "__config__"
STEP_KEY = "__step__"


class CheckpointError(ValueError):
    """Unreadable checkpoint file."""


class CheckpointVersionError(CheckpointError):
    """Wrong magic bytes or unsupported format version."""


class CheckpointCorruptError(CheckpointError):
    """Truncated file or CRC mismatch."""


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    config_text: str = ""
    step: int = 0
    version: int = FORMAT_VERSION

    def subset(self, prefix: str) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.tensors.items() if k.startswith(prefix)}


def _encode_tensor(name: str, value: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise ValueError(f"tensor name too long: {name[:40]}...")
    value = np.asarray(value)
    if value.ndim > 0xFF:
        raise ValueError(f"tensor {name!r} has too many dimensions")
    data = value.astype("<f4")
    if not np.array_equal(data.astype(value.dtype), value, equal_nan=True):
        raise ValueError(f"tensor {name!r} is not exactly representable as float32")
    parts = [struct.pack("<H", len(raw)), raw, struct.pack("<B", value.ndim)]
    parts.append(struct.pack(f"<{value.ndim}Q", *value.shape))
    parts.append(np.ascontiguousarray(data).tobytes())
    return b"".join(parts)


def save_checkpoint(path, tensors: dict[str, np.ndarray], config_text: str = "", step: int = 0) -> None:
    """Write ``tensors`` plus the config snapshot and step to ``path``."""
    for reserved in (CONFIG_KEY, STEP_KEY):
        if reserved in tensors:
            raise ValueError(f"{reserved!r} is a reserved tensor name")
    if not 0 <= step < 2**32:
        raise ValueError("step out of range")
    items = dict(tensors)
    items[CONFIG_KEY] = np.frombuffer(config_text.encode("utf-8"), dtype=np.uint8).astype(np.float32)
    items[STEP_KEY] = np.array([step & 0xFFFF, step >> 16], dtype=np.float32)
    payload = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(items))]
    payload += [_encode_tensor(name, value) for name, value in items.items()]
    body = b"".join(payload)
    with open(path, "wb") as fh:
        fh.write(body)
        fh.write(struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointCorruptError("checkpoint is truncated")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> Checkpoint:
    """Read a checkpoint; nothing is returned unless the whole file checks out."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise CheckpointVersionError(f"{path}: not a checkpoint (bad magic bytes)")
    if len(buf) < 16:
        raise CheckpointCorruptError(f"{path}: checkpoint is truncated")
    (version,) = struct.unpack("<I", buf[4:8])
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CheckpointCorruptError(f"{path}: CRC mismatch (truncated or corrupted)")
    reader = _Reader(body)
    reader.take(8)
    (count,) = reader.unpack("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len).decode("utf-8")
        (rank,) = reader.unpack("<B")
        shape = reader.unpack(f"<{rank}Q")
        size = int(np.prod(shape, dtype=np.int64))
        data = np.frombuffer(reader.take(4 * size), dtype="<f4").astype(np.float32)
        if name in tensors:
            raise CheckpointCorruptError(f"{path}: duplicate tensor {name!r}")
        tensors[name] = data.reshape(shape)
    if reader.pos != len(body):
        raise CheckpointCorruptError(f"{path}: trailing bytes after the last tensor")
    config = tensors.pop(CONFIG_KEY, np.zeros(0, np.float32))
    step = tensors.pop(STEP_KEY, np.zeros(2, np.float32))
    return Checkpoint(
        tensors=tensors,
        config_text=config.astype(np.uint8).tobytes().decode("utf-8"),
        step=int(step[0]) | (int(step[1]) << 16),
        version=version,
    )


def check_shapes(expected: dict[str, tuple], tensors: dict[str, np.ndarray]) -> None:
    """Raise naming the first tensor whose stored shape differs from ``expected``."""
    for name, shape in expected.items():
        if name not in tensors:
            raise KeyError(f"checkpoint is missing tensor {name!r}")
        if tuple(tensors[name].shape) != tuple(shape):
            raise ShapeError(f"tensor {name!r}: checkpoint shape {tensors[name].shape} != expected {tuple(shape)}")
