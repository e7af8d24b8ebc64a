"""Binary model checkpoints.

Layout (all integers little-endian u32):
    magic b"TAFNETCK", format version,
    config text length + UTF-8 canonical TafnetConfig text,
    parameter count, then per parameter:
        name length + UTF-8 name, ndim, dims..., float64 '<f8' values
"""
import logging
import math
import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np

from utils.config import model_config_from_text, model_config_to_text
from utils.errors import ValidationError
from utils.tafnet import build_tafnet
from utils.tensor_core import ModelParams

logger = logging.getLogger(__name__)

MAGIC = b"TAFNETCK"
FORMAT_VERSION = 1


class CheckpointError(ValidationError):
    def __init__(self, path, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


def _write_u32(stream: BinaryIO, value: int):
    stream.write(struct.pack("<I", value))


def _write_bytes(stream: BinaryIO, payload: bytes):
    _write_u32(stream, len(payload))
    stream.write(payload)


def save_checkpoint(model: ModelParams, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as stream:
        stream.write(MAGIC)
        _write_u32(stream, FORMAT_VERSION)
        _write_bytes(stream, model_config_to_text(model.config).encode("utf-8"))
        _write_u32(stream, len(model))
        for param in model:
            _write_bytes(stream, param.name.encode("utf-8"))
            _write_u32(stream, param.data.ndim)
            for dim in param.shape:
                _write_u32(stream, dim)
            stream.write(np.ascontiguousarray(param.data, dtype="<f8").tobytes())
    logger.info("Saved checkpoint %s (%d tensors)", path, len(model))
    return path


class _Reader:
    def __init__(self, payload: bytes, path: Path):
        self.payload = payload
        self.offset = 0
        self.path = path

    def take(self, size: int) -> bytes:
        if self.offset + size > len(self.payload):
            raise CheckpointError(self.path, "file is truncated")
        chunk = self.payload[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def text(self) -> str:
        try:
            return self.take(self.u32()).decode("utf-8")
        except UnicodeDecodeError as e:
            raise CheckpointError(self.path, f"invalid text field ({e})") from e

    def array(self, shape) -> np.ndarray:
        size = 8 * math.prod(shape)
        if size > len(self.payload) - self.offset:
            raise CheckpointError(self.path, f"file is truncated (a {shape} tensor needs {size} bytes)")
        return np.frombuffer(self.take(size), dtype="<f8").reshape(shape).astype(np.float64)


def load_checkpoint(path) -> ModelParams:
    """Rebuild a model from a checkpoint; values are restored bit-exactly"""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(path, "checkpoint not found")
    reader = _Reader(path.read_bytes(), path)
    if reader.take(len(MAGIC)) != MAGIC:
        raise CheckpointError(path, "not a checkpoint file")
    version = reader.u32()
    if version != FORMAT_VERSION:
        raise CheckpointError(path, f"unsupported format version {version}")

    config = model_config_from_text(reader.text())
    state = {}
    for _ in range(reader.u32()):
        name = reader.text()
        shape = tuple(reader.u32() for _ in range(reader.u32()))
        state[name] = reader.array(shape)
    if reader.offset != len(reader.payload):
        raise CheckpointError(path, "trailing bytes after the last parameter")

    model = build_tafnet(config)
    try:
        model.load_state(state)
    except (KeyError, ValidationError) as e:
        raise CheckpointError(path, str(e)) from e
    logger.info("Loaded checkpoint %s (%s, %d tensors)", path, config.variant.value, len(model))
    return model
