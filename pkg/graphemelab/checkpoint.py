"""
GEL1 checkpoint container.

Layout (all integers little-endian u32):

    "GEL1" | version | tensor count
    per tensor: name length | UTF-8 name | rank | dims... | float64 LE data

Tensors are written in sorted name order, so equal models give equal bytes.
"""

import logging
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from graphemelab.errors import BadMagic, IoFailure, TruncatedFile, UnsupportedVersion

MAGIC = b"GEL1"
VERSION = 1
_U32 = struct.Struct("<I")


def encode_checkpoint(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, _U32.pack(VERSION), _U32.pack(len(tensors))]
    for name in sorted(tensors):
        value = np.asarray(tensors[name], dtype=np.float64)
        raw_name = name.encode("utf-8")
        parts.append(_U32.pack(len(raw_name)))
        parts.append(raw_name)
        parts.append(_U32.pack(value.ndim))
        parts.extend(_U32.pack(d) for d in value.shape)
        parts.append(value.astype("<f8").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, payload: bytes):
        self.payload = payload
        self.offset = 0

    def take(self, size: int, tensor_name: str) -> bytes:
        if self.offset + size > len(self.payload):
            raise TruncatedFile(tensor_name)
        chunk = self.payload[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def u32(self, tensor_name: str) -> int:
        return _U32.unpack(self.take(4, tensor_name))[0]


def decode_checkpoint(payload: bytes) -> dict[str, np.ndarray]:
    if payload[:4] != MAGIC:
        raise BadMagic(f"expected {MAGIC!r}, found {payload[:4]!r}")
    reader = _Reader(payload)
    reader.offset = 4
    version = reader.u32("<header>")
    if version != VERSION:
        raise UnsupportedVersion(version)
    count = reader.u32("<header>")
    tensors: dict[str, np.ndarray] = {}
    previous = "<header>"
    for index in range(count):
        name_length = reader.u32(f"<tensor {index} after {previous}>")
        name = reader.take(name_length, f"<tensor {index} after {previous}>").decode("utf-8")
        rank = reader.u32(name)
        shape = tuple(reader.u32(name) for _ in range(rank))
        size = int(np.prod(shape, dtype=np.int64)) if shape else 1
        data = np.frombuffer(reader.take(8 * size, name), dtype="<f8").astype(np.float64)
        tensors[name] = data.reshape(shape)
        previous = name
    return tensors


def save_checkpoint(tensors: Mapping[str, np.ndarray], path: Path) -> None:
    payload = encode_checkpoint(tensors)
    temp = path.with_name(path.name + ".tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        temp.write_bytes(payload)
        temp.replace(path)
    except OSError as exc:
        raise IoFailure(f"cannot write checkpoint {path}: {exc}") from exc
    logging.info(f"[graphemelab] Saved {len(tensors)} tensors to {path}")


def load_checkpoint(path: Path) -> dict[str, np.ndarray]:
    try:
        payload = path.read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read checkpoint {path}: {exc}") from exc
    return decode_checkpoint(payload)


def checkpoint_io(path: Path, tensors: Mapping[str, np.ndarray] | None = None) -> dict[str, np.ndarray] | None:
    """Save when tensors are given, otherwise load."""
    if tensors is not None:
        save_checkpoint(tensors, path)
        return None
    return load_checkpoint(path)
