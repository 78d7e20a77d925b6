"""
Versioned binary container used for checkpoints and binary dataset files.

Layout (all integers little-endian)::

    magic        8 bytes
    version      u32
    n_meta       u32
    n_meta x     (u32 key length, utf-8 key, u32 value length, utf-8 value)
    n_tensors    u32
    n_tensors x  (u32 name length, utf-8 name, u32 rank, rank x u64 dims,
                  prod(dims) x float64)

Metadata keys and tensor names are written in sorted order, so writing the
same content twice yields identical bytes.
"""

import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Mapping, Tuple, Union

import numpy as np

from .errors import CheckpointError

logger = logging.getLogger(__name__)

CONTAINER_VERSION = 1


@dataclass
class Container:
    magic: bytes
    version: int
    metadata: Dict[str, str]
    tensors: Dict[str, np.ndarray]


def _pack_str(text: str) -> bytes:
    raw = text.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def encode_container(
    magic: bytes, metadata: Mapping[str, str], tensors: Mapping[str, np.ndarray]
) -> bytes:
    if len(magic) != 8:
        raise ValueError(f"magic must be 8 bytes, got {magic!r}")
    chunks = [magic, struct.pack("<I", CONTAINER_VERSION), struct.pack("<I", len(metadata))]
    for key in sorted(metadata):
        chunks.append(_pack_str(key))
        chunks.append(_pack_str(metadata[key]))
    chunks.append(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        array = np.ascontiguousarray(tensors[name], dtype="<f8")
        chunks.append(_pack_str(name))
        chunks.append(struct.pack("<I", array.ndim))
        chunks.append(struct.pack(f"<{array.ndim}Q", *array.shape))
        chunks.append(array.tobytes(order="C"))
    return b"".join(chunks)


class _Reader:
    def __init__(self, blob: bytes, source: str):
        self.blob = blob
        self.pos = 0
        self.source = source

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError(f"{self.source}: truncated container at byte {self.pos}")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def text(self) -> str:
        return self.take(self.u32()).decode("utf-8")


def decode_container(blob: bytes, magic: bytes, source: str = "<bytes>") -> Container:
    reader = _Reader(blob, source)
    found = reader.take(8)
    if found != magic:
        raise CheckpointError(f"{source}: bad magic {found!r}, expected {magic!r}")
    version = reader.u32()
    if version > CONTAINER_VERSION:
        raise CheckpointError(
            f"{source}: container version {version} is newer than supported ({CONTAINER_VERSION})"
        )
    metadata = {}
    for _ in range(reader.u32()):
        key = reader.text()
        metadata[key] = reader.text()
    tensors = {}
    for _ in range(reader.u32()):
        name = reader.text()
        rank = reader.u32()
        dims: Tuple[int, ...] = struct.unpack(f"<{rank}Q", reader.take(8 * rank))
        count = int(np.prod(dims)) if rank else 1
        array = np.frombuffer(reader.take(8 * count), dtype="<f8").astype(np.float64)
        tensors[name] = array.reshape(dims)
    if reader.pos != len(blob):
        raise CheckpointError(f"{source}: {len(blob) - reader.pos} trailing bytes")
    return Container(magic=magic, version=version, metadata=metadata, tensors=tensors)


def write_container(
    path: Union[str, Path],
    magic: bytes,
    metadata: Mapping[str, str],
    tensors: Mapping[str, np.ndarray],
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = encode_container(magic, metadata, tensors)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    tmp.replace(path)
    logger.debug(f"Wrote {len(blob)} bytes to {path}")
    return path


def read_container(path: Union[str, Path], magic: bytes) -> Container:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Container file not found: {path}")
    return decode_container(path.read_bytes(), magic, source=str(path))
