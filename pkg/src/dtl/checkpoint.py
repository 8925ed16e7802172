"""Binary parameter snapshots.

Layout (little-endian)::

    b"DTLCKPT1"
    u32 count
    repeat count times:
        u32 path length, path bytes (UTF-8)
        u32 rank, rank × u64 dims
        prod(dims) × f64 values
"""
from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from .diffnum import Tensor

MAGIC = b"DTLCKPT1"
_PREFIX = b"DTLCKPT"


class CheckpointError(ValueError):
    pass


class VersionMismatch(CheckpointError):
    pass


class TruncatedCheckpoint(CheckpointError):
    pass


class ShapeMismatch(CheckpointError):
    pass


def encode(params: dict[str, Tensor]) -> bytes:
    parts = [MAGIC, struct.pack("<I", len(params))]
    for path, tensor in params.items():
        name = path.encode("utf-8")
        data = np.ascontiguousarray(tensor.data, dtype="<f8")
        parts.append(struct.pack("<I", len(name)))
        parts.append(name)
        parts.append(struct.pack("<I", data.ndim))
        parts.append(struct.pack(f"<{data.ndim}Q", *data.shape))
        parts.append(data.tobytes())
    return b"".join(parts)


def decode(blob: bytes, requires_grad: bool = True) -> dict[str, Tensor]:
    if blob[: len(_PREFIX)] != _PREFIX:
        raise CheckpointError("not a checkpoint file (bad magic)")
    if len(blob) < len(MAGIC):
        raise TruncatedCheckpoint("file ends inside the magic header")
    if blob[: len(MAGIC)] != MAGIC:
        raise VersionMismatch(f"unsupported checkpoint version {blob[:len(MAGIC)]!r}, expected {MAGIC!r}")
    pos = len(MAGIC)

    def read(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise TruncatedCheckpoint(f"checkpoint truncated at byte {len(blob)} (needed {pos + n})")
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", read(4))
    params: dict[str, Tensor] = {}
    for _ in range(count):
        (n_name,) = struct.unpack("<I", read(4))
        try:
            path = read(n_name).decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError("parameter path is not valid UTF-8") from None
        (rank,) = struct.unpack("<I", read(4))
        shape = struct.unpack(f"<{rank}Q", read(8 * rank))
        size = int(np.prod(shape, dtype=np.int64)) if rank else 1
        values = np.frombuffer(read(8 * size), dtype="<f8").astype(np.float64).reshape(shape)
        if path in params:
            raise CheckpointError(f"duplicate parameter path {path!r}")
        params[path] = Tensor(values, requires_grad=requires_grad)
    if pos != len(blob):
        raise CheckpointError(f"{len(blob) - pos} trailing bytes after the last parameter")
    return params


def validate(params: dict[str, Tensor], manifest: list[tuple[str, tuple]], allow_extra: bool = False) -> None:
    """Check `params` against (path, shape) pairs; extra paths fail unless allowed."""
    for path, shape in manifest:
        if path not in params:
            raise ShapeMismatch(f"parameter {path} missing from checkpoint")
        if tuple(params[path].shape) != tuple(shape):
            raise ShapeMismatch(f"parameter {path} has shape {tuple(params[path].shape)}, expected {tuple(shape)}")
    if not allow_extra:
        extra = set(params) - {p for p, _ in manifest}
        if extra:
            raise ShapeMismatch(f"unexpected parameters in checkpoint: {sorted(extra)}")


def save_checkpoint(params: dict[str, Tensor], path: str | os.PathLike) -> None:
    Path(path).write_bytes(encode(params))


def load_checkpoint(
    path: str | os.PathLike,
    manifest: list[tuple[str, tuple]] | None = None,
    requires_grad: bool = True,
    allow_extra: bool = False,
) -> dict[str, Tensor]:
    params = decode(Path(path).read_bytes(), requires_grad=requires_grad)
    if manifest is not None:
        validate(params, manifest, allow_extra=allow_extra)
    return params
