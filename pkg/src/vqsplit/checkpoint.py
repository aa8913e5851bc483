"""Binary checkpoint format for the full model set.

Layout, all integers little-endian:

    magic   8 bytes  b"CAFCCKPT"
    version u32      currently 1
    count   u32      number of sections
    then per section:
        name    u32 length + utf-8 bytes
        tensors u32 count
        per tensor:
            name  u32 length + utf-8 bytes
            rank  u32
            dims  rank * u32
            data  prod(dims) float32 values
    trailer:
        config  u32 length + utf-8 key=value text
        seed    u64

Sections are written sorted by name so identical model sets produce
identical files. ``load ∘ save`` preserves every tensor bit for bit.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .config import RunConfig, parse_config_text
from .nn import Module

MAGIC = b"CAFCCKPT"
VERSION = 1

# canonical section names; a checkpoint may carry any subset
SECTION_NAMES = ("tokenizer", "token_encoder", "recon_decoder",
                 "projection", "selector", "task_head")

_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")
_MAX_RANK = 16
_MAX_NAME = 4096


class CheckpointError(RuntimeError):
    """Base class for checkpoint read/write failures."""


class CheckpointFormatError(CheckpointError):
    """Bad magic, unsupported version, or malformed structure."""


class CheckpointTruncationError(CheckpointError):
    """File ended before the declared content."""


class CheckpointShapeError(CheckpointError):
    """Stored tensor does not fit the model being loaded; names the tensor."""


@dataclass
class Checkpoint:
    version: int
    sections: dict[str, dict[str, np.ndarray]]
    config: RunConfig
    seed: int

    def section(self, name: str) -> dict[str, np.ndarray]:
        if name not in self.sections:
            raise CheckpointFormatError(
                f"checkpoint has no {name!r} section; found "
                f"{sorted(self.sections)}")
        return self.sections[name]


def _tensor_map(source: Module | Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    if isinstance(source, Module):
        return {name: p.data for name, p in source.params().items()}
    return dict(source)


def _write_str(parts: list[bytes], text: str) -> None:
    raw = text.encode("utf-8")
    parts.append(_U32.pack(len(raw)))
    parts.append(raw)


def save_checkpoint(path: str | Path,
                    sections: Mapping[str, Module | Mapping[str, np.ndarray]],
                    config: RunConfig, seed: int) -> None:
    parts: list[bytes] = [MAGIC, _U32.pack(VERSION), _U32.pack(len(sections))]
    for sec_name in sorted(sections):
        tensors = _tensor_map(sections[sec_name])
        _write_str(parts, sec_name)
        parts.append(_U32.pack(len(tensors)))
        for t_name in sorted(tensors):
            data = np.ascontiguousarray(tensors[t_name], dtype="<f4")
            _write_str(parts, t_name)
            parts.append(_U32.pack(data.ndim))
            for dim in data.shape:
                parts.append(_U32.pack(dim))
            parts.append(data.tobytes())
    _write_str(parts, config.to_text())
    parts.append(_U64.pack(seed))
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        end = self.pos + n
        if end > len(self.blob):
            raise CheckpointTruncationError(
                f"file ends at byte {len(self.blob)} but {end} were needed")
        out = self.blob[self.pos:end]
        self.pos = end
        return out

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]

    def u64(self) -> int:
        return _U64.unpack(self.take(8))[0]

    def text(self, limit: int) -> str:
        n = self.u32()
        if n > limit:
            raise CheckpointFormatError(f"string length {n} exceeds limit {limit}")
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointFormatError(f"undecodable string: {exc}") from exc


def load_checkpoint(path: str | Path) -> Checkpoint:
    reader = _Reader(Path(path).read_bytes())
    if reader.take(len(MAGIC)) != MAGIC:
        raise CheckpointFormatError(f"bad magic in {path}")
    version = reader.u32()
    if version != VERSION:
        raise CheckpointFormatError(
            f"unsupported checkpoint version {version}, expected {VERSION}")
    sections: dict[str, dict[str, np.ndarray]] = {}
    for _ in range(reader.u32()):
        sec_name = reader.text(_MAX_NAME)
        if sec_name in sections:
            raise CheckpointFormatError(f"duplicate section {sec_name!r}")
        tensors: dict[str, np.ndarray] = {}
        for _ in range(reader.u32()):
            t_name = reader.text(_MAX_NAME)
            rank = reader.u32()
            if rank > _MAX_RANK:
                raise CheckpointFormatError(
                    f"tensor {sec_name}.{t_name} declares rank {rank}")
            dims = tuple(reader.u32() for _ in range(rank))
            count = int(np.prod(dims, dtype=np.int64)) if dims else 1
            raw = reader.take(count * 4)
            tensors[t_name] = np.frombuffer(raw, dtype="<f4").reshape(dims).copy()
        sections[sec_name] = tensors
    config = parse_config_text(reader.text(1 << 20))
    seed = reader.u64()
    if reader.pos != len(reader.blob):
        raise CheckpointFormatError(
            f"{len(reader.blob) - reader.pos} trailing bytes after the seed")
    return Checkpoint(version=version, sections=sections, config=config, seed=seed)


def load_into(module: Module, tensors: Mapping[str, np.ndarray],
              section: str) -> None:
    """Copy stored arrays into a freshly built module, validating shapes."""
    params = module.params()
    missing = sorted(set(params) - set(tensors))
    if missing:
        raise CheckpointShapeError(
            f"section {section!r} lacks tensor {missing[0]!r}")
    extra = sorted(set(tensors) - set(params))
    if extra:
        raise CheckpointShapeError(
            f"section {section!r} has unexpected tensor {extra[0]!r}")
    for name, param in params.items():
        stored = tensors[name]
        if tuple(stored.shape) != tuple(param.data.shape):
            raise CheckpointShapeError(
                f"tensor {section}.{name}: checkpoint shape "
                f"{tuple(stored.shape)} does not match model shape "
                f"{tuple(param.data.shape)}")
        param.data = stored.astype(param.data.dtype, copy=True)
