"""Self-describing binary checkpoints.

Byte layout (all integers little-endian)::

    offset  size  content
    0       8     magic b"SPLCKPT\\0"
    8       4     uint32 format version
    12      8     uint64 header length H
    20      H     UTF-8 JSON header (sorted keys)
    20+H    ...   tensor payloads, in header order, row-major float64 little-endian

The header carries the denoiser and diffusion configs, the catalog hash, free
form training metadata and the ordered list of ``{"name", "shape"}`` tensor
entries. Nothing outside the file is needed to rebuild the model.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .denoiser import Denoiser, DenoiserConfig, build_denoiser
from .diffusion import DiffusionConfig
from .formats import FormatError, atomic_write

MAGIC = b"SPLCKPT\0"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


@dataclass
class Checkpoint:
    denoiser: DenoiserConfig
    diffusion: DiffusionConfig
    catalog_hash: str
    tensors: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: Denoiser, diffusion: DiffusionConfig, catalog_hash: str, meta=None) -> "Checkpoint":
        tensors = {k: v.detach().cpu().double().numpy().copy() for k, v in model.state_dict().items()}
        return cls(model.config, diffusion, catalog_hash, tensors, dict(meta or {}))

    def build_model(self) -> Denoiser:
        model = build_denoiser(self.denoiser, self.diffusion.schedule.sigmas)
        state = {k: torch.from_numpy(v.copy()) for k, v in self.tensors.items()}
        dt = self.denoiser.torch_dtype
        model.load_state_dict({k: v.to(dt) for k, v in state.items()})
        model.eval()
        return model

    @property
    def holdout_shape(self) -> str | None:
        return self.meta.get("holdout_shape")

    def to_bytes(self) -> bytes:
        header = {
            "denoiser": self.denoiser.to_dict(),
            "diffusion": self.diffusion.to_dict(),
            "catalog_hash": self.catalog_hash,
            "meta": self.meta,
            "tensors": [{"name": k, "shape": list(v.shape)} for k, v in self.tensors.items()],
        }
        hb = json.dumps(header, sort_keys=True).encode()
        parts = [_PREFIX.pack(MAGIC, VERSION, len(hb)), hb]
        parts += [np.ascontiguousarray(v, dtype="<f8").tobytes() for v in self.tensors.values()]
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, buf: bytes, where: str = "<checkpoint>") -> "Checkpoint":
        if len(buf) < _PREFIX.size:
            raise FormatError(f"{where}: truncated checkpoint")
        magic, version, hlen = _PREFIX.unpack_from(buf, 0)
        if magic != MAGIC:
            raise FormatError(f"{where}: not a checkpoint file")
        if version != VERSION:
            raise FormatError(f"{where}: unsupported checkpoint version {version}")
        off = _PREFIX.size
        if off + hlen > len(buf):
            raise FormatError(f"{where}: truncated header")
        try:
            header = json.loads(buf[off : off + hlen].decode())
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise FormatError(f"{where}: bad header: {e}") from None
        off += hlen
        tensors = {}
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            n = int(np.prod(shape, dtype=np.int64))
            if off + 8 * n > len(buf):
                raise FormatError(f"{where}: truncated tensor {entry['name']}")
            tensors[entry["name"]] = np.frombuffer(buf, dtype="<f8", count=n, offset=off).reshape(shape).copy()
            off += 8 * n
        if off != len(buf):
            raise FormatError(f"{where}: {len(buf) - off} trailing bytes")
        return cls(
            DenoiserConfig.from_dict(header["denoiser"]),
            DiffusionConfig.from_dict(header["diffusion"]),
            header["catalog_hash"],
            tensors,
            header.get("meta", {}),
        )

    def save(self, path) -> None:
        atomic_write(path, self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        path = Path(path)
        return cls.from_bytes(path.read_bytes(), str(path))
