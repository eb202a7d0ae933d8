"""Dataset files: one JSON header line followed by one scene per line.

See ``docs/formats.md`` for the field reference.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .scene import Scene, SceneObject
from .se3 import decode_pose, encode_pose
from .shapes import ShapeCatalog

DATASET_FORMAT = "stableplace-dataset"
DATASET_VERSION = 1


class FormatError(ValueError):
    pass


def atomic_write(path, data: bytes | str) -> None:
    """Write to a sibling temp file, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode()
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _num(x: float) -> float:
    # 17 significant digits round-trips every double exactly
    return float(f"{x:.17g}")


@dataclass
class SceneRecord:
    id: int
    seed: int
    scene: Scene
    # vectors as read from disk; reused on save so load -> save is byte-identical
    stored: list | None = field(default=None, repr=False, compare=False)

    @property
    def n_blocks(self) -> int:
        return len(self.scene)

    def _pose_vectors(self) -> list[list[float]]:
        if self.stored is not None and len(self.stored) == len(self.scene):
            if all(np.array_equal(decode_pose(v).matrix(), o.pose.matrix())
                   for v, o in zip(self.stored, self.scene.objects)):
                return self.stored
        return [[_num(v) for v in encode_pose(o.pose, warn=False)] for o in self.scene.objects]

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "seed": self.seed,
            "n_blocks": self.n_blocks,
            "query_index": self.scene.query_index,
            "objects": [{"shape": o.shape, "pose": v} for o, v in zip(self.scene.objects, self._pose_vectors())],
        }

    @classmethod
    def from_json(cls, d: dict) -> "SceneRecord":
        objs = tuple(SceneObject(o["shape"], decode_pose(o["pose"])) for o in d["objects"])
        if len(objs) != d["n_blocks"]:
            raise FormatError(f"record {d.get('id')}: n_blocks={d['n_blocks']} but {len(objs)} objects")
        stored = [[float(v) for v in o["pose"]] for o in d["objects"]]
        return cls(int(d["id"]), int(d["seed"]), Scene(objs, int(d["query_index"])), stored)


@dataclass
class Dataset:
    records: list[SceneRecord]
    catalog_hash: str
    mode: str
    n_blocks: int
    seed: int
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def scenes(self) -> list[Scene]:
        return [r.scene for r in self.records]

    def header(self) -> dict:
        return {
            "format": DATASET_FORMAT,
            "version": DATASET_VERSION,
            "catalog_hash": self.catalog_hash,
            "mode": self.mode,
            "n_blocks": self.n_blocks,
            "seed": self.seed,
            "count": len(self.records),
            **({"meta": self.meta} if self.meta else {}),
        }

    def to_text(self) -> str:
        lines = [json.dumps(self.header(), sort_keys=True)]
        lines += [json.dumps(r.to_json(), sort_keys=True) for r in self.records]
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        atomic_write(path, self.to_text())


def load_dataset(path, catalog: ShapeCatalog | None = None) -> Dataset:
    """Read a dataset file; with ``catalog`` given, refuse files built from another catalog."""
    path = Path(path)
    with path.open() as fh:
        lines = [ln for ln in fh if ln.strip()]
    if not lines:
        raise FormatError(f"{path}: empty dataset file")
    try:
        head = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}:1: bad header: {e}") from None
    if head.get("format") != DATASET_FORMAT:
        raise FormatError(f"{path}: not a dataset file")
    if head.get("version") != DATASET_VERSION:
        raise FormatError(f"{path}: unsupported dataset version {head.get('version')}")
    if catalog is not None and head["catalog_hash"] != catalog.hash:
        raise FormatError(f"{path}: catalog hash {head['catalog_hash']} does not match loaded catalog {catalog.hash}")
    records = []
    for lineno, ln in enumerate(lines[1:], start=2):
        try:
            rec = SceneRecord.from_json(json.loads(ln))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            raise FormatError(f"{path}:{lineno}: bad record: {e}") from None
        if catalog is not None:
            for o in rec.scene.objects:
                if o.shape not in catalog:
                    raise FormatError(f"{path}:{lineno}: unknown shape {o.shape!r}")
        records.append(rec)
    if head.get("count") is not None and head["count"] != len(records):
        raise FormatError(f"{path}: header announces {head['count']} records, found {len(records)}")
    return Dataset(records, head["catalog_hash"], head["mode"], int(head["n_blocks"]), int(head["seed"]),
                   head.get("meta", {}))

