"""Scoring generated placements by simulation, aggregate reports and the ablation table."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .checkpoint import Checkpoint
from .diffusion import SamplingFault, reverse_sample_batch
from .formats import Dataset, FormatError, SceneRecord, atomic_write
from .generation import random_baseline_pose, rng_for
from .physics import DisplacementReport, SimConfig, SimulationError, settle_and_score, stack_success
from .scene import Scene
from .se3 import Pose, encode_pose
from .shapes import ShapeCatalog, default_catalog

log = logging.getLogger(__name__)

REPORT_FORMAT = "stableplace-report"
REPORT_VERSION = 1
METHODS = ("model", "random")
MODES = ("placement", "stack1", "stack2")
_STACK_BLOCKS = {"stack1": 2, "stack2": 3}


@dataclass
class EvalRow:
    scene_id: int
    method: str
    query_shape: str
    split: str  # "id", "ood", or "-" when no model is involved
    trans_pct: float | None  # None when sampling or simulation faulted
    rot_deg: float | None
    success: bool
    pose: list[float] | None = None
    fault: str | None = None


# ---------------------------------------------------------------------------
# aggregation


def _score(v):
    # faulted instances count as infinitely displaced
    return np.inf if v is None else v


def aggregate(rows: list[EvalRow]) -> dict:
    if not rows:
        return {"n": 0, "median_trans_pct": None, "median_rot_deg": None, "success_pct": None, "faults": 0}
    tr = np.array([_score(r.trans_pct) for r in rows])
    ro = np.array([_score(r.rot_deg) for r in rows])

    def med(a):
        m = float(np.median(a))
        return m if np.isfinite(m) else None

    return {
        "n": len(rows),
        "median_trans_pct": med(tr),
        "median_rot_deg": med(ro),
        "success_pct": 100.0 * float(np.mean([r.success for r in rows])),
        "faults": sum(r.fault is not None for r in rows),
    }


def aggregates(rows: list[EvalRow]) -> dict:
    """Overall, per split, and per (query shape, split) aggregates."""
    out = {"all": aggregate(rows), "split": {}, "shape": {}}
    for split in sorted({r.split for r in rows}):
        out["split"][split] = aggregate([r for r in rows if r.split == split])
    for shape in sorted({r.query_shape for r in rows}):
        out["shape"][shape] = {
            split: aggregate([r for r in rows if r.query_shape == shape and r.split == split])
            for split in sorted({r.split for r in rows if r.query_shape == shape})
        }
    return out


@dataclass
class EvalReport:
    method: str
    mode: str
    catalog_hash: str
    rows: list[EvalRow]
    checkpoint: dict = field(default_factory=dict)
    testset: str = ""

    @property
    def aggregates(self) -> dict:
        return aggregates(self.rows)

    def to_json(self) -> dict:
        return {
            "format": REPORT_FORMAT,
            "version": REPORT_VERSION,
            "catalog_hash": self.catalog_hash,
            "method": self.method,
            "mode": self.mode,
            "testset": self.testset,
            "checkpoint": self.checkpoint,
            "rows": [asdict(r) for r in self.rows],
            "aggregates": self.aggregates,
        }

    @classmethod
    def from_json(cls, d: dict) -> "EvalReport":
        if d.get("format") != REPORT_FORMAT or d.get("version") != REPORT_VERSION:
            raise FormatError("not a supported evaluation report")
        return cls(d["method"], d["mode"], d["catalog_hash"], [EvalRow(**r) for r in d["rows"]],
                   d.get("checkpoint", {}), d.get("testset", ""))

    def save(self, path) -> None:
        atomic_write(path, json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n")
        atomic_write(str(path) + ".txt", self.table())

    @classmethod
    def load(cls, path) -> "EvalReport":
        with open(path) as fh:
            return cls.from_json(json.load(fh))

    def table(self) -> str:
        agg = self.aggregates

        def f(v, fmt="{:6.1f}"):
            return "     -" if v is None else fmt.format(v)

        lines = [f"method={self.method} mode={self.mode} n={agg['all']['n']}", ""]
        lines.append(f"{'shape':<16} {'split':<5} {'n':>5} {'trans%':>7} {'rot°':>7} {'succ%':>7}")
        for shape, by_split in agg["shape"].items():
            for split, a in by_split.items():
                lines.append(f"{shape:<16} {split:<5} {a['n']:>5} {f(a['median_trans_pct']):>7} "
                             f"{f(a['median_rot_deg']):>7} {f(a['success_pct']):>7}")
        for split, a in agg["split"].items():
            lines.append(f"{'(all)':<16} {split:<5} {a['n']:>5} {f(a['median_trans_pct']):>7} "
                         f"{f(a['median_rot_deg']):>7} {f(a['success_pct']):>7}")
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# instance scoring


def check_mode(records: list[SceneRecord], mode: str) -> None:
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    want = _STACK_BLOCKS.get(mode)
    for r in records:
        if want is not None and r.n_blocks != want:
            raise ValueError(f"mode {mode} needs {want}-block scenes; record {r.id} has {r.n_blocks}")


def score_placement(scene: Scene, pose: Pose, catalog: ShapeCatalog, sim: SimConfig):
    """Settle ``scene`` with the query at ``pose``; returns ``(trans_pct, rot_deg, fault)``."""
    trial = scene.with_query_pose(pose)
    try:
        _, rep = settle_and_score(trial, sim, catalog, strict=False)
    except SimulationError as e:
        return None, None, f"simulation: {e}"
    return rep.scene_max_trans_pct, rep.scene_max_rot_deg, None


def _split(scene: Scene, holdout: str | None) -> str:
    if holdout is None:
        return "id"
    return "ood" if holdout in scene.shapes else "id"


def sample_poses(ckpt: Checkpoint, scenes: list[Scene], streams: list[tuple[int, int]], n_pts: int,
                 catalog: ShapeCatalog, chunk: int = 100) -> list[Pose | str]:
    """Reverse-diffusion poses for each scene's query; a string marks a per-sample fault.

    ``streams[i] = (seed, index)`` names the random stream of scene ``i``.
    """
    model = ckpt.build_model()
    cfg = ckpt.diffusion
    out: list[Pose | str] = [None] * len(scenes)
    by_size: dict[int, list[int]] = {}
    for i, s in enumerate(scenes):
        by_size.setdefault(len(s), []).append(i)
    for idx in by_size.values():
        for s in range(0, len(idx), chunk):
            part = idx[s : s + chunk]
            try:
                poses = reverse_sample_batch(model, [scenes[i] for i in part], [rng_for(*streams[i]) for i in part],
                                             cfg, n_pts, catalog)
                for i, p in zip(part, poses):
                    out[i] = p
            except SamplingFault:
                # redo one by one so a single divergent chain does not sink its neighbours
                for i in part:
                    try:
                        out[i] = reverse_sample_batch(model, [scenes[i]], [rng_for(*streams[i])], cfg, n_pts, catalog)[0]
                    except SamplingFault as e:
                        out[i] = f"sampling: {e}"
    return out


def evaluate(
    records: list[SceneRecord],
    method: str,
    mode: str,
    ckpt: Checkpoint | None = None,
    seed: int = 0,
    catalog: ShapeCatalog | None = None,
    sim: SimConfig | None = None,
    n_pts: int | None = None,
) -> list[EvalRow]:
    """Generate a query pose for every record and score the settled scene.

    The stored query pose is never shown to the method: the model conditions
    only on the context and the query shape.
    """
    if method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}")
    check_mode(records, mode)
    catalog = catalog or default_catalog()
    sim = sim or SimConfig()
    if method == "model":
        if ckpt is None:
            raise ValueError("method 'model' needs a checkpoint")
        if ckpt.catalog_hash != catalog.hash:
            raise FormatError(f"checkpoint catalog {ckpt.catalog_hash} does not match loaded catalog {catalog.hash}")
        n_pts = n_pts or int(ckpt.meta.get("train", {}).get("n_pts", 64))
    scenes = [r.scene for r in records]
    streams = [(seed, r.id) for r in records]
    if method == "model":
        poses = sample_poses(ckpt, scenes, streams, n_pts, catalog)
        holdout = ckpt.holdout_shape
    else:
        base_mode = "placement" if mode == "placement" else "stack"
        poses = [random_baseline_pose(list(s.context), s.query.shape, base_mode, rng_for(*st), catalog)
                 for s, st in zip(scenes, streams)]
        holdout = None
    rows = []
    for rec, scene, pose in zip(records, scenes, poses):
        split = _split(scene, holdout) if method == "model" else "-"
        if isinstance(pose, str):
            rows.append(EvalRow(rec.id, method, scene.query.shape, split, None, None, False, None, pose))
            continue
        tr, ro, fault = score_placement(scene, pose, catalog, sim)
        ok = fault is None and stack_success(DisplacementReport([(tr, ro)]))
        rows.append(EvalRow(rec.id, method, scene.query.shape, split, tr, ro, ok,
                            [float(v) for v in encode_pose(pose, warn=False)], fault))
    return rows


def run_eval(dataset: Dataset, method: str, mode: str, ckpt: Checkpoint | None = None, seed: int = 0,
             catalog: ShapeCatalog | None = None, testset: str = "") -> EvalReport:
    catalog = catalog or default_catalog()
    if dataset.catalog_hash != catalog.hash:
        raise FormatError("test set was generated with a different catalog")
    rows = evaluate(dataset.records, method, mode, ckpt, seed, catalog)
    info = {}
    if ckpt is not None and method == "model":
        info = {"holdout_shape": ckpt.holdout_shape, "denoiser": ckpt.denoiser.to_dict(),
                "step": ckpt.meta.get("step")}
    return EvalReport(method, mode, catalog.hash, rows, info, testset)


# ---------------------------------------------------------------------------
# ablation


ABLATION_SLOTS = ("full", "nosdf", "nopose")
_SLOT_LABEL = {"full": "Full model", "nosdf": "w/o SDF", "nopose": "w/o pose"}


def _profile_key(ckpt: Checkpoint) -> dict:
    d = ckpt.denoiser.to_dict()
    d.pop("use_sdf")
    d.pop("use_pose")
    train = dict(ckpt.meta.get("train", {}))
    return {"denoiser": d, "train": train, "diffusion": ckpt.diffusion.to_dict()}


def check_ablation_set(ckpts: dict[str, Checkpoint]) -> None:
    keys = {slot: json.dumps(_profile_key(c), sort_keys=True) for slot, c in ckpts.items()}
    if len(set(keys.values())) != 1:
        raise ValueError("ablation checkpoints differ in profile, seed or schedule beyond the ablated input")


@dataclass
class AblationReport:
    reports: dict[str, EvalReport]

    def columns(self) -> dict[str, dict]:
        cols = {}
        for slot, rep in self.reports.items():
            agg = rep.aggregates
            cols[slot] = {split: agg["split"].get(split, aggregate([])) for split in ("id", "ood")}
            cols[slot]["all"] = agg["all"]
        return cols

    def to_json(self) -> dict:
        return {"format": REPORT_FORMAT + "-ablation", "version": REPORT_VERSION,
                "columns": self.columns(), "reports": {k: r.to_json() for k, r in self.reports.items()}}

    def table(self) -> str:
        cols = self.columns()

        def f(v):
            return "     -" if v is None else f"{v:6.1f}"

        lines = [f"{'':<12} {'Trans. Displ. (%)':>18} {'Rot. Displ. (deg)':>18} {'Success (%)':>18}",
                 f"{'':<12} {'ID':>8} {'OOD':>9} {'ID':>8} {'OOD':>9} {'ID':>8} {'OOD':>9}"]
        for slot in ABLATION_SLOTS:
            if slot not in cols:
                continue
            c = cols[slot]
            lines.append(
                f"{_SLOT_LABEL[slot]:<12} {f(c['id']['median_trans_pct']):>8} {f(c['ood']['median_trans_pct']):>9} "
                f"{f(c['id']['median_rot_deg']):>8} {f(c['ood']['median_rot_deg']):>9} "
                f"{f(c['id']['success_pct']):>8} {f(c['ood']['success_pct']):>9}"
            )
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        atomic_write(path, json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n")
        atomic_write(str(path) + ".txt", self.table())

    @classmethod
    def load(cls, path) -> "AblationReport":
        with open(path) as fh:
            d = json.load(fh)
        if d.get("format") != REPORT_FORMAT + "-ablation" or d.get("version") != REPORT_VERSION:
            raise FormatError("not a supported ablation report")
        return cls({k: EvalReport.from_json(r) for k, r in d["reports"].items()})


def run_ablation(ckpts: dict[str, Checkpoint], dataset: Dataset, mode: str = "placement", seed: int = 0,
                 catalog: ShapeCatalog | None = None) -> AblationReport:
    check_ablation_set(ckpts)
    reports = {slot: run_eval(dataset, "model", mode, ckpts[slot], seed, catalog) for slot in ABLATION_SLOTS}
    return AblationReport(reports)


# ---------------------------------------------------------------------------
# diversity


def resting_face_clusters(rotations, linkage_deg: float = 15.0) -> int:
    """Number of single-linkage clusters of the body-frame down direction.

    Two settled orientations that rest on the same face differ only by a yaw
    about the vertical, which leaves the body-frame gravity direction fixed,
    so this counts distinct resting faces.
    """
    down = np.array([np.asarray(R).T @ np.array([0.0, 0.0, -1.0]) for R in rotations])
    n = len(down)
    if n == 0:
        return 0
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    cos_lim = np.cos(np.radians(linkage_deg))
    sim = down @ down.T
    for i in range(n):
        for j in range(i + 1, n):
            if sim[i, j] >= cos_lim:
                parent[find(i)] = find(j)
    return len({find(i) for i in range(n)})
