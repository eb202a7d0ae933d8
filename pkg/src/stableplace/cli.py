"""``stableplace`` command line: gen-data, train, sample, eval, ablate.

Exit codes: 0 success, 2 validation error, 3 simulation/training fault.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .checkpoint import Checkpoint
from .diffusion import DiffusionConfig, SamplingFault, TrainingFault
from .evaluation import ABLATION_SLOTS, MODES, resting_face_clusters, run_ablation, run_eval, sample_poses
from .formats import Dataset, FormatError, SceneRecord, atomic_write, load_dataset
from .generation import GenerationError, GenerationStats, generate_stable_scene, rng_for
from .physics import SimConfig, SimulationError, settle_and_score, stack_success
from .scene import Scene, SceneError, SceneObject
from .se3 import Pose, encode_pose
from .shapes import CatalogError, default_catalog
from .training import load_profile, train

log = logging.getLogger("stableplace")

EXIT_OK, EXIT_VALIDATION, EXIT_FAULT = 0, 2, 3


class CommandFailed(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    catalog = default_catalog()
    mode = args.mode
    shapes = args.shapes.split(",") if args.shapes else None
    if shapes is not None:
        if len(shapes) != args.blocks:
            raise ValueError(f"--shapes lists {len(shapes)} names for {args.blocks} blocks")
        for s in shapes:
            if s not in catalog:
                raise ValueError(f"unknown shape {s!r}")
    stats = GenerationStats()
    records: list[SceneRecord] = []
    budget = args.max_attempts or max(20, 5 * args.count)
    attempt = 0
    while len(records) < args.count and attempt < budget:
        rng = rng_for(args.seed, attempt)
        try:
            scene = generate_stable_scene(args.blocks, catalog, rng, mode=mode, shapes=shapes, stats=stats)
            records.append(SceneRecord(attempt, args.seed, scene))
        except GenerationError as e:
            log.debug("stream %d rejected: %s", attempt, e)
        attempt += 1
        if attempt % 100 == 0:
            log.info("gen-data: %d/%d scenes after %d attempts", len(records), args.count, attempt)
    log.info("gen-data: %d scenes, %d attempts, drops=%d unconverged=%d workspace=%d structure=%d fixed_point=%d",
             len(records), attempt, stats.drops, stats.rejected_unconverged, stats.rejected_workspace,
             stats.rejected_structure, stats.rejected_fixed_point)
    meta = {"shapes": shapes} if shapes else {}
    Dataset(records, catalog.hash, mode, args.blocks, args.seed, meta).save(args.out)
    if len(records) < args.count:
        raise CommandFailed(f"only {len(records)} of {args.count} scenes after {attempt} attempts (partial file written)",
                            EXIT_FAULT)
    return EXIT_OK


def _file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def cmd_train(args) -> int:
    catalog = default_catalog()
    dcfg, tcfg = load_profile(args.profile)
    overrides = {k: v for k, v in (("steps", args.steps), ("lr", args.lr), ("batch_size", args.batch_size)) if v}
    tcfg = replace(tcfg, seed=args.seed, **overrides)
    dcfg = replace(dcfg, use_sdf=not args.no_sdf, use_pose=not args.no_pose,
                   world_frame_rotation=dcfg.world_frame_rotation and args.parameterization == "epsilon")
    if args.holdout_shape and args.holdout_shape not in catalog:
        raise ValueError(f"unknown holdout shape {args.holdout_shape!r}")
    scenes, sources = [], []
    for path in args.data:
        ds = load_dataset(path, catalog)
        kept = [s for s in ds.scenes if args.holdout_shape not in s.shapes]
        log.info("train: %s  %d scenes (%d kept)", path, len(ds), len(kept))
        scenes += kept
        sources.append({"file": Path(path).name, "sha256": _file_digest(path), "mode": ds.mode,
                        "n_blocks": ds.n_blocks, "n_used": len(kept)})
    if not scenes:
        raise ValueError("no training scenes left after filtering")
    diffusion = DiffusionConfig(parameterization=args.parameterization, seed=args.seed)
    meta = {"profile": args.profile, "seed": args.seed, "holdout_shape": args.holdout_shape, "datasets": sources}
    _, hist = train(scenes, dcfg, tcfg, diffusion, catalog, out=args.out, meta=meta)
    log.info("train: done in %.0fs, final validation loss %s", hist.seconds, hist.val[-1][1] if hist.val else None)
    return EXIT_OK


def _load_ckpt(path, catalog) -> Checkpoint:
    ckpt = Checkpoint.load(path)
    if ckpt.catalog_hash != catalog.hash:
        raise FormatError(f"{path}: checkpoint catalog {ckpt.catalog_hash} does not match loaded catalog {catalog.hash}")
    return ckpt


def cmd_sample(args) -> int:
    catalog = default_catalog()
    ckpt = _load_ckpt(args.ckpt, catalog)
    ds = load_dataset(args.scene, catalog)
    if not 0 <= args.index < len(ds):
        raise ValueError(f"--index {args.index} out of range for {len(ds)} records")
    base = ds.records[args.index].scene
    shape = args.query_shape or base.query.shape
    if shape not in catalog:
        raise ValueError(f"unknown query shape {shape!r}")
    objs = list(base.objects)
    objs[base.query_index] = SceneObject(shape, Pose.identity())
    scene = Scene(tuple(objs), base.query_index)
    n_pts = int(ckpt.meta.get("train", {}).get("n_pts", 64))
    sim = SimConfig()
    samples = []
    settled_rots = []
    poses = sample_poses(ckpt, [scene] * args.n, [(args.seed, k) for k in range(args.n)], n_pts, catalog)
    for k, pose in enumerate(poses):
        entry = {"sample": k}
        if isinstance(pose, str):
            entry["fault"] = pose
            samples.append(entry)
            continue
        entry["pose"] = [float(v) for v in encode_pose(pose, warn=False)]
        try:
            res, rep = settle_and_score(scene.with_query_pose(pose), sim, catalog, strict=False)
        except SimulationError as e:
            entry["fault"] = f"simulation: {e}"
            samples.append(entry)
            continue
        q = res.settled_poses[scene.query_index]
        entry.update(trans_pct=rep.scene_max_trans_pct, rot_deg=rep.scene_max_rot_deg,
                     success=stack_success(rep), settled_pose=[float(v) for v in encode_pose(q, warn=False)])
        settled_rots.append(q.rotation)
        samples.append(entry)
    out = {
        "format": "stableplace-samples",
        "version": 1,
        "catalog_hash": catalog.hash,
        "scene_file": Path(args.scene).name,
        "index": args.index,
        "query_shape": shape,
        "seed": args.seed,
        "resting_face_clusters": resting_face_clusters(settled_rots),
        "samples": samples,
    }
    atomic_write(args.out, json.dumps(out, indent=1, sort_keys=True) + "\n")
    if args.image and samples:
        from .viz import render_samples

        render_samples(scene, [s for s in samples if "pose" in s], catalog, args.image)
    return EXIT_OK


def cmd_eval(args) -> int:
    catalog = default_catalog()
    ds = load_dataset(args.testset, catalog)
    ckpt = _load_ckpt(args.ckpt, catalog) if args.ckpt else None
    if args.method == "model" and ckpt is None:
        raise ValueError("--method model needs --ckpt")
    rep = run_eval(ds, args.method, args.mode, ckpt, args.seed, catalog, Path(args.testset).name)
    rep.save(args.out)
    sys.stdout.write(rep.table())
    return EXIT_OK


def cmd_ablate(args) -> int:
    catalog = default_catalog()
    ds = load_dataset(args.testset, catalog)
    ckpts = {slot: _load_ckpt(getattr(args, f"ckpt_{slot}"), catalog) for slot in ABLATION_SLOTS}
    rep = run_ablation(ckpts, ds, args.mode, args.seed, catalog)
    rep.save(args.out)
    sys.stdout.write(rep.table())
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stableplace", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate stable scenes by simulated drops")
    g.add_argument("--blocks", type=int, required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--mode", choices=("placement", "stacking"), default="placement")
    g.add_argument("--shapes", help="comma-separated shape per block (default: random with replacement)")
    g.add_argument("--max-attempts", type=int, help="scene attempts before giving up (default 5 x count)")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a denoiser checkpoint")
    t.add_argument("--data", action="append", required=True, help="dataset file; repeat to train on the union")
    t.add_argument("--holdout-shape")
    t.add_argument("--profile", choices=("desk", "large"), default="desk")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)
    t.add_argument("--steps", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--no-sdf", action="store_true", help="ablation: zero the SDF input column")
    t.add_argument("--no-pose", action="store_true", help="ablation: hide the noisy pose from the head")
    t.add_argument("--parameterization", choices=("epsilon", "x0"), default="epsilon")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="generate query poses for one scene")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--scene", required=True, help="dataset file holding the scene")
    s.add_argument("--index", type=int, default=0, help="record index within --scene")
    s.add_argument("--query-shape")
    s.add_argument("--n", type=int, default=1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--image", help="optional PNG snapshot (needs matplotlib)")
    s.set_defaults(func=cmd_sample)

    e = sub.add_parser("eval", help="score a method on a test set")
    e.add_argument("--ckpt")
    e.add_argument("--testset", required=True)
    e.add_argument("--method", choices=("model", "random"), default="model")
    e.add_argument("--mode", choices=MODES, default="placement")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="full vs no-SDF vs no-pose comparison")
    a.add_argument("--ckpt-full", required=True)
    a.add_argument("--ckpt-nosdf", required=True)
    a.add_argument("--ckpt-nopose", required=True)
    a.add_argument("--testset", required=True)
    a.add_argument("--mode", choices=MODES, default="placement")
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except CommandFailed as e:
        log.error("%s", e)
        return e.code
    except (SimulationError, GenerationError, TrainingFault, SamplingFault) as e:
        log.error("fault: %s", e)
        return EXIT_FAULT
    except (ValueError, FormatError, CatalogError, SceneError, FileNotFoundError) as e:
        log.error("invalid input: %s", e)
        return EXIT_VALIDATION


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
