import json

import numpy as np
import pytest

from stableplace.checkpoint import Checkpoint
from stableplace.denoiser import DenoiserConfig, build_denoiser
from stableplace.diffusion import DiffusionConfig, NoiseSchedule
from stableplace.evaluation import (
    AblationReport,
    EvalReport,
    EvalRow,
    aggregate,
    aggregates,
    check_ablation_set,
    evaluate,
    resting_face_clusters,
    run_ablation,
    run_eval,
)
from stableplace.formats import Dataset, SceneRecord
from stableplace.generation import generate_stable_scene, rng_for
from stableplace.se3 import expmap
from stableplace.shapes import default_catalog

CAT = default_catalog()
TINY = DenoiserConfig(k_nn=4, edge_conv_widths=(8, 8), latent_dim=8, mlp_widths=(8, 8), dtype="float32")


def tiny_ckpt(use_sdf=True, use_pose=True, holdout=None):
    diff = DiffusionConfig(NoiseSchedule.geometric(T=5))
    cfg = DenoiserConfig(**{**TINY.to_dict(), "use_sdf": use_sdf, "use_pose": use_pose})
    m = build_denoiser(cfg, diff.schedule.sigmas, seed=0)
    return Checkpoint.from_model(m, diff, CAT.hash, {"train": {"n_pts": 8, "seed": 0}, "holdout_shape": holdout})


@pytest.fixture(scope="module")
def dataset():
    recs = [SceneRecord(i, 2, generate_stable_scene(2, CAT, rng_for(2, i))) for i in range(4)]
    return Dataset(recs, CAT.hash, "placement", 2, 2)


def row(t, r, ok=True, shape="cube", split="id", fault=None):
    return EvalRow(0, "model", shape, split, t, r, ok, None, fault)


def test_zero_rows_give_zero_aggregates():
    a = aggregate([row(0.0, 0.0) for _ in range(5)])
    assert a == {"n": 5, "median_trans_pct": 0.0, "median_rot_deg": 0.0, "success_pct": 100.0, "faults": 0}
    assert aggregate([])["n"] == 0


def test_faults_count_as_infinite_displacement():
    rows = [row(1.0, 1.0), row(None, None, False, fault="sampling: diverged"), row(2.0, 3.0)]
    a = aggregate(rows)
    assert a["median_trans_pct"] == 2.0 and a["faults"] == 1
    assert aggregate(rows[1:2])["median_trans_pct"] is None


def test_aggregates_split_by_shape_and_split():
    rows = [row(1.0, 1.0, shape="cube"), row(3.0, 1.0, shape="cube", split="ood"), row(5.0, 2.0, shape="hat")]
    agg = aggregates(rows)
    assert agg["all"]["n"] == 3
    assert set(agg["split"]) == {"id", "ood"}
    assert agg["shape"]["cube"]["ood"]["median_trans_pct"] == 3.0
    assert "ood" not in agg["shape"]["hat"]


def test_report_round_trip_recomputes_aggregates(dataset, tmp_path):
    rep = run_eval(dataset, "random", "placement", seed=1, catalog=CAT, testset="t")
    path = tmp_path / "r.json"
    rep.save(path)
    stored = json.loads(path.read_text())
    back = EvalReport.load(path)
    assert json.loads(json.dumps(back.aggregates)) == stored["aggregates"]
    assert (tmp_path / "r.json.txt").read_text() == rep.table()
    assert len(back.rows) == len(dataset)


def test_random_eval_is_seeded(dataset):
    a = evaluate(dataset.records, "random", "placement", seed=3, catalog=CAT)
    b = evaluate(dataset.records, "random", "placement", seed=3, catalog=CAT)
    assert a == b
    assert all(r.split == "-" for r in a)


def test_model_eval_and_ood_labels(dataset):
    shapes = dataset.records[0].scene.shapes
    rows = evaluate(dataset.records[:2], "model", "placement", tiny_ckpt(holdout=shapes[0]), seed=0, catalog=CAT)
    assert rows[0].split == "ood"
    assert all(r.trans_pct is not None or r.fault for r in rows)
    again = evaluate(dataset.records[:2], "model", "placement", tiny_ckpt(holdout=shapes[0]), seed=0, catalog=CAT)
    assert rows == again


def test_mode_and_method_validation(dataset):
    with pytest.raises(ValueError):
        evaluate(dataset.records, "random", "stack2", catalog=CAT)
    with pytest.raises(ValueError):
        evaluate(dataset.records, "oracle", "placement", catalog=CAT)
    with pytest.raises(ValueError):
        evaluate(dataset.records, "model", "placement", catalog=CAT)


def test_identical_ablation_slots_give_identical_columns(dataset, tmp_path):
    ck = tiny_ckpt()
    rep = run_ablation({"full": ck, "nosdf": ck, "nopose": ck}, Dataset(dataset.records[:2], CAT.hash, "placement", 2, 2),
                       catalog=CAT)
    cols = rep.columns()
    assert cols["full"] == cols["nosdf"] == cols["nopose"]
    rep.save(tmp_path / "abl.json")
    table = (tmp_path / "abl.json.txt").read_text()
    assert "Full model" in table and "w/o SDF" in table and "w/o pose" in table
    assert AblationReport.load(tmp_path / "abl.json").columns() == json.loads(json.dumps(cols))


def test_ablation_refuses_mismatched_profiles():
    check_ablation_set({"full": tiny_ckpt(), "nosdf": tiny_ckpt(use_sdf=False), "nopose": tiny_ckpt(use_pose=False)})
    other = tiny_ckpt(use_sdf=False)
    other.meta["train"]["seed"] = 1
    with pytest.raises(ValueError):
        check_ablation_set({"full": tiny_ckpt(), "nosdf": other, "nopose": tiny_ckpt(use_pose=False)})


def test_resting_face_clusters():
    assert resting_face_clusters([]) == 0
    yaw = [expmap([0, 0, a]) for a in np.linspace(0, 2 * np.pi, 12)]
    assert resting_face_clusters(yaw) == 1
    flips = [np.eye(3), expmap([np.pi, 0, 0]), expmap([np.pi / 2, 0, 0]), expmap([0, np.pi / 2, 0])]
    assert resting_face_clusters(flips) == 4
    assert resting_face_clusters([expmap([0.1, 0, 0]), np.eye(3)]) == 1
