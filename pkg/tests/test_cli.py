import json

import numpy as np
import pytest

from stableplace.checkpoint import Checkpoint
from stableplace.cli import main
from stableplace.denoiser import DenoiserConfig, build_denoiser
from stableplace.diffusion import DiffusionConfig, NoiseSchedule
from stableplace.formats import load_dataset
from stableplace.shapes import default_catalog

CAT = default_catalog()


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


@pytest.fixture(scope="module")
def one_block(work):
    path = work / "one.jsonl"
    assert main(["gen-data", "--blocks", "1", "--count", "6", "--seed", "5", "--out", str(path)]) == 0
    return path


@pytest.fixture(scope="module")
def ckpt(work):
    diff = DiffusionConfig(NoiseSchedule.geometric(T=5))
    cfg = DenoiserConfig(k_nn=4, edge_conv_widths=(8, 8), latent_dim=8, mlp_widths=(8, 8), dtype="float32")
    path = work / "tiny.ckpt"
    m = build_denoiser(cfg, diff.schedule.sigmas, seed=0)
    Checkpoint.from_model(m, diff, CAT.hash, {"train": {"n_pts": 8}}).save(path)
    return path


def test_gen_data_is_byte_identical_for_equal_seeds(one_block, work):
    again = work / "again.jsonl"
    assert main(["gen-data", "--blocks", "1", "--count", "6", "--seed", "5", "--out", str(again)]) == 0
    assert again.read_bytes() == one_block.read_bytes()
    assert len(load_dataset(one_block, CAT)) == 6


def test_stacking_blocks_touch(work):
    path = work / "stack.jsonl"
    assert main(["gen-data", "--blocks", "2", "--count", "3", "--seed", "1", "--mode", "stacking",
                 "--out", str(path)]) == 0
    rng = np.random.default_rng(0)
    for scene in load_dataset(path, CAT).scenes:
        lo, hi = sorted(scene.objects, key=lambda o: o.pose.translation[2])
        gap = np.inf
        for a, b in ((hi, lo), (lo, hi)):
            shape = CAT[a.shape]
            pts = np.vstack([shape.vertices, shape.sample_surface(4000, rng)])
            world = pts @ a.pose.rotation.T + a.pose.translation
            local = (world - b.pose.translation) @ b.pose.rotation
            gap = min(gap, float(np.min(CAT[b.shape].sdf(local))))
        assert gap < 1e-3


def test_exit_codes(work, one_block):
    assert main(["gen-data", "--blocks", "1", "--count", "1", "--shapes", "sphere", "--out", str(work / "x")]) == 2
    assert main(["gen-data", "--blocks", "2", "--count", "1", "--shapes", "cube", "--out", str(work / "x")]) == 2
    assert main(["eval", "--testset", str(work / "missing.jsonl"), "--method", "random", "--out", str(work / "r")]) == 2
    assert main(["eval", "--testset", str(one_block), "--out", str(work / "r")]) == 2
    with pytest.raises(SystemExit) as e:
        main(["gen-data", "--blocks", "1"])
    assert e.value.code == 2
    # an attempt budget that cannot be met is a fault, and the partial file is kept
    out = work / "short.jsonl"
    assert main(["gen-data", "--blocks", "1", "--count", "5", "--max-attempts", "2", "--out", str(out)]) == 3
    assert len(load_dataset(out, CAT)) <= 2


def test_sample_outputs(ckpt, one_block, work):
    out = work / "s0.json"
    assert main(["sample", "--ckpt", str(ckpt), "--scene", str(one_block), "--n", "0", "--out", str(out)]) == 0
    assert json.loads(out.read_text())["samples"] == []
    a, b = work / "sa.json", work / "sb.json"
    for p in (a, b):
        assert main(["sample", "--ckpt", str(ckpt), "--scene", str(one_block), "--n", "3", "--seed", "4",
                     "--query-shape", "cube", "--out", str(p)]) == 0
    assert a.read_bytes() == b.read_bytes()
    doc = json.loads(a.read_text())
    assert len(doc["samples"]) == 3 and doc["query_shape"] == "cube"
    assert all(len(s["pose"]) == 6 for s in doc["samples"] if "fault" not in s)
    assert main(["sample", "--ckpt", str(ckpt), "--scene", str(one_block), "--index", "99", "--out", str(out)]) == 2


def test_checkpoint_catalog_mismatch_is_refused(ckpt, one_block, work):
    bad = Checkpoint.load(ckpt)
    bad.catalog_hash = "0" * 16
    bad.save(work / "bad.ckpt")
    assert main(["sample", "--ckpt", str(work / "bad.ckpt"), "--scene", str(one_block), "--out",
                 str(work / "s.json")]) == 2


def test_eval_and_ablate_write_reports(ckpt, one_block, work, capsys):
    out = work / "rand.json"
    assert main(["eval", "--testset", str(one_block), "--method", "random", "--out", str(out)]) == 0
    assert json.loads(out.read_text())["method"] == "random"
    assert "succ%" in capsys.readouterr().out
    abl = work / "abl.json"
    c = str(ckpt)
    assert main(["ablate", "--ckpt-full", c, "--ckpt-nosdf", c, "--ckpt-nopose", c, "--testset", str(one_block),
                 "--out", str(abl)]) == 0
    assert abl.exists() and (work / "abl.json.txt").exists()


def test_holdout_shape_is_filtered(work):
    data = work / "mixed.jsonl"
    assert main(["gen-data", "--blocks", "1", "--count", "12", "--seed", "2", "--out", str(data)]) == 0
    scenes = load_dataset(data, CAT).scenes
    n_cube = sum("cube" in s.shapes for s in scenes)
    assert 0 < n_cube < len(scenes)
    out = work / "held.ckpt"
    assert main(["train", "--data", str(data), "--holdout-shape", "cube", "--steps", "2", "--batch-size", "2",
                 "--out", str(out)]) == 0
    meta = Checkpoint.load(out).meta
    assert meta["holdout_shape"] == "cube"
    assert meta["datasets"][0]["n_used"] == len(scenes) - n_cube
    assert main(["train", "--data", str(data), "--holdout-shape", "sphere", "--steps", "1", "--out", str(out)]) == 2
