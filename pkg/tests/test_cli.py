"""Command line behaviour: exit codes, manifests, and the full pipeline."""

import filecmp
import json
import os

import pytest

from detrefine.cli import main
from detrefine.scoring import fuse
from detrefine.types import FusionConfig


def run(argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def world(tmp_path_factory):
    out = tmp_path_factory.mktemp("small_world")
    rc = run(["synth", "--out", out, "--n-train", 24, "--n-val", 12,
              "--seed", 9])
    assert rc == 0
    return out


@pytest.fixture(scope="module")
def checkpoint(world, tmp_path_factory):
    out = tmp_path_factory.mktemp("ckpt") / "model.drck"
    rc = run(["train",
              "--features", world / "features_train.drfc",
              "--annotations", world / "annotations_train.json",
              "--text-emb", world / "text_embeddings.drte",
              "--out", out, "--d", 16, "--epochs", 1, "--quiet"])
    assert rc == 0
    return out


def test_help_exits_zero(capsys):
    with pytest.raises(SystemExit) as exc:
        run(["--help"])
    assert exc.value.code == 0
    assert "synth" in capsys.readouterr().out


def test_unknown_flag_exits_two(capsys):
    with pytest.raises(SystemExit) as exc:
        run(["evaluate", "--bogus"])
    assert exc.value.code == 2


def test_missing_subcommand_exits_two():
    with pytest.raises(SystemExit) as exc:
        run([])
    assert exc.value.code == 2


def test_missing_input_exits_three(tmp_path, capsys):
    rc = run(["inspect", tmp_path / "nope.drfc"])
    assert rc == 3
    assert capsys.readouterr().err.startswith("InputError: FileNotFoundError")


def test_inspect_rejects_unknown_magic(tmp_path, capsys):
    path = tmp_path / "junk.bin"
    path.write_bytes(b"JUNKJUNK")
    rc = run(["inspect", path])
    captured = capsys.readouterr()
    assert rc == 3
    assert captured.err.startswith("InputError: BadMagic")
    assert captured.out == ""


def test_synth_outputs_and_manifest(world):
    expected = ["annotations_train.json", "annotations_val.json",
                "detections_train.json", "detections_val.json",
                "features_train.drfc", "features_val.drfc",
                "text_embeddings.drte", "world.npz", "spec_resolved.json",
                "run_manifest.json"]
    for name in expected:
        assert (world / name).exists(), name
    manifest = json.loads((world / "run_manifest.json").read_text())
    assert manifest["command"] == "synth"
    assert manifest["seed"] == 9
    assert manifest["config"]["n_train"] == 24
    assert manifest["tool_version"]
    assert manifest["started"] and manifest["finished"]


def test_synth_rerun_is_byte_identical(world, tmp_path):
    rc = run(["synth", "--out", tmp_path, "--n-train", 24, "--n-val", 12,
              "--seed", 9])
    assert rc == 0
    for name in os.listdir(world):
        if name == "run_manifest.json":
            continue
        assert filecmp.cmp(world / name, tmp_path / name, shallow=False), name


def test_output_overwriting_input_exits_two(world, capsys):
    rc = run(["evaluate",
              "--annotations", world / "annotations_val.json",
              "--detections", world / "detections_val.json",
              "--out", world / "detections_val.json"])
    assert rc == 2
    assert capsys.readouterr().err.startswith("UsageError")


def test_train_precedence_log_and_manifest(world, tmp_path, capsys):
    cfg_file = tmp_path / "cfg.json"
    cfg_file.write_text(json.dumps({"d": 8, "epochs": 2, "batch_size": 8}))
    out = tmp_path / "model.drck"
    log = tmp_path / "train.log"
    rc = run(["train",
              "--features", world / "features_train.drfc",
              "--annotations", world / "annotations_train.json",
              "--text-emb", world / "text_embeddings.drte",
              "--config", cfg_file, "--d", 16,
              "--out", out, "--log", log, "--quiet"])
    assert rc == 0
    assert out.exists()

    manifest = json.loads((tmp_path / "model.drck.manifest.json").read_text())
    assert manifest["config"]["d"] == 16          # flag beats config file
    assert manifest["config"]["epochs"] == 2      # file beats default
    assert manifest["config"]["lr"] == 1e-3       # untouched default
    assert manifest["seed"] == 0
    assert len(manifest["inputs"]) == 4
    assert all(d.startswith("sha256:") for d in manifest["inputs"].values())

    lines = log.read_text().strip().splitlines()
    assert len(lines) == 2 * 3                    # 2 epochs x ceil(24/8)
    assert lines[0].startswith("step=1 ")
    for key in ("lr=", "l_img=", "l_roi=", "l_ckd=", "l_pkd=", "total="):
        assert key in lines[0]


def test_train_unknown_config_key_exits_two(world, tmp_path, capsys):
    cfg_file = tmp_path / "cfg.json"
    cfg_file.write_text(json.dumps({"dd": 8}))
    rc = run(["train",
              "--features", world / "features_train.drfc",
              "--annotations", world / "annotations_train.json",
              "--text-emb", world / "text_embeddings.drte",
              "--config", cfg_file, "--out", tmp_path / "m.drck"])
    assert rc == 2
    assert "unknown config keys" in capsys.readouterr().err


def test_refine_results_and_sidecar(world, checkpoint, tmp_path, capsys):
    out = tmp_path / "refined.json"
    rc = run(["refine", "--ckpt", checkpoint,
              "--features", world / "features_val.drfc",
              "--detections", world / "detections_val.json",
              "--text-emb", world / "text_embeddings.drte",
              "--annotations", world / "annotations_val.json",
              "--weights", "0.6,0.3,0.1", "--out", out])
    assert rc == 0

    results = json.loads(out.read_text())
    sidecar = json.loads((tmp_path / "refined.sidecar.json").read_text())
    source = json.loads((world / "detections_val.json").read_text())
    assert len(results) == len(sidecar) == len(source)

    fusion = FusionConfig(0.6, 0.3, 0.1)
    for rec, extra in zip(results, sidecar):
        assert rec["image_id"] == extra["image_id"]
        assert rec["category_id"] == extra["category_id"]
        assert rec["bbox"] == extra["bbox"]
        assert rec["score"] == extra["p_final"]
        expected = fuse(extra["p_det"], extra["p_cls"], extra["p_roi"], fusion)
        assert abs(extra["p_final"] - expected) < 1e-12
        assert 0.0 <= rec["score"] <= 1.0

    # input order within an image survives refinement
    by_image = {}
    for rec in source:
        by_image.setdefault(rec["image_id"], []).append(rec)
    for rec in results:
        expected = by_image[rec["image_id"]].pop(0)
        assert rec["bbox"] == expected["bbox"]
        assert rec["category_id"] == expected["category_id"]


def test_refine_bad_weights_exits_two(world, checkpoint, tmp_path, capsys):
    rc = run(["refine", "--ckpt", checkpoint,
              "--features", world / "features_val.drfc",
              "--detections", world / "detections_val.json",
              "--text-emb", world / "text_embeddings.drte",
              "--annotations", world / "annotations_val.json",
              "--weights", "0.6,0.4", "--out", tmp_path / "r.json"])
    assert rc == 2
    assert capsys.readouterr().err.startswith("UsageError")


def test_evaluate_report_text_and_json(world, tmp_path, capsys):
    out = tmp_path / "report.json"
    rc = run(["evaluate",
              "--annotations", world / "annotations_val.json",
              "--detections", world / "detections_val.json",
              "--groups", "split", "--out", out])
    assert rc == 0
    text = capsys.readouterr().out
    assert "AP_all" in text and "AP_novel" in text and "AP_base" in text

    report = json.loads(out.read_text())
    assert 0.0 <= report["ap_all"] <= 1.0
    assert set(report["groups"]) == {"novel", "base"}
    assert report["config"]["group_mode"] == "ovd_split"
    manifest = json.loads((tmp_path / "report.json.manifest.json").read_text())
    assert manifest["command"] == "evaluate"


def test_inspect_reports_headers(world, checkpoint, capsys):
    rc = run(["inspect", checkpoint, world / "features_val.drfc",
              world / "text_embeddings.drte"])
    assert rc == 0
    out = capsys.readouterr().out
    assert "d=16" in out
    assert "record_count=12" in out
    assert "categories=12" in out


def test_compare_mismatched_reports_exits_three(world, tmp_path, capsys):
    args = ["evaluate", "--annotations", world / "annotations_val.json",
            "--detections", world / "detections_val.json"]
    assert run(args + ["--groups", "split", "--out", tmp_path / "a.json"]) == 0
    assert run(args + ["--groups", "none", "--out", tmp_path / "b.json"]) == 0
    capsys.readouterr()
    rc = run(["compare", "--baseline", tmp_path / "a.json",
              "--candidate", tmp_path / "b.json"])
    assert rc == 3
    assert capsys.readouterr().err.startswith("InputError: ConfigMismatch")


def test_full_pipeline_improves_ap(tmp_path, capsys):
    """synth -> train -> refine -> evaluate x2 -> compare on the default world."""
    world = tmp_path / "world"
    assert run(["synth", "--out", world]) == 0

    ckpt = tmp_path / "model.drck"
    assert run(["train",
                "--features", world / "features_train.drfc",
                "--annotations", world / "annotations_train.json",
                "--text-emb", world / "text_embeddings.drte",
                "--out", ckpt, "--d", 128, "--batch-size", 8,
                "--ema-decay", 0.9, "--quiet"]) == 0

    refined = tmp_path / "refined.json"
    assert run(["refine", "--ckpt", ckpt,
                "--features", world / "features_val.drfc",
                "--detections", world / "detections_val.json",
                "--text-emb", world / "text_embeddings.drte",
                "--annotations", world / "annotations_val.json",
                "--out", refined]) == 0

    base_report = tmp_path / "base.json"
    refined_report = tmp_path / "refined_report.json"
    common = ["evaluate", "--annotations", world / "annotations_val.json",
              "--groups", "split"]
    assert run(common + ["--detections", world / "detections_val.json",
                         "--out", base_report]) == 0
    assert run(common + ["--detections", refined,
                         "--out", refined_report]) == 0

    capsys.readouterr()
    assert run(["compare", "--baseline", base_report,
                "--candidate", refined_report]) == 0
    compare_text = capsys.readouterr().out
    assert "ap_all" in compare_text

    base = json.loads(base_report.read_text())
    after = json.loads(refined_report.read_text())
    assert after["ap_all"] >= base["ap_all"]
    assert after["groups"]["novel"] >= base["groups"]["novel"]
