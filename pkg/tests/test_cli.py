import json
import subprocess
import sys

import pytest

from xdiag import cli, probe


def run_cli(*argv) -> int:
    return cli.run([str(a) for a in argv])


@pytest.fixture(scope="module")
def planted_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("planted")
    code = run_cli(
        "synth", "planted", "--seed", 5, "--n-train", 600, "--n-val", 400,
        "--scale", "0.5,1.0", "--noise", 0.3, "--out", out,
    )
    assert code == 0
    return out


@pytest.fixture(scope="module")
def trained_model(planted_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("model") / "probe.json"
    code = run_cli(
        "train", "--train", planted_dir / "train.emb", "--val", planted_dir / "val.emb",
        "--model", "linear", "--loss", "ce", "--seed", 5, "--batch-size", 32, "--out", out,
    )
    assert code == 0
    return out


def test_help_exits_zero(capsys):
    assert run_cli("--help") == 0
    assert "xdiag" in capsys.readouterr().out


def test_unknown_flag_usage_error():
    assert run_cli("geometry", "--bogus") == 1


def test_unknown_subcommand_usage_error():
    assert run_cli("frobnicate") == 1


def test_missing_store_exits_2_with_path(capsys):
    code = run_cli("info", "/nonexistent/store.emb")
    assert code == 2
    assert "/nonexistent/store.emb" in capsys.readouterr().err


def test_info_summarizes(planted_dir, capsys):
    assert run_cli("info", planted_dir / "train.emb") == 0
    out = capsys.readouterr().out
    assert "modality=image" in out
    assert "aspect0" in out


def test_synth_prop1_geometry_pipeline(tmp_path, capsys):
    w = tmp_path / "w"
    assert run_cli("synth", "prop1", "--seed", 7, "--out", w) == 0
    assert run_cli("geometry", "--image", w / "img.emb", "--text", w / "txt.emb") == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["orthogonality"]["image"]["std"] <= 1e-8
    assert abs(rep["orthogonality"]["image"]["mean"]) <= 1e-8
    assert rep["individual"]["magnitude"]["std"] <= 1e-8
    assert rep["individual"]["direction"]["mean"] >= 1.0 - 1e-8


def test_geometry_writes_csv_and_figure(tmp_path):
    w = tmp_path / "w"
    assert run_cli("synth", "prop1", "--n", 50, "--seed", 1, "--out", w) == 0
    out = tmp_path / "report" / "gap.json"
    assert run_cli("geometry", "--image", w / "img.emb", "--text", w / "txt.emb", "--out", out) == 0
    assert out.exists()
    assert out.with_suffix(".csv").exists()
    assert out.with_suffix(".png").exists()
    doc = json.loads(out.read_text())
    assert doc["schema_version"] == 1
    assert doc["config"]["command"] == "geometry"


def test_eval_consistency(planted_dir, trained_model, tmp_path, capsys):
    assert (
        run_cli(
            "eval", "--model", trained_model, "--store", planted_dir / "val.emb",
            "--consistency-with", planted_dir / "val.emb",
        )
        == 0
    )
    rep = json.loads(capsys.readouterr().out)
    assert rep["consistency"] == 1.0
    assert 0.0 <= rep["accuracy"] <= 1.0


def test_train_quadratic_closed_form(planted_dir, tmp_path):
    out = tmp_path / "quad.json"
    code = run_cli(
        "train", "--train", planted_dir / "train.emb", "--val", planted_dir / "val.emb",
        "--model", "linear", "--loss", "quad", "--lambda", 0.01, "--out", out,
    )
    assert code == 0
    model = probe.load_model(out)
    assert model.task == "quadratic"
    assert model.layers[0].bias is None


def test_slices_attrs_rectify_correlate_pipeline(planted_dir, trained_model, tmp_path):
    slices_out = tmp_path / "slices.json"
    code = run_cli(
        "slices", "--model", trained_model,
        "--schema", planted_dir / "schema.json", "--templates", planted_dir / "templates.json",
        "--synth-scenario", planted_dir, "--images", planted_dir / "val.emb",
        "--top-k", 8, "--delta", 0.08, "--out", slices_out,
    )
    assert code == 0
    doc = json.loads(slices_out.read_text())
    assert doc["kind"] == "slice_report"
    assert len(doc["rows"]) == 8
    assert slices_out.with_suffix(".csv").exists()
    assert slices_out.with_suffix(".png").exists()
    worst = doc["rows"][0]
    assert worst["is_error"] is True
    assert worst["assignment"]["category"][-1] != worst["assignment"]["aspect0"][-1]

    attrs_out = tmp_path / "attrs.json"
    code = run_cli(
        "attrs", "--model", trained_model,
        "--schema", planted_dir / "schema.json", "--templates", planted_dir / "templates.json",
        "--synth-scenario", planted_dir, "--class", "category1", "--exact", "--out", attrs_out,
    )
    assert code == 0
    rows = json.loads(attrs_out.read_text())["rows"]
    influences = {r["token"]: r["influence"] for r in rows}
    assert influences["aspect0v1"] > 0.05  # spuriously pulls toward category1
    assert influences["aspect0v0"] < -0.05

    rect_out = tmp_path / "rectified.json"
    code = run_cli(
        "rectify", "--model", trained_model, "--slices", slices_out,
        "--schema", planted_dir / "schema.json", "--templates", planted_dir / "templates.json",
        "--synth-scenario", planted_dir, "--batch-size", 8, "--seed", 5,
        "--compare-store", planted_dir / "val.emb", "--out", rect_out,
    )
    assert code == 0
    rect_model = probe.load_model(rect_out)
    assert rect_model.task == "multiclass"
    report_doc = json.loads((tmp_path / "rectified.report.json").read_text())
    deltas = [r["delta"] for r in report_doc["rows"]]
    assert all(d is not None for d in deltas)
    assert report_doc["config"]["epochs"] == 10

    corr_out = tmp_path / "corr.json"
    code = run_cli(
        "correlate", "--text-report", slices_out, "--image-report", slices_out, "--out", corr_out,
    )
    assert code == 0
    corr = json.loads(corr_out.read_text())
    assert corr["n_slices"] == 8
    assert corr["spearman"] is not None


def test_prompts_manifest(planted_dir, tmp_path, capsys):
    out = tmp_path / "manifest.txt"
    code = run_cli(
        "prompts", "--schema", planted_dir / "schema.json",
        "--templates", planted_dir / "templates.json", "--out", out,
    )
    assert code == 0
    lines = out.read_text().splitlines()
    assert "a photo of a category0." in lines
    assert "a photo of a category0, aspect0v1." in lines
    assert len(lines) == len(set(lines))


def test_prompts_manifest_builtin_ensemble(planted_dir, tmp_path, capsys):
    out = tmp_path / "manifest80.txt"
    code = run_cli(
        "prompts", "--schema", planted_dir / "schema.json",
        "--templates", planted_dir / "templates.json",
        "--ensemble", "builtin", "--max-ensemble", 4, "--out", out,
    )
    assert code == 0
    lines = out.read_text().splitlines()
    assert "a bad photo of a a photo of a category0.." in lines  # wrap-the-core pattern


def test_synth_spectral_and_classmean(tmp_path):
    out = tmp_path / "spec"
    assert run_cli("synth", "spectral", "--trials", 10, "--out", out) == 0
    doc = json.loads((out / "residuals.json").read_text())
    assert doc["max_residual"] <= 1e-9
    out2 = tmp_path / "cm"
    assert run_cli("synth", "classmean", "--trials", 5, "--out", out2) == 0
    doc2 = json.loads((out2 / "residuals.json").read_text())
    assert doc2["max_residual"] <= 1e-8


def test_console_entry_point(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "xdiag.cli", "--help"], capture_output=True, text=True
    )
    assert proc.returncode == 0
    assert "usage: xdiag" in proc.stdout
