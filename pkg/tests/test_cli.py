import json
import subprocess
import sys
import tempfile
from pathlib import Path

import jsonschema
import numpy as np
import pytest
from PIL import Image

import shapes
from avdiffusion import denoiser as dn
from avdiffusion.cli import EXIT_IO, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main
from avdiffusion.commands import METRICS_SCHEMA, load_model
from avdiffusion.formats import LEGAL_RGB, load_checkpoint, write_mask_png
from avdiffusion.synthvessel import AVMask

# thinner vessels keep 16x16 masks inside the sparsity band
_TINY_CFG = Path(tempfile.mkdtemp()) / "tiny.json"
_TINY_CFG.write_text(json.dumps({"vessel_tree": {"root_width": 1.2}}))
TINY = ["--config", str(_TINY_CFG), "--resolution", "16", "--depth", "1", "--base-channels", "8",
        "--time-embed-dim", "8", "--num-steps", "10", "--batch-size", "4"]


def run(*args):
    return main([str(a) for a in args])


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    assert run("synth-data", "--seed", 3, "--n", 6, "--out-dir", d, *TINY) == EXIT_OK
    return d


@pytest.fixture(scope="module")
def trained(tmp_path_factory, data_dir):
    out = tmp_path_factory.mktemp("run")
    assert run("train", "--seed", 1, "--epochs", 2, "--data-dir", data_dir, "--out-dir", out, *TINY) == EXIT_OK
    return out


def test_synth_data_outputs(tmp_path):
    assert run("synth-data", "--seed", 0, "--n", 5, "--out-dir", tmp_path) == EXIT_OK
    pngs = sorted(tmp_path.glob("*.png"))
    assert len(pngs) == 5
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["count"] == 5 and len(manifest["files"]) == 5
    assert [f["file"] for f in manifest["files"]] == [p.name for p in pngs]
    assert (tmp_path / "figures" / "preview.png").exists()


def test_synth_data_is_reproducible(tmp_path):
    for d in ("a", "b"):
        assert run("synth-data", "--seed", 9, "--n", 4, "--out-dir", tmp_path / d) == EXIT_OK
    for name in ["manifest.json"] + [f"mask_{i:05d}.png" for i in range(4)]:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


@pytest.mark.parametrize("flags", [["--seed", "8"], ["--lr", "0.01"], ["--c", "1.0"], ["--resolution", "64"],
                                   ["--n", "4"], ["--loss", "simple"]])
def test_manifest_digest_tracks_every_field(tmp_path, flags):
    base = ["synth-data", "--seed", 7, "--n", 3]
    run(*base, "--out-dir", tmp_path / "ref")
    args = base + flags
    assert run(*args, "--out-dir", tmp_path / "new") == EXIT_OK
    ref = json.loads((tmp_path / "ref" / "manifest.json").read_text())["config_digest"]
    new = json.loads((tmp_path / "new" / "manifest.json").read_text())["config_digest"]
    assert ref != new


def test_manifest_digest_ignores_output_path(tmp_path):
    for d in ("x", "y"):
        run("synth-data", "--seed", 7, "--n", 2, "--out-dir", tmp_path / d)
    assert json.loads((tmp_path / "x" / "manifest.json").read_text())["config_digest"] == \
        json.loads((tmp_path / "y" / "manifest.json").read_text())["config_digest"]


def test_config_file_and_overrides(tmp_path):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"seed": 4, "resolution": 16, "n_train": 3, "vessel_tree": {"root_width": 1.2}}))
    assert run("synth-data", "--config", cfg, "--n", 2, "--out-dir", tmp_path / "o", "--seed", 5) == EXIT_OK
    m = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert m["config"]["run_config"]["seed"] == 5
    assert m["config"]["vessel_tree"]["height"] == 16


def test_train_outputs(trained):
    rows = (trained / "loss_history.csv").read_text().strip().splitlines()
    assert rows[0] == "epoch,mean_loss" and len(rows) == 3
    assert (trained / "loss_history.png").exists()
    params, schedule, cfg, opt, meta = load_model(trained / "checkpoint.ckpt")
    assert meta["epoch"] == 2 and opt.step == 4
    assert schedule.num_steps == 10 and cfg.seed == 1


def test_resume_with_zero_epochs_is_identity(tmp_path, trained, data_dir):
    ck = trained / "checkpoint.ckpt"
    assert run("train", "--seed", 1, "--epochs", 0, "--data-dir", data_dir, "--out-dir", tmp_path,
               "--resume", ck, *TINY) == EXIT_OK
    a, _ = load_checkpoint(ck)
    b, meta = load_checkpoint(tmp_path / "checkpoint.ckpt")
    assert a.keys() == b.keys()
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)
    assert meta["epoch"] == 2


def test_resume_continues_uninterrupted_run(tmp_path, data_dir):
    common = ["--seed", 2, "--data-dir", data_dir, *TINY]
    run("train", "--epochs", 3, "--out-dir", tmp_path / "full", *common)
    run("train", "--epochs", 1, "--out-dir", tmp_path / "part", *common)
    run("train", "--epochs", 2, "--out-dir", tmp_path / "rest", "--resume", tmp_path / "part" / "checkpoint.ckpt",
        *common)
    a, ma = load_checkpoint(tmp_path / "full" / "checkpoint.ckpt")
    b, mb = load_checkpoint(tmp_path / "rest" / "checkpoint.ckpt")
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)
    assert ma["loss_history"] == mb["loss_history"]


def test_resume_with_other_architecture_is_config_error(tmp_path, trained, data_dir):
    args = ["train", "--seed", 1, "--epochs", 1, "--data-dir", data_dir, "--out-dir", tmp_path,
            "--resume", trained / "checkpoint.ckpt", *TINY, "--base-channels", "4"]
    assert run(*args) == EXIT_USAGE


def test_nan_loss_exit_code_keeps_checkpoint(tmp_path, data_dir, monkeypatch):
    real = dn.loss_and_grads
    calls = {"n": 0}

    def flaky(*a, **k):
        calls["n"] += 1
        loss, g = real(*a, **k)
        return (float("nan") if calls["n"] > 2 else loss), g

    monkeypatch.setattr(dn, "loss_and_grads", flaky)
    code = run("train", "--seed", 1, "--epochs", 3, "--data-dir", data_dir, "--out-dir", tmp_path, *TINY)
    assert code == EXIT_NUMERIC
    _, meta = load_checkpoint(tmp_path / "checkpoint.ckpt")
    assert meta["epoch"] == 1


def test_train_without_data_dir_is_usage_error(tmp_path):
    assert run("train", "--seed", 1, "--out-dir", tmp_path) == EXIT_USAGE


def test_sample_outputs_and_determinism(tmp_path, trained):
    ck = trained / "checkpoint.ckpt"
    for d in ("a", "b"):
        assert run("sample", "--checkpoint", ck, "--n", 3, "--seed", 5, "--out-dir", tmp_path / d) == EXIT_OK
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*.png"))
    assert len(files) == 3 * 3 + 1
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    for p in (tmp_path / "a" / "masks").glob("*.png"):
        with Image.open(p) as im:
            assert {tuple(c) for c in np.asarray(im).reshape(-1, 3)} <= LEGAL_RGB
    with Image.open(tmp_path / "a" / "raw" / "sample_00000_vein.png") as im:
        assert im.mode == "L" and im.size == (16, 16)


def test_sample_zero_writes_nothing(tmp_path, trained):
    out = tmp_path / "none"
    assert run("sample", "--checkpoint", trained / "checkpoint.ckpt", "--n", 0, "--seed", 1, "--out-dir", out) == 0
    assert not out.exists()


def test_corrupt_checkpoint_rejected_before_compute(tmp_path, trained):
    bad = tmp_path / "bad.ckpt"
    raw = (trained / "checkpoint.ckpt").read_bytes()
    bad.write_bytes(b"NOTACKPT" + raw[8:])
    out = tmp_path / "out"
    assert run("sample", "--checkpoint", bad, "--n", 2, "--seed", 1, "--out-dir", out) == EXIT_IO
    assert not out.exists()
    assert run("sample", "--checkpoint", tmp_path / "missing.ckpt", "--n", 2, "--seed", 1,
               "--out-dir", out) == EXIT_IO


def _mask_dir(path, masks):
    path.mkdir()
    for i, m in enumerate(masks):
        write_mask_png(path / f"m{i}.png", m)
    return path


def test_metrics_on_empty_masks(tmp_path):
    d = _mask_dir(tmp_path / "e", [AVMask.empty(8, 8)] * 3)
    assert run("metrics", d) == EXIT_OK
    rep = json.loads((d / "metrics.json").read_text())
    assert rep["aggregate"]["empty_sample_rate"] == 1.0
    jsonschema.validate(rep, METRICS_SCHEMA)


def test_metrics_on_y_mask_with_schema(tmp_path):
    d = _mask_dir(tmp_path / "y", [shapes.as_mask(shapes.y_junction()), shapes.crossing_pair()])
    out = tmp_path / "report"
    assert run("metrics", d, "--out-dir", out) == EXIT_OK
    rep = json.loads((out / "metrics.json").read_text())
    jsonschema.validate(rep, METRICS_SCHEMA)
    by_file = {f["file"]: f["report"] for f in rep["files"]}
    assert by_file["m0.png"]["artery"]["branch_point_count"] == 1
    assert by_file["m1.png"]["crossing_pixel_count"] == 1
    assert (out / "metrics.csv").read_text().count("\n") == 3
    assert (out / "metrics.png").exists()


def test_metrics_skips_nonconforming_files(tmp_path):
    d = _mask_dir(tmp_path / "mix", [shapes.as_mask(shapes.line())])
    Image.fromarray(np.zeros((4, 4), np.uint8)).save(d / "gray.png")
    (d / "junk.png").write_bytes(b"not a png")
    assert run("metrics", d) == EXIT_OK
    rep = json.loads((d / "metrics.json").read_text())
    jsonschema.validate(rep, METRICS_SCHEMA)
    assert [f["file"] for f in rep["files"]] == ["m0.png"]
    assert sorted(s["file"] for s in rep["skipped"]) == ["gray.png", "junk.png"]


def test_metrics_pixel_scores_against_reference(tmp_path):
    m = shapes.as_mask(shapes.line())
    pred = _mask_dir(tmp_path / "pred", [m])
    gt = _mask_dir(tmp_path / "gt", [m])
    assert run("metrics", pred, "--gt-dir", gt) == EXIT_OK
    rep = json.loads((pred / "metrics.json").read_text())
    assert rep["files"][0]["pixel"]["artery"]["accuracy"] == 1.0
    assert rep["files"][0]["pixel"]["vein"]["sensitivity"] is None
    assert rep["aggregate"]["pixel_mean"]["artery.sensitivity"] == 1.0


def test_metrics_missing_directory_is_io_error(tmp_path):
    assert run("metrics", tmp_path / "nope") == EXIT_IO


def test_compare_loss_structure(tmp_path, data_dir):
    out = tmp_path / "cmp"
    assert run("compare-loss", "--seed", 0, "--epochs", 1, "--data-dir", data_dir, "--out-dir", out,
               "--n-samples", 3, *TINY) == EXIT_OK
    summary = json.loads((out / "comparison.json").read_text())
    arms = summary["arms"]
    assert sorted(arms) == ["simple", "vessel"]
    s, v = arms["simple"], arms["vessel"]
    assert s["config_digest"] != v["config_digest"]
    assert s["shared_config_digest"] == v["shared_config_digest"]
    assert s["dataset_digest"] == v["dataset_digest"] == summary["dataset_digest"]
    assert s["training_steps"] == v["training_steps"] == 2
    for name in ("comparison.csv", "comparison.png", "loss_curves.png", "samples_simple.png", "samples_vessel.png"):
        assert (out / name).exists(), name
    assert len(list((out / "vessel" / "samples").glob("*.png"))) == 3


def test_gradcheck_subcommand():
    assert run("gradcheck", "--seeds", 2, "--skip-denoiser") == EXIT_OK


@pytest.mark.parametrize("argv", [
    [],
    ["synth-data", "--n", "3", "--out-dir", "x"],
    ["synth-data", "--seed", "1", "--n", "3", "--out-dir", "x", "--resolution", "30", "--depth", "2"],
    ["synth-data", "--seed", "1", "--n", "3", "--out-dir", "x", "--loss", "weighted"],
    ["synth-data", "--seed", "one", "--n", "3"],
    ["sample", "--n", "3"],
    ["bogus"],
])
def test_usage_errors(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    with pytest.raises(SystemExit) as info:
        sys.exit(main(argv))
    assert info.value.code == EXIT_USAGE


def test_bad_config_files(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert run("synth-data", "--config", bad, "--n", 1, "--out-dir", tmp_path) == EXIT_USAGE
    unknown = tmp_path / "unknown.json"
    unknown.write_text(json.dumps({"seed": 1, "learning_rate": 0.1}))
    assert run("synth-data", "--config", unknown, "--n", 1, "--out-dir", tmp_path) == EXIT_USAGE
    assert run("synth-data", "--config", tmp_path / "missing.json", "--n", 1, "--out-dir", tmp_path) == EXIT_USAGE


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "avdiffusion", "--help"], capture_output=True, text=True)
    assert r.returncode == 0
    for cmd in ("synth-data", "train", "sample", "metrics", "compare-loss", "gradcheck"):
        assert cmd in r.stdout
