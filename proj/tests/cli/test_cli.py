import hashlib
import json
import os
import subprocess
from pathlib import Path

import pytest

CLI = os.environ["MMVAE_CLI"]
DESK = json.loads(Path(os.environ["MMVAE_DESK_CONFIG"]).read_text())


def run(*args, expect=0):
    proc = subprocess.run([CLI, *map(str, args)], capture_output=True, text=True)
    assert proc.returncode == expect, proc.stderr
    return proc


@pytest.fixture(scope="module")
def config(tmp_path_factory):
    cfg = dict(DESK)
    cfg["test"] = {"bootstrap": {"replicates": 4}}
    cfg["meta"] = {"bootstrap_replicates": 20, "null_replicates": 9}
    path = tmp_path_factory.mktemp("cfg") / "config.json"
    path.write_text(json.dumps(cfg))
    return path


def pipeline(root, config, seed):
    run("simulate", "-c", config, "-s", seed, "-o", root / "sim")
    data = root / "sim" / "dataset.txt"
    run("fit", "-c", config, "-s", seed, "-d", data, "-o", root / "fit")
    model = root / "fit" / "model.ckpt"
    run("test", "-c", config, "-s", seed, "-d", data, "-m", model, "-o", root / "test")
    run("effect", "-c", config, "-s", seed, "-d", data, "-m", model, "-o", root / "effect")
    return data, model


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def result_files(root):
    return {p.relative_to(root).as_posix(): digest(p) for p in sorted(root.rglob("*")) if p.is_file()
            and p.name != "manifest.json"}


def test_pipeline_end_to_end_and_deterministic(tmp_path, config):
    data, model = pipeline(tmp_path / "a", config, 11)
    pipeline(tmp_path / "b", config, 11)
    assert result_files(tmp_path / "a") == result_files(tmp_path / "b")

    effects = (tmp_path / "a" / "effect" / "effects.tsv").read_text().splitlines()
    assert effects[0].startswith("instrument\tmax_score\tmean_difference")
    assert len(effects) == 3

    manifest = json.loads((tmp_path / "a" / "fit" / "manifest.json").read_text())
    for key in ("command", "config_hash", "dataset_hash", "seed", "software_version", "wall_time_seconds", "outputs"):
        assert key in manifest
    assert manifest["seed"] == 11
    assert manifest["dataset_hash"] == digest(data)
    listed = {o["path"]: o["sha256"] for o in manifest["outputs"]}
    assert listed["model.ckpt"] == digest(model)

    other = json.loads((tmp_path / "b" / "fit" / "manifest.json").read_text())
    manifest.pop("wall_time_seconds")
    other.pop("wall_time_seconds")
    assert manifest == other


def test_inject_meta_report(tmp_path, config):
    data, model = pipeline(tmp_path, config, 5)
    run("inject", "-c", config, "-d", data, "--rate", 2, "--period", 1, "-o", tmp_path / "inj")
    inj = json.loads((tmp_path / "inj" / "manifest.json").read_text())
    assert inj["details"]["injection"]["points_added"] > 0
    run("meta", "-c", config, "-d", data, "-o", tmp_path / "meta")
    assert (tmp_path / "meta" / "instruments.tsv").exists()
    run("report", "-c", config, "-m", model, "-d", data, "--test-dir", tmp_path / "test", "-o", tmp_path / "rep")
    for name in ("figure_loss_trace.tsv", "figure_trajectories.tsv", "figure_lambda_ecdf.tsv"):
        assert (tmp_path / "rep" / name).stat().st_size > 0
    ecdf = (tmp_path / "rep" / "figure_lambda_ecdf.tsv").read_text().splitlines()
    assert ecdf[0] == "lambda\tecdf\tchi2_cdf\tobserved"
    assert len(ecdf) == 1 + 4 + 1


def test_exit_codes(tmp_path, config):
    run("frobnicate", expect=2)
    run("fit", "-o", tmp_path, expect=2)
    bad = tmp_path / "bad.txt"
    bad.write_text("not a dataset\n")
    proc = run("fit", "-c", config, "-d", bad, "-o", tmp_path / "x", expect=1)
    assert "error" in proc.stderr
    broken = tmp_path / "broken.json"
    broken.write_text('{"train": {"epochz": 1}}')
    run("simulate", "-c", broken, "-o", tmp_path / "y", expect=1)
