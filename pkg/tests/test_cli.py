import filecmp
import json
from pathlib import Path

import pytest

from metadvfs import cli

from conftest import CATALOG_DIR

CATALOG = str(CATALOG_DIR / "toy6.json")

CONFIG = {
    "samples_per_combination": 60,
    "tau_cap": 2,
    "adapt_support_samples": 40,
    "q": {
        "train_steps": 60,
        "hidden_dims": [8],
        "steps_per_input": 2,
        "target_update_interval": 30,
        "fqe_iterations": 8,
        "fqe_grad_steps": 4,
    },
    "meta": {"outer_steps": 5, "inner_steps": 2},
    "eval": {"episodes": 1, "horizon": 40, "seeds": [0]},
}


@pytest.fixture(scope="module")
def config_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "run.json"
    path.write_text(json.dumps(CONFIG))
    return str(path)


def run(stage, out, config_path, *extra):
    return cli.main(
        [stage, "--config", config_path, "--catalog", CATALOG, "--seed", "3", "--out", str(out), *extra]
    )


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory, config_path):
    out = tmp_path_factory.mktemp("run")
    assert run("collect", out, config_path) == 0
    assert run("define-tasks", out, config_path) == 0
    return out


def test_collect_writes_datasets_and_manifest(run_dir):
    manifest = json.loads((run_dir / "manifest.json").read_text())
    assert "collect" in manifest["stages"]
    datasets = list((run_dir / "datasets").glob("*.jsonl"))
    assert len(datasets) == 6
    for rel, digest in manifest["stages"]["collect"]["artifacts"].items():
        assert (run_dir / rel).exists()
        assert len(digest) == 64


def test_define_tasks_writes_forest_and_models(run_dir):
    doc = json.loads((run_dir / "forest.json").read_text())
    assert doc["tau_cap"] == 2
    members = sorted(m for n in doc["nodes"] if n["id"] in doc["roots"] for m in n["members"])
    assert len(members) == 6
    assert (run_dir / "trace.jsonl").exists()
    assert list((run_dir / "models").glob("task_*.npz"))


def test_rerun_is_noop(run_dir, config_path, capsys):
    before = (run_dir / "manifest.json").read_bytes()
    assert run("collect", run_dir, config_path) == 0
    assert (run_dir / "manifest.json").read_bytes() == before
    assert "skipping" in capsys.readouterr().err


def test_changed_seed_invalidates_stage(tmp_path, config_path):
    out = tmp_path / "r"
    assert run("collect", out, config_path) == 0
    sig1 = json.loads((out / "manifest.json").read_text())["stages"]["collect"]["signature"]
    assert cli.main(["collect", "--config", config_path, "--catalog", CATALOG,
                     "--seed", "4", "--out", str(out)]) == 0
    sig2 = json.loads((out / "manifest.json").read_text())["stages"]["collect"]["signature"]
    assert sig1 != sig2


def test_missing_stage_errors(tmp_path, config_path, capsys):
    out = tmp_path / "empty"
    assert run("define-tasks", out, config_path) == 1
    assert "collect" in capsys.readouterr().err


def test_adapt_requires_new_catalog(run_dir, config_path, capsys):
    assert run("meta-train", run_dir, config_path) == 0
    assert run("adapt", run_dir, config_path) == 1
    assert "new-catalog" in capsys.readouterr().err


def test_full_pipeline_and_reports(run_dir, config_path):
    assert run("adapt", run_dir, config_path, "--new-catalog", CATALOG) == 0
    assert run("eval", run_dir, config_path, "--methods", "schedutil,metadvfs") == 0
    assert run("sweep-tau", run_dir, config_path, "--tau-values", "1,2") == 0
    assert run("report", run_dir, config_path) == 0
    assert (run_dir / "comparison_cross.csv").exists()
    assert (run_dir / "tau_sweep.csv").exists()
    assert (run_dir / "effectiveness.csv").exists()
    summary = json.loads((run_dir / "summary.json").read_text())
    assert set(summary["stages_completed"]) >= {"collect", "define-tasks", "meta-train"}


def test_unknown_method_errors(run_dir, config_path, capsys):
    assert run("eval", run_dir, config_path, "--methods", "schedutil,bogus") == 1
    assert "bogus" in capsys.readouterr().err


def test_timestamps_stay_out_of_the_manifest(run_dir):
    manifest = json.loads((run_dir / "manifest.json").read_text())
    blob = json.dumps(manifest)
    assert "time" not in blob and ":" not in "".join(
        v for rec in manifest["stages"].values() for v in [rec["signature"]]
    )
    assert (run_dir / "run.log").exists()  # wall-clock lines live here instead


def test_two_runs_byte_identical(tmp_path, config_path):
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert run("collect", out, config_path) == 0
        assert run("define-tasks", out, config_path) == 0
        assert run("sweep-tau", out, config_path, "--tau-values", "1,2") == 0
        outs.append(out)
    cmp = filecmp.dircmp(*outs, ignore=["run.log"])

    def assert_same(dc):
        assert not dc.diff_files and not dc.left_only and not dc.right_only
        for sub in dc.subdirs.values():
            assert_same(sub)

    assert_same(cmp)
