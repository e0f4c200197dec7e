import json
import os

import pytest

from genmvi.cli import main

TINY = {
    "seed": 5,
    "phantom": {"n_subjects": 3, "shape": [2, 64, 64], "seed": 5},
    "sampler": {"per_subject_target": 4, "test_stride": 16, "seed": 5},
    "network": {"width": 2, "max_epochs": 2, "batch_size": 4, "base_lr": 1e-3},
}


@pytest.fixture
def tiny(tmp_path, monkeypatch):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({**TINY, "paths": {"workspace": str(tmp_path / "ws")}}))
    monkeypatch.delenv("MVI_WORKSPACE", raising=False)
    return cfg, tmp_path / "ws"


def _bytes_under(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_phantom_writes_all_subjects_and_refuses_overwrite(tiny):
    cfg, ws = tiny
    assert main(["phantom", "--config", str(cfg), "-q"]) == 0
    subjects = sorted(p for p in (ws / "dataset").iterdir() if p.is_dir())
    assert len(subjects) == 3
    for d in subjects:
        assert len(list(d.glob("*.qvol"))) == 7
    first = _bytes_under(ws / "dataset")
    assert main(["phantom", "--config", str(cfg), "-q"]) == 1
    assert main(["phantom", "--config", str(cfg), "--force", "-q"]) == 0
    assert _bytes_under(ws / "dataset") == first


def test_workspace_env_var_overrides_config(tiny, tmp_path, monkeypatch):
    cfg, _ = tiny
    monkeypatch.setenv("MVI_WORKSPACE", str(tmp_path / "elsewhere"))
    assert main(["phantom", "--config", str(cfg), "-q"]) == 0
    assert (tmp_path / "elsewhere" / "dataset" / "manifest.json").exists()


def test_run_without_dataset_fails_with_stage_tag(tiny, capsys):
    cfg, _ = tiny
    assert main(["run", "--config", str(cfg), "-q"]) == 1
    assert "[preprocess]" in capsys.readouterr().err


def test_single_fold_then_resume_does_not_retrain(tiny):
    cfg, ws = tiny
    assert main(["phantom", "--config", str(cfg), "-q"]) == 0
    assert main(["run", "--config", str(cfg), "--fold", "sub-01", "--deterministic", "-q"]) == 0
    done = sorted(p.name for p in (ws / "folds").iterdir())
    assert done == ["sub-01"]
    manifest = json.loads((ws / "run_manifest.json").read_text())
    assert not manifest["complete"] and list(manifest["fold_results"]) == ["sub-01"]
    ck = ws / "folds" / "sub-01" / "model.bin"
    stamp = ck.stat().st_mtime_ns
    assert main(["run", "--config", str(cfg), "--deterministic", "-q"]) == 0
    assert ck.stat().st_mtime_ns == stamp
    manifest = json.loads((ws / "run_manifest.json").read_text())
    assert manifest["complete"]
    for name in ("table1.csv", "scatter_fig3.csv", "box_fig4.csv", "box_fig5.csv"):
        assert (ws / "report" / name).exists()
    assert set(manifest) >= {"config_hash", "folds", "scale", "fold_results"}
    rec = manifest["fold_results"]["sub-00"]
    assert set(rec) >= {"train_log", "normalization", "checkpoint"}


def test_unknown_fold_is_an_error(tiny):
    cfg, _ = tiny
    main(["phantom", "--config", str(cfg), "-q"])
    assert main(["run", "--config", str(cfg), "--fold", "sub-99", "-q"]) == 1


def test_deterministic_runs_are_bit_identical(tmp_path, monkeypatch):
    monkeypatch.delenv("MVI_WORKSPACE", raising=False)
    outs = []
    for name in ("a", "b"):
        cfg = tmp_path / f"{name}.json"
        cfg.write_text(json.dumps({**TINY, "paths": {"workspace": str(tmp_path / name)}}))
        assert main(["phantom", "--config", str(cfg), "-q"]) == 0
        assert main(["run", "--config", str(cfg), "--deterministic", "-q"]) == 0
        outs.append(tmp_path / name)
    for sub in ("folds", "report"):
        a, b = _bytes_under(outs[0] / sub), _bytes_under(outs[1] / sub)
        assert a.keys() == b.keys() and a == b


def test_report_subcommand_recomputes_identical_files(tiny):
    cfg, ws = tiny
    main(["phantom", "--config", str(cfg), "-q"])
    main(["run", "--config", str(cfg), "--deterministic", "-q"])
    before = _bytes_under(ws / "report")
    os.remove(ws / "report" / "table1.csv")
    assert main(["report", "--config", str(cfg), "-q"]) == 0
    assert _bytes_under(ws / "report") == before


def test_seed_flag_changes_the_cohort(tiny):
    cfg, ws = tiny
    main(["phantom", "--config", str(cfg), "-q"])
    a = (ws / "dataset" / "sub-00" / "r1.bin").read_bytes()
    main(["phantom", "--config", str(cfg), "--seed", "77", "--force", "-q"])
    assert (ws / "dataset" / "sub-00" / "r1.bin").read_bytes() != a
    assert main(["phantom", "--config", str(cfg), "--seed", "-1", "--force", "-q"]) == 1


def test_verify_passes_on_a_fresh_checkout(capsys):
    assert main(["verify"]) == 0
    out = capsys.readouterr().out
    assert "ALL ORACLES PASS" in out and "FAIL " not in out


def test_bad_jobs_value_is_a_usage_error(tiny):
    cfg, _ = tiny
    assert main(["run", "--config", str(cfg), "--jobs", "0"]) == 2
