"""CLI and engine orchestration: commands, exit codes, workspace discipline."""

import json
import os
from pathlib import Path

import pytest

from dataevolver.cli import main, parse_args
from dataevolver.config import (
    ENV_ENDPOINT,
    ENV_PARALLELISM,
    ConfigError,
    default_config_document,
    load_config,
)
from dataevolver.engine import Engine
from dataevolver.store import ArtifactStore


@pytest.fixture
def workspace(tmp_path):
    ws = tmp_path / "ws"
    assert main(["init", "--workspace", str(ws)]) == 0
    return ws


def small_config(ws: Path, **overrides) -> Path:
    doc = default_config_document()
    doc["simulator"]["objects"] = ["obj_01", "obj_02", "obj_03"]
    doc["simulator"]["samples_per_round"] = 4
    doc["simulator"]["render_size"] = 48
    doc["round_defaults"]["expansion_budget"] = 2
    doc["splits"] = {"seed": 0, "n_train_objects": 1, "n_val_objects": 1,
                     "n_test_objects": 1, "target_views_per_object": 7}
    doc.update(overrides)
    path = ws / "config.json"
    path.write_text(json.dumps(doc), encoding="utf-8")
    return path


# -- argument parsing ---------------------------------------------------------

def test_parse_run_round():
    args = parse_args(["run-round", "--config", "e.cfg"])
    assert args.command == "run-round"
    assert args.config == "e.cfg"


def test_parse_report_round():
    args = parse_args(["report", "--round", "3"])
    assert args.round == 3
    assert args.workspace == "."


def test_unknown_command_is_usage_error():
    assert main(["frobnicate"]) == 2


def test_missing_required_flag_is_usage_error():
    assert main(["run-round"]) == 2


# -- init ---------------------------------------------------------------------

def test_init_creates_skeleton(tmp_path):
    ws = tmp_path / "fresh"
    assert main(["init", "--workspace", str(ws)]) == 0
    assert (ws / "store").is_dir()
    assert (ws / "exports").is_dir()
    assert (ws / "config.json").is_file()
    json.loads((ws / "config.json").read_text())


# -- run-round -----------------------------------------------------------------

def test_run_round_smoke(workspace):
    cfg = small_config(workspace)
    assert main(["run-round", "--config", str(cfg), "--workspace", str(workspace)]) == 0
    store = ArtifactStore(workspace / "store")
    assert store.round_ids() == [0]
    record = store.get_round(0)
    assert record.eval_report_ref is not None
    report = store.get_json(record.eval_report_ref)
    assert report["round_id"] == 0
    assert set(report["per_angle"]) == {str(b) for b in
                                        (45, 90, 135, 180, 225, 270, 315, 360)}


def test_round_ids_advance(workspace):
    cfg = small_config(workspace)
    main(["run-round", "--config", str(cfg), "--workspace", str(workspace)])
    main(["run-round", "--config", str(cfg), "--workspace", str(workspace)])
    store = ArtifactStore(workspace / "store")
    assert store.round_ids() == [0, 1]


def test_inspect_unknown_sample_exits_one(workspace, capsys):
    rc = main(["inspect", "--sample", "missing", "--workspace", str(workspace)])
    assert rc == 1
    assert "unknown sample" in capsys.readouterr().err


def test_inspect_prints_trace(workspace, capsys):
    cfg = small_config(workspace)
    main(["run-round", "--config", str(cfg), "--workspace", str(workspace)])
    store = ArtifactStore(workspace / "store")
    sample = sorted(store.sample_ids())[0]
    capsys.readouterr()
    assert main(["inspect", "--sample", sample, "--workspace", str(workspace)]) == 0
    out = capsys.readouterr().out
    assert sample in out
    assert "review" in out


def test_report_requires_rounds(workspace, capsys):
    rc = main(["report", "--all", "--workspace", str(workspace)])
    assert rc == 1
    assert "no rounds" in capsys.readouterr().err


def test_export_writes_manifests(workspace):
    cfg = small_config(workspace)
    main(["run-round", "--config", str(cfg), "--workspace", str(workspace)])
    assert main(["export", "--config", str(cfg), "--workspace", str(workspace)]) == 0
    for split in ("train", "val", "test"):
        path = workspace / "exports" / f"image_pairs_{split}.jsonl"
        assert path.is_file()
        head = json.loads(path.read_text().splitlines()[0])
        assert head["schema"] == "image_pairs"


def test_export_diagnostics_mode(workspace):
    cfg = small_config(workspace)
    main(["run-round", "--config", str(cfg), "--workspace", str(workspace)])
    assert main(["export", "--config", str(cfg), "--workspace", str(workspace),
                 "--mode", "diagnostics"]) == 0
    manifest = (workspace / "exports" / "diagnostics.jsonl").read_text()
    assert json.loads(manifest.splitlines()[0])["schema"] == "diagnostics"


def test_replay_reproduces_routes(workspace, capsys):
    cfg = small_config(workspace)
    main(["run-round", "--config", str(cfg), "--workspace", str(workspace)])
    store = ArtifactStore(workspace / "store")
    sample = sorted(store.sample_ids())[1]
    rc = main(["replay", "--sample", sample, "--config", str(cfg),
               "--workspace", str(workspace)])
    assert rc == 0
    assert "MATCH" in capsys.readouterr().out


def test_malformed_config_aborts_before_side_effects(workspace, capsys):
    bad = workspace / "bad.json"
    bad.write_text("{not json", encoding="utf-8")
    before = sorted(p.name for p in (workspace / "store").rglob("*"))
    rc = main(["run-round", "--config", str(bad), "--workspace", str(workspace)])
    assert rc == 1
    assert "error:" in capsys.readouterr().err
    after = sorted(p.name for p in (workspace / "store").rglob("*"))
    assert before == after


def test_invalid_gate_chain_rejected_at_load(workspace):
    doc = default_config_document()
    doc["rounds"] = [{"feedback": False, "inner_gate": True, "dual_gate": False}]
    path = workspace / "chain.json"
    path.write_text(json.dumps(doc), encoding="utf-8")
    with pytest.raises(ConfigError, match="chain"):
        load_config(path, workspace=workspace)


# -- config and environment overrides ------------------------------------------------

def test_env_overrides_endpoint_and_parallelism(workspace, monkeypatch):
    cfg_path = small_config(workspace)
    monkeypatch.setenv(ENV_ENDPOINT, "http://override.local/review")
    monkeypatch.setenv(ENV_PARALLELISM, "2")
    cfg = load_config(cfg_path, workspace=workspace)
    assert cfg.reviewer.endpoint == "http://override.local/review"
    assert cfg.reviewer.parallelism == 2


def test_effective_config_is_persisted_per_round(workspace):
    cfg_path = small_config(workspace)
    cfg = load_config(cfg_path, workspace=workspace)
    engine = Engine(cfg)
    engine.run_round(0)
    record = engine.store.get_round(0)
    stored = engine.store.get_json(record.config_ref)
    assert stored["effective_config"] == cfg.raw
    assert stored["round_id"] == 0


def test_side_effects_confined_to_workspace(tmp_path, monkeypatch):
    outside = tmp_path / "outside"
    outside.mkdir()
    monkeypatch.chdir(outside)
    ws = tmp_path / "inside"
    main(["init", "--workspace", str(ws)])
    cfg = small_config(ws)
    main(["run-round", "--config", str(cfg), "--workspace", str(ws)])
    main(["export", "--config", str(cfg), "--workspace", str(ws)])
    assert list(outside.iterdir()) == []


def test_engine_gathers_latest_accepted_views(workspace):
    cfg_path = small_config(workspace)
    cfg = load_config(cfg_path, workspace=workspace)
    engine = Engine(cfg)
    engine.run_round(0)
    samples = engine.gather_export_samples()
    assert samples, "at least one accepted object expected"
    for sample in samples:
        for angle, ref in sample.view_renders.items():
            assert ":" in ref  # kind:digest form
