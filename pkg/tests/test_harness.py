# tests/test_harness.py
from __future__ import annotations
import json
from pathlib import Path

import pytest

from hybrid.cluster import CLIMATE_COMPUTE, HEP_COMPUTE, RunLog, RunRecord
from hybrid.errors import ConfigError
from hybrid.harness import (
    Cell, ExperimentConfig, apply_override, config_to_dict, git_blob_sha1, load_config, make_dataset, parse_config,
    read_run, report, run_cell, solver_for, sweep_groups, sweep_scaling, time_to_loss, write_manifest,
)
from hybrid.solvers import ADAM, SGD_MOMENTUM

ROOT = Path(__file__).resolve().parent.parent
TINY = [
    "model.input_shape=[3, 16, 16]", "model.filters=4", "data.n=200", "cluster.total_nodes=10",
    "iterations=12", "logging.level=\"WARNING\"",
]


@pytest.mark.parametrize("name", ["hep_mini.json", "climate_mini.json", "hep_scaling.json"])
def test_shipped_configs_load_and_round_trip(name):
    cfg, text = load_config(ROOT / "config" / name)
    assert json.loads(text)
    assert parse_config(config_to_dict(cfg)) == cfg


def test_defaults_round_trip_including_compute_table():
    cfg, _ = load_config(None, ['compute={"seconds_per_sample": 0.001, "efficiency": {"1": 0.5, "8": 1.0}}'])
    assert cfg.compute.efficiency == {1: 0.5, 8: 1.0}
    again = parse_config(json.loads(json.dumps(config_to_dict(cfg))))
    assert again == cfg
    assert ExperimentConfig().validate() == parse_config({})


def test_unknown_key_names_the_field(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"cluster": {"grups": [2]}}))
    with pytest.raises(ConfigError) as exc:
        load_config(path)
    assert exc.value.field == "cluster.grups"
    with pytest.raises(ConfigError) as exc:
        load_config(None, ["solver.moment=0.5"])
    assert exc.value.field == "solver.moment"


def test_malformed_and_missing_config(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{\"iterations\": 10,")
    with pytest.raises(ConfigError):
        load_config(bad)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")
    with pytest.raises(ConfigError):
        load_config(None, ["iterations=\"ten\""])
    with pytest.raises(ConfigError):
        load_config(None, ["cluster.total_batch=6", "cluster.groups=4"])
    with pytest.raises(ConfigError):
        load_config(None, ["model.name=resnet"])
    with pytest.raises(ConfigError):
        load_config(None, ["no_equals_sign"])


def test_overrides():
    cfg, _ = load_config(ROOT / "config" / "hep_mini.json",
                         ["cluster.groups=4", "solver.lr=0.01", "model.name=climate_mini"])
    assert cfg.cluster.groups == [4]
    assert cfg.solver.lr == 0.01
    assert cfg.model.name == "climate_mini"
    data = {"model": {"name": "hep_mini"}}
    with pytest.raises(ConfigError):
        apply_override(data, "model.name.x=1")


def test_momentum_knob_maps_to_solver_kind():
    cfg = parse_config({"solver": {"kind": SGD_MOMENTUM}})
    assert solver_for(cfg, 0.4).momentum == 0.4
    cfg = parse_config({"solver": {"kind": ADAM}})
    s = solver_for(cfg, 0.7, lr=1e-4)
    assert (s.beta1, s.lr) == (0.7, 1e-4)


def test_git_blob_hash_and_manifest(tmp_path):
    assert git_blob_sha1(b"") == "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391"
    assert git_blob_sha1(b"hello\n") == "ce013625030ba8dba906f756967f9e9ca394464a"
    cfg, text = load_config(None, ["seed=7"])
    path = write_manifest(tmp_path, cfg, text, "train", 1)
    manifest = json.loads(path.read_text())
    assert manifest["seed"] == 7
    assert manifest["inputs"]["config"] == git_blob_sha1(text.encode())
    assert parse_config(manifest["config"]) == cfg


def _series(losses, dt=1.0):
    recs = [RunRecord(i, 0, i * dt, (i + 1) * dt, l, i + 1, 0, 1) for i, l in enumerate(losses)]
    return RunLog(recs)


def test_time_to_loss():
    falling = _series([1.0, 0.8, 0.6, 0.4, 0.2, 0.1, 0.05, 0.02, 0.01, 0.0])
    low = _series([0.01] * 6)
    flat = _series([0.9] * 6)
    rows = {r.config: r for r in time_to_loss({"falling": falling, "low": low, "flat": flat}, 0.05)}
    assert rows["low"].seconds == 1.0
    assert rows["flat"].seconds is None and rows["flat"].display == "never"
    # trailing means: ..., [0.2,0.1,0.05,0.02,0.01] -> 0.076, [0.1,...,0.0] -> 0.036
    assert rows["falling"].seconds == 10.0
    times = [time_to_loss({"f": falling}, t)[0].seconds for t in (0.05, 0.2, 0.5, 2.0)]
    assert times == sorted(times, reverse=True)


def test_scaling_sweep_and_report(tmp_path):
    cfg, _ = load_config(None, TINY + ["sweep.nodes=[1, 2, 4]", "sweep.groups=[1, 2]"])
    rows = sweep_scaling(cfg, "strong", tmp_path, window=4)
    assert {(r.mode, r.nodes) for r in rows} == {("sync", 1), ("sync", 2), ("sync", 4),
                                                 ("hybrid-2", 2), ("hybrid-2", 4)}
    assert (tmp_path / "scaling_strong.csv").exists() and (tmp_path / "scaling_strong.svg").exists()
    rl, payload = read_run(tmp_path / "strong_hybrid-2_n4_r0")
    assert rl.groups == 2 and payload["cell"]["nodes"] == 4
    assert len(rl.records) == 12
    summary = report(tmp_path, window=4)
    assert summary["runs"] == 5
    assert summary["strong.rows"] == 5


def test_group_sweep_writes_time_to_loss(tmp_path):
    cfg, _ = load_config(None, TINY + ["sweep.groups=[1, 2]", "sweep.momentum_grid=[0.0, 0.4]",
                                       "sweep.lr_grid=[0.001]", "sweep.target_loss=10.0"])
    rows = sweep_groups(cfg, tmp_path)
    assert [r.config for r in rows] == ["groups_sync_n10_m0.9_lr0.001_r0",
                                        "groups_hybrid-2_n10_m0_lr0.001_r0",
                                        "groups_hybrid-2_n10_m0.4_lr0.001_r0"]
    assert all(r.seconds is not None for r in rows)
    assert (tmp_path / "time_to_loss.csv").read_text().startswith("config,seconds_to_target")


def test_run_cell_is_reproducible(tmp_path):
    cfg, _ = load_config(None, TINY + ["cluster.execute_math=false"])
    cell = Cell("train", 10, 2, seed=3)
    a = run_cell(cfg, cell, None, tmp_path / "a", execute_math=False)
    b = run_cell(cfg, cell, None, tmp_path / "b", execute_math=False)
    assert (tmp_path / "a" / cell.key / "runlog.csv").read_bytes() == \
           (tmp_path / "b" / cell.key / "runlog.csv").read_bytes()
    assert [r.sim_time_end_s for r in a.records] == [r.sim_time_end_s for r in b.records]


def test_partial_compute_override_keeps_the_model_profile():
    cfg, _ = load_config(ROOT / "config" / "climate_mini.json", ["compute.straggler_prob=0.0"])
    model = cfg.compute_model()
    assert model.straggler_prob == 0.0
    assert model.seconds_per_sample == CLIMATE_COMPUTE.seconds_per_sample
    assert model.overhead_fraction == CLIMATE_COMPUTE.overhead_fraction
    hep, _ = load_config(ROOT / "config" / "hep_mini.json", ["compute.checkpoint_seconds=0.5"])
    assert hep.compute_model().seconds_per_sample == HEP_COMPUTE.seconds_per_sample
    assert hep.compute_model().checkpoint_seconds == 0.5
    with pytest.raises(ConfigError) as exc:
        load_config(None, ["compute.straggler=0.0"])
    assert exc.value.field == "compute.straggler"


def test_missing_dataset_path_is_a_config_error(tmp_path):
    cfg, _ = load_config(None, [*TINY, f'data.path="{tmp_path / "absent.dlsd"}"'])
    with pytest.raises(ConfigError) as exc:
        make_dataset(cfg)
    assert exc.value.field == "data.path"
