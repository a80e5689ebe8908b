import json
import math

import pytest
import yaml

from splitfrozen.harness import (ConfigError, ExperimentConfig, load_config, parse_config,
                                 read_report_csv, run_experiment)
from splitfrozen.harness.config import preset_text
from splitfrozen.harness.cli import main
from splitfrozen.harness.runner import INCOMPLETE, build_report, check_ratios, report_csv, report_json
from splitfrozen.harness.toyruns import (centralized_train, fedlora_train, make_toy_dataset,
                                         splitlora_train)
from splitfrozen.datapart import PartitionSpec, partition
from splitfrozen.lora import TrainConfig
from splitfrozen.numerics import ToyConfig


def small_config_text(**overrides) -> str:
    doc = yaml.safe_load(preset_text("paper.gpt2"))
    doc["toy"]["num_samples"] = 60
    doc["rounds"] = 1
    doc.update(overrides)
    return yaml.safe_dump(doc, sort_keys=False)


def small_config(**overrides) -> ExperimentConfig:
    return parse_config(small_config_text(**overrides))


def write_config(tmp_path, **overrides):
    p = tmp_path / "cfg.yaml"
    p.write_text(small_config_text(**overrides))
    return str(p)


# -- config -------------------------------------------------------------------

def test_preset_loads_and_derives_preset_setup():
    cfg = load_config("paper.gpt2")
    assert cfg.epoch_rounds == 6 and cfg.num_microbatches == 60
    cluster = cfg.cluster_spec()
    assert len(cluster.devices) == 10
    assert cluster.utilization == pytest.approx(0.0341546, rel=1e-5)
    assert [m.label for m in cfg.modes] == ["iid", "dirichlet_0.1"]


def test_unknown_key_reports_line(tmp_path):
    text = preset_text("paper.gpt2").replace("  splitlora_cut: 3", "  splitlora_cut: 3\n  warp_drive: 9")
    line = text.splitlines().index("  warp_drive: 9") + 1
    with pytest.raises(ConfigError) as e:
        parse_config(text, "bad.yaml")
    assert f"bad.yaml:{line}:" in str(e.value)
    assert "warp_drive" in str(e.value)


@pytest.mark.parametrize("edit", [
    lambda d: d.update(schema_version=2),
    lambda d: d["cluster"].update(utilization=1.5),
    lambda d: d["cluster"].update(layer_bounds=[1, 9]),
    lambda d: d.update(schemes=["teleport"]),
    lambda d: d.update(rounds=-1),
    lambda d: d["modes"].append({"kind": "dirichlet", "alpha": 0}),
])
def test_invalid_configs_rejected(edit):
    doc = yaml.safe_load(preset_text("paper.gpt2"))
    edit(doc)
    with pytest.raises(ConfigError):
        parse_config(yaml.safe_dump(doc))


def test_malformed_yaml_and_unknown_preset():
    with pytest.raises(ConfigError):
        parse_config("cluster: [unclosed")
    with pytest.raises(ConfigError, match="no such config"):
        load_config("no.such.preset")


# -- cli ----------------------------------------------------------------------

def test_cli_exit_codes(tmp_path, capsys):
    assert main(["validate", "paper.gpt2"]) == 0
    assert "depths [1, 1, 1, 3, 3, 3, 3, 3, 3, 3]" in capsys.readouterr().out
    assert main(["validate", str(tmp_path / "missing.yaml")]) == 2
    bad = tmp_path / "bad.yaml"
    bad.write_text("schema_version: 1\nbogus: true\n")
    assert main(["run", str(bad)]) == 2
    assert main(["frobnicate"]) == 2
    garbage = tmp_path / "garbage.json"
    garbage.write_text("{}")
    assert main(["gantt", str(garbage)]) == 1


def test_cli_simulate_then_gantt_round_trip(tmp_path):
    out = tmp_path / "sim"
    assert main(["simulate", "paper.gpt2", "--out", str(out)]) == 0
    original = (out / "gantt" / "splitfrozen.svg").read_text()
    redrawn = tmp_path / "again.svg"
    assert main(["gantt", str(out / "schedules" / "splitfrozen.json"), "--out", str(redrawn)]) == 0
    assert redrawn.read_text() == original
    rows = read_report_csv((out / "simulation.csv").read_text())
    assert {r["scheme"] for r in rows} == {"splitfrozen", "cenlora", "fedlora", "splitlora"}


def test_cli_partition_writes_manifests(tmp_path):
    out = tmp_path / "parts"
    assert main(["partition", write_config(tmp_path), "--out", str(out), "--seed", "3"]) == 0
    names = sorted(p.name for p in (out / "manifests").iterdir())
    assert names == ["dirichlet_0.1_seed3.csv", "iid_seed3.csv"]


def test_cli_run_with_scheme_filter_and_record(tmp_path):
    out = tmp_path / "run"
    cfg = write_config(tmp_path)
    assert main(["run", cfg, "--out", str(out), "--scheme", "splitfrozen", "--scheme", "fedlora",
                 "--record"]) == 0
    rows = read_report_csv((out / "report.csv").read_text())
    assert {r["scheme"] for r in rows} == {"splitfrozen", "fedlora"}
    assert sorted(p.name for p in (out / "frames").iterdir()) == ["dirichlet_0.1_seed0.log", "iid_seed0.log"]
    assert not (out / INCOMPLETE).exists()


# -- runs and reports ---------------------------------------------------------

def test_report_contents_and_ratio_consistency(tmp_path):
    report = run_experiment(small_config(), tmp_path)
    csv_text = (tmp_path / "report.csv").read_text()
    assert csv_text.startswith("# splitfrozen report v1")
    rows = read_report_csv(csv_text)
    assert len(rows) == 4 * 2
    assert check_ratios(rows) == []
    for r in rows:
        assert math.isfinite(r["final_loss"])
    sf = report.row("splitfrozen", "iid")
    assert sf["device_flops_reduction_vs_fedlora"] >= 0.85
    assert sf["total_time_reduction_vs_best_baseline"] >= 0.45
    doc = json.loads((tmp_path / "report.json").read_text())
    assert doc["schema_version"] == 1 and doc["columns"] == report.columns
    assert set(doc["schedules"]) == {"splitfrozen", "cenlora", "fedlora", "splitlora"}


def test_tampered_ratio_is_detected():
    rows = build_report(small_config(schemes=["splitfrozen", "fedlora"])).rows
    rows[0]["device_flops_reduction_vs_fedlora"] += 0.01
    assert len(check_ratios(rows)) == 1


def test_runs_are_byte_reproducible(tmp_path):
    cfg = small_config()
    run_experiment(cfg, tmp_path / "a")
    run_experiment(cfg, tmp_path / "b")
    for name in ("report.csv", "report.json", "schedules/splitfrozen.json", "gantt/fedlora.svg",
                 "manifests/iid_seed0.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_seeds_change_data_not_schedules():
    a = build_report(small_config(seeds=[1], schemes=["splitfrozen"]))
    b = build_report(small_config(seeds=[2], schemes=["splitfrozen"]))
    assert a.manifests["dirichlet_0.1_seed1"] != b.manifests["dirichlet_0.1_seed2"]
    assert a.simulations["splitfrozen"].schedule.events == b.simulations["splitfrozen"].schedule.events
    assert a.row("splitfrozen", "iid")["final_loss"] != b.row("splitfrozen", "iid")["final_loss"]


def test_zero_rounds_gives_empty_report(tmp_path):
    report = run_experiment(small_config(rounds=0), tmp_path)
    assert report.rows == []
    assert read_report_csv((tmp_path / "report.csv").read_text()) == []
    assert json.loads(report_json(report))["rows"] == []


def test_failed_run_leaves_incomplete_marker(tmp_path, monkeypatch):
    import splitfrozen.harness.runner as runner

    def boom(*a, **k):
        raise RuntimeError("simulated crash")
    monkeypatch.setattr(runner, "simulate_all", boom)
    with pytest.raises(RuntimeError):
        run_experiment(small_config(), tmp_path)
    assert "simulated crash" in (tmp_path / INCOMPLETE).read_text()
    assert not (tmp_path / "report.csv").exists()


def test_report_csv_floats_round_trip():
    report = build_report(small_config(schemes=["splitfrozen", "splitlora"]))
    rows = read_report_csv(report_csv(report))
    for got, want in zip(rows, report.rows):
        for k, v in want.items():
            assert got[k] == v


# -- toy baselines ------------------------------------------------------------

TOY = ToyConfig(depth=4, width=8, num_classes=3, seq_len=2, seed=1)


def toy_data():
    x, y = make_toy_dataset(TOY, 48, seed=0)
    return x, y, partition(y, PartitionSpec(4, "dirichlet", alpha=0.5, seed=0))


def test_toy_dataset_shapes_and_balance():
    x, y = make_toy_dataset(TOY, 30, seed=2)
    assert x.shape == (60, 8)
    assert sorted(y.tolist()) == sorted([0, 1, 2] * 10)
    with pytest.raises(ValueError):
        make_toy_dataset(TOY, 0)


def test_toy_baselines_learn():
    x, y, shards = toy_data()
    tc = TrainConfig(learning_rate=0.02)
    runs = [
        centralized_train(TOY, x, y, tc, rounds=6, lora_rank=2, pooled_batch_size=8),
        fedlora_train(TOY, x, y, shards, tc, rounds=6, lora_rank=2, device_batch_size=4),
        splitlora_train(TOY, x, y, shards, tc, rounds=6, lora_rank=2, cut=2, device_batch_size=4),
    ]
    for r in runs:
        assert len(r.round_losses) == 6
        assert r.final_loss < r.round_losses[0]
        assert r.model.base_digest() == type(r.model)(TOY).base_digest()


def test_fedlora_single_device_is_local_training():
    x, y, _ = toy_data()
    one = partition(y, PartitionSpec(1))
    tc = TrainConfig(learning_rate=0.02, optimizer="sgd")
    a = fedlora_train(TOY, x, y, one, tc, rounds=2, lora_rank=2, device_batch_size=4)
    b = fedlora_train(TOY, x, y, one, tc, rounds=2, lora_rank=2, device_batch_size=4)
    assert a.step_losses == b.step_losses
    assert len(a.step_losses) == 2 * 12
