import csv
import io
import json

import pytest
from django.core.management import CommandError, call_command

from cli.config import config_hash, deep_merge, key_line, load_config, parse_config_text
from core.exceptions import ConfigError

# small enough to generate, train and evaluate in a few seconds
TINY = {
    "env": {"num_episodes": 3, "episode_len": 40, "H": 8},
    "train": {"epochs": 1, "batch_size": 32, "d_max": 3, "hidden": [16]},
}


def write_config(tmp_path, data, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(data, indent=2))
    return path


def run(*args):
    """Run `faster` and return its parsed JSON summary line."""
    out = io.StringIO()
    call_command("faster", *[str(a) for a in args], stdout=out)
    return json.loads(out.getvalue().strip().splitlines()[-1])


def read_csv(path):
    with open(path, newline="") as handle:
        return list(csv.DictReader(handle))


class TestConfigLoading:
    """Defaults, merging, validation and hashing."""

    def test_defaults_are_valid(self):
        raw, cfg = load_config()
        assert raw["env"]["H"] == 50
        assert raw["train"]["loss_ratio_target"] == pytest.approx(4.5)
        assert cfg["schedule"]["N"] == 10
        timing = cfg["timing"]["timing"]
        assert timing.horizon == 50
        assert timing.alpha == pytest.approx(0.6)

    def test_deep_merge_keeps_sibling_keys(self):
        merged = deep_merge({"a": {"x": 1, "y": 2}, "b": 3}, {"a": {"y": 5}})
        assert merged == {"a": {"x": 1, "y": 5}, "b": 3}

    def test_file_overrides_and_seed_flag(self, tmp_path):
        path = write_config(tmp_path, {"seed": 4, "schedule": {"N": 5}})
        raw, cfg = load_config(path)
        assert raw["seed"] == 4
        assert cfg["timing"]["timing"].N == 5
        raw, _ = load_config(path, seed=9)
        assert raw["seed"] == 9

    def test_unknown_key_reports_path_and_line(self, tmp_path):
        path = tmp_path / "config.json"
        path.write_text('{\n  "env": {\n    "H": 50,\n    "bogus": 1\n  }\n}\n')
        with pytest.raises(ConfigError) as exc:
            load_config(path)
        assert exc.value.path == "env.bogus"
        assert exc.value.line == 4
        assert str(exc.value).startswith("line 4: env.bogus:")

    def test_out_of_range_value(self, tmp_path):
        path = tmp_path / "config.json"
        path.write_text('{\n  "seed": 3,\n  "train": {\n    "lr": -1.0\n  }\n}\n')
        with pytest.raises(ConfigError) as exc:
            load_config(path)
        assert exc.value.path == "train.lr"
        assert exc.value.line == 4

    def test_cross_field_rules(self, tmp_path):
        with pytest.raises(ConfigError) as exc:
            load_config(write_config(tmp_path, {"env": {"H": 8}}))
        assert exc.value.path == "train.d_max"
        with pytest.raises(ConfigError) as exc:
            load_config(write_config(tmp_path, {"timing": {"horizon": 30}}))
        assert exc.value.path == "timing.horizon"
        with pytest.raises(ConfigError) as exc:
            load_config(write_config(tmp_path, {"schedule": {"u_d": 1.0}}))
        assert exc.value.path == "schedule.u_d"

    def test_json_syntax_error_line(self):
        with pytest.raises(ConfigError) as exc:
            parse_config_text('{\n  "seed": 1,\n}\n')
        assert exc.value.line == 3

    def test_key_line_follows_nesting(self):
        text = '{\n "lr": 1,\n "train": {\n  "lr": 2\n }\n}'
        assert key_line(text, ("train", "lr")) == 4
        assert key_line(text, ("lr",)) == 2
        assert key_line(text, ("missing",)) is None

    def test_hash_tracks_effective_parameters(self, tmp_path):
        raw, _ = load_config()
        same, _ = load_config(write_config(tmp_path, {"seed": 0}))
        assert config_hash(raw) == config_hash(same)
        changed, _ = load_config(write_config(tmp_path, {"schedule": {"alpha": 0.7}}))
        assert config_hash(raw) != config_hash(changed)
        reseeded, _ = load_config(seed=1)
        assert config_hash(raw) != config_hash(reseeded)


class TestFasterCommand:
    """End-to-end subcommands through call_command."""

    def test_reproduce_tables(self, tmp_path):
        summary = run("reproduce", "--tables", "--out", tmp_path, "--run-name", "tables")
        out = tmp_path / "tables"
        rows = read_csv(out / "table_pi05-4090.csv")
        assert [r["expected_react_ms"] for r in rows] == ["170.0", "130.0", "130.0", "112.1"]
        assert [int(r["smin"]) for r in rows] == [3, 3, 3, 3]
        assert [int(r["smin"]) for r in read_csv(out / "table_pi05-4060.csv")] == [10, 10, 10, 8]
        assert read_csv(out / "table_xvla-4090.csv")[-1]["smin"] == "2"
        assert read_csv(out / "table_xvla-4060.csv")[-1]["smin"] == "6"
        pairs = {(r["mode_a"], r["mode_b"]): r["p_faster"] for r in read_csv(out / "dominance_pi05-4090.csv")}
        assert float(pairs[("faster", "sync")]) == pytest.approx(0.81, abs=0.005)
        assert "pi05-4090,1.29,1.00,1.16" in (out / "speedups.csv").read_text().splitlines()
        assert summary["command"] == "reproduce"

    def test_manifest(self, tmp_path):
        run("compare", "--out", tmp_path, "--seed", "7")
        manifest = json.loads((tmp_path / "compare" / "manifest.json").read_text())
        assert manifest["seed"] == 7
        assert manifest["options"]["name"] == "timing"
        assert manifest["config_hash"] == config_hash(manifest["config"], "compare", manifest["options"])
        assert "numpy" in manifest["versions"]
        assert (tmp_path / "compare" / "table_timing.csv").exists()
        assert (tmp_path / "compare" / "timeline_timing.csv").exists()

    def test_manifest_hash_covers_subcommand_flags(self, tmp_path):
        def manifest_hash(mode, run_name):
            run("simulate", "--mode", mode, "--events", "0", "--duration", "2", "--out", tmp_path, "--run-name", run_name)
            return json.loads((tmp_path / run_name / "manifest.json").read_text())["config_hash"]

        sync = manifest_hash("sync", "a")
        assert manifest_hash("sync", "b") == sync
        assert manifest_hash("faster", "c") != sync

    def test_simulate_without_events(self, tmp_path):
        summary = run("simulate", "--mode", "sync", "--events", "0", "--duration", "5", "--out", tmp_path)
        results = summary["results"]
        assert results["reaction"]["count"] == 0
        assert results["stall_fraction"] > 0
        assert (tmp_path / "simulate" / "trace.jsonl").exists()

    def test_simulate_is_deterministic(self, tmp_path):
        args = ("simulate", "--mode", "faster", "--events", "5", "--duration", "10")
        first = run(*args, "--out", tmp_path / "a")["results"]
        second = run(*args, "--out", tmp_path / "b")["results"]
        assert first == second
        assert first["reaction"]["count"] == 5

    def test_pilot_writes_percentile_bands(self, tmp_path):
        config = write_config(tmp_path, TINY)
        summary = run("pilot", "--config", config, "--samples", "200", "--out", tmp_path)
        out = tmp_path / "pilot"
        rows = read_csv(out / "straightness.csv")
        assert list(rows[0]) == ["index", "straightness", "p05", "p95"]
        assert len(rows) == 8
        assert len(read_csv(out / "deviation.csv")) == 10 * 8
        assert (out / "checkpoint.bin").exists()
        assert len((out / "train_log.jsonl").read_text().splitlines()) == 1
        assert summary["results"]["samples"] == 200

    def test_train_then_sample(self, tmp_path):
        config = write_config(tmp_path, TINY)
        run("gen-data", "--config", config, "--out", tmp_path, "--run-name", "data")
        data = tmp_path / "data" / "dataset.jsonl"
        first = (data).read_bytes()
        run("gen-data", "--config", config, "--out", tmp_path, "--run-name", "data")
        assert data.read_bytes() == first

        trained = run("train", "--config", config, "--data", data, "--out", tmp_path)["results"]
        assert trained["loss_ratio_target"] == pytest.approx(4.5)
        assert trained["target_met"] == (trained["loss_ratio"] >= 4.5)
        checkpoint = tmp_path / "train" / "checkpoint.bin"
        summary = run("sample", "--config", config, "--checkpoint", checkpoint, "-s", "1", "--out", tmp_path)
        results = summary["results"]
        assert results["steps_used"] == 1
        assert results["early_stopped"]
        assert len(results["chunk"]) == 8

    def test_config_error_exits_with_usage_code(self, tmp_path):
        config = write_config(tmp_path, {"train": {"lr": -1}})
        with pytest.raises(CommandError) as exc:
            run("compare", "--config", config, "--out", tmp_path)
        assert exc.value.returncode == 1
        assert "train.lr" in str(exc.value)

    def test_train_rejects_delay_beyond_dataset_horizon(self, tmp_path):
        run("gen-data", "--config", write_config(tmp_path, TINY), "--out", tmp_path, "--run-name", "data")
        with pytest.raises(CommandError) as exc:
            run("train", "--data", tmp_path / "data" / "dataset.jsonl", "--out", tmp_path)
        assert exc.value.returncode == 1
        assert "train.d_max" in str(exc.value)
        assert not (tmp_path / "train" / "checkpoint.bin").exists()

    def test_usage_errors_exit_with_usage_code(self, tmp_path):
        with pytest.raises(CommandError) as exc:
            run("simulate", "--out", tmp_path)
        assert exc.value.returncode == 1
        with pytest.raises(CommandError) as exc:
            run("reproduce", "--out", tmp_path)
        assert exc.value.returncode == 1

    def test_runtime_errors_exit_with_runtime_code(self, tmp_path):
        with pytest.raises(CommandError) as exc:
            run("sample", "--checkpoint", tmp_path / "missing.bin", "--out", tmp_path)
        assert exc.value.returncode == 2
        with pytest.raises(CommandError) as exc:
            run("simulate", "--mode", "async_naive", "-s", "1", "--out", tmp_path)
        assert exc.value.returncode == 2
