import csv
import json

import pytest

from plcql import config
from plcql.cli import run
from plcql.trainer import ConfigError

GRID = ["--env.kind", "grid_spread", "--env.n", "2", "--env.grid_side", "3", "--env.horizon", "4"]
FAST = ["--iterations", "3", "--batch_size", "8", "--ensemble_size", "2", "--hidden", "[8]",
        "--par_hidden", "[8]", "--eval_episodes", "2", "--log-level", "WARNING"]


def rows(path):
    with open(path) as fh:
        return list(csv.reader(fh))


@pytest.fixture
def data(tmp_path):
    path = tmp_path / "data.csv"
    assert run(["gen-data", *GRID, "--data.path", str(path), "--data.size", "120", "--log-level", "WARNING"]) == 0
    return path


def test_flatten_nested_and_dotted():
    assert config.flatten({"env": {"kind": "matrix", "n": 2}, "train.gamma": 0.9}) == {
        "env.kind": "matrix", "env.n": 2, "train.gamma": 0.9}


def test_empty_train_config_lists_required_keys():
    with pytest.raises(ConfigError) as exc:
        config.build("train", {})
    for key in ("env.kind", "data.path", "out_dir"):
        assert key in str(exc.value)


def test_range_error_names_key():
    with pytest.raises(ConfigError, match="tau"):
        config.build("verify", {"out_dir": "x", "train.tau": 1.5})


def test_unknown_key_is_fatal():
    with pytest.raises(ConfigError, match="train.gama"):
        config.build("verify", {"out_dir": "x", "train.gama": 0.9})


def test_flag_overrides_file_and_is_echoed():
    cfg = config.build("verify", {"out_dir": "x", "train.gamma": 0.99}, {"train.gamma": "0.9"})
    assert cfg["train.gamma"] == 0.9 and cfg.sources["train.gamma"] == "flag"
    assert cfg.echo()["train.gamma"] == 0.9
    assert set(cfg.echo()) == set(config.SCHEMA)


def test_type_coercion():
    cfg = config.build("verify", {"out_dir": "x"}, {"train.normalize_advantage": "false",
                                                     "ablate.seeds": "[3, 4]", "train.iterations": "7"})
    assert cfg["train.normalize_advantage"] is False and cfg["ablate.seeds"] == [3, 4]
    assert cfg["train.iterations"] == 7
    with pytest.raises(ConfigError, match="train.iterations"):
        config.build("verify", {"out_dir": "x"}, {"train.iterations": "1.5"})


def test_master_seed_feeds_train_seed():
    assert config.build("verify", {"out_dir": "x", "seed": 9})["train.seed"] == 9
    assert config.build("verify", {"out_dir": "x", "seed": 9, "train.seed": 2})["train.seed"] == 2


def test_cli_exit_codes(tmp_path, capsys):
    assert run(["train"]) == 2
    assert "missing required keys" in capsys.readouterr().err
    assert run(["verify", "--out_dir", str(tmp_path / "v"), "--tau", "1.5"]) == 2
    assert "tau" in capsys.readouterr().err
    bad = tmp_path / "bad.yaml"
    bad.write_text("train:\n  gama: 0.9\n")
    assert run(["verify", "--config", str(bad), "--out_dir", str(tmp_path / "v")]) == 2
    with pytest.raises(SystemExit) as exc:
        run(["verify", "--no-such-flag", "1"])
    assert exc.value.code == 2


def test_corrupt_dataset_is_runtime_error(tmp_path, data):
    text = data.read_text()
    data.write_text(text[: len(text) // 2])
    assert run(["train", *GRID, "--data.path", str(data), "--out_dir", str(tmp_path / "t"), *FAST]) == 3


def test_dataset_env_mismatch_is_config_error(tmp_path, data):
    argv = ["train", *GRID, "--env.seed", "5", "--data.path", str(data), "--out_dir", str(tmp_path / "t"), *FAST]
    assert run(argv) == 2


def test_out_dir_requires_overwrite(tmp_path):
    out = tmp_path / "v"
    argv = ["verify", "--out_dir", str(out), "--verify.instances", "2", "--verify.contraction_instances", "1",
            "--verify.pairs", "1", "--log-level", "WARNING"]
    assert run(argv) == 0
    assert run(argv) == 2
    assert run([*argv, "--overwrite"]) == 0


def test_train_eval_round_trip_and_summary(tmp_path, data):
    out = tmp_path / "t"
    assert run(["train", *GRID, "--data.path", str(data), "--out_dir", str(out), *FAST]) == 0
    summary = json.loads((out / "run_summary.json").read_text())
    assert summary["command"] == "train" and summary["config"]["train.iterations"] == 3
    assert {"plcql", "numpy", "python"} <= set(summary["versions"])
    assert summary["elapsed_seconds"] >= 0
    assert len(rows(out / "metrics.csv")) == 4
    ev = tmp_path / "e"
    assert run(["eval", *GRID, "--eval.checkpoint", str(out / "checkpoints" / "final"), "--out_dir", str(ev),
                "--eval.episodes", "4", "--log-level", "WARNING"]) == 0
    assert rows(ev / "eval.csv")[0] == ["episodes", "eval_return_mean", "eval_return_std"]


def test_rerun_gives_identical_metrics(tmp_path, data):
    for name in ("a", "b"):
        assert run(["train", *GRID, "--data.path", str(data), "--out_dir", str(tmp_path / name), *FAST]) == 0
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


def test_ablate_schema_and_determinism(tmp_path, data):
    tables = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert run(["ablate", *GRID, "--data.path", str(data), "--out_dir", str(out), *FAST,
                    "--ablate.seeds", "[0, 1]"]) == 0
        tables.append((out / "ablation_table.csv").read_bytes())
    table = rows(tmp_path / "a" / "ablation_table.csv")
    assert table[0] == ["variant", "mean", "std"]
    assert [r[0] for r in table[1:]] == ["plcql", "fixed_k=1", "fixed_k=2", "no_uncertainty"]
    assert tables[0] == tables[1]


def test_verify_reports(tmp_path):
    out = tmp_path / "v"
    assert run(["verify", "--out_dir", str(out), "--verify.instances", "3", "--verify.contraction_instances",
                "2", "--verify.pairs", "2", "--log-level", "WARNING"]) == 0
    report = rows(out / "bound_report.csv")
    assert len(report) == 1 + 9 and "bound_value" in report[0]
    assert all(r[report[0].index("holds")] == "True" for r in report[1:])


def test_bench_counts(tmp_path):
    out = tmp_path / "b"
    assert run(["bench", "--out_dir", str(out), "--bench.agents", "[2, 3]", "--bench.iterations", "2",
                "--bench.transitions", "60", "--batch_size", "8", "--ensemble_size", "2", "--hidden", "[8]",
                "--par_hidden", "[8]", "--log-level", "WARNING"]) == 0
    table = rows(out / "bench.csv")
    h = table[0]
    for r in table[1:]:
        n, variant, count = int(r[0]), r[1], float(r[h.index("q_evals_per_transition")])
        assert count == (1.0 if variant == "plcql" else float(n))
