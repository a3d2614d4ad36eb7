import io
import json
import subprocess
import sys

import pytest

from feddart.cli import REPORT_COLUMNS, ReportError, main, read_metrics, write_report
from feddart.config import ServerConfig
from feddart.experiment import EXIT_BAD_CONFIG, EXIT_CONNECT_FAILED, EXIT_OK, ExperimentConfig
from support import experiment_files, subprocess_env, write_json


def metrics_lines(path):
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


def test_run_in_test_mode_writes_one_record_per_round(tmp_path, capsys):
    config = experiment_files(tmp_path, ["client1", "client2"], fl_rounds=3)
    assert main(["--log-level", "error", "run", "--config", str(config)]) == EXIT_OK
    records = metrics_lines(tmp_path / "out" / "metrics.jsonl")
    assert [r["round"] for r in records] == [1, 2, 3]
    assert all(r["devices"] == ["client1", "client2"] and r["missing"] == [] for r in records)
    assert set(records[0]["durations"]) == {"client1", "client2"}
    model = json.loads((tmp_path / "out" / "model.json").read_text())
    assert len(model["parameters"]["values"]) == 4
    assert "3 rounds written" in capsys.readouterr().out


def test_flags_override_config(tmp_path):
    config = experiment_files(tmp_path, ["a"], fl_rounds=1, test_mode=False)
    out = tmp_path / "elsewhere"
    argv = ["--log-level", "error", "run", "--config", str(config), "--test-mode", "--seed", "3", "--output-dir", str(out)]
    assert main(argv) == EXIT_OK
    assert len(metrics_lines(out / "metrics.jsonl")) == 1


def test_seed_changes_the_result(tmp_path):
    finals = []
    for seed in (1, 2, 1):
        config = experiment_files(tmp_path, ["a", "b"], fl_rounds=2)
        main(["--log-level", "error", "run", "--config", str(config), "--seed", str(seed)])
        finals.append((tmp_path / "out" / "model.json").read_text())
    assert finals[0] == finals[2] and finals[0] != finals[1]


def test_missing_device_file_is_bad_config(tmp_path, capsys):
    config = experiment_files(tmp_path, ["a"])
    (tmp_path / "devices.json").unlink()
    assert main(["run", "--config", str(config)]) == EXIT_BAD_CONFIG
    assert "device_file" in capsys.readouterr().err


@pytest.mark.parametrize("broken", [{"fl_rounds": 0}, {"model": {"model_config": {}}}, {"clustering": "SPECTRAL"}])
def test_invalid_config_is_bad_config(tmp_path, broken):
    config = experiment_files(tmp_path, ["a"], **broken)
    assert main(["--log-level", "error", "run", "--config", str(config)]) == EXIT_BAD_CONFIG


def test_unreachable_server_is_connect_failure(tmp_path):
    config = experiment_files(tmp_path, ["a"], url="http://127.0.0.1:9", test_mode=False)
    assert main(["--log-level", "error", "run", "--config", str(config)]) == EXIT_CONNECT_FAILED


def test_relative_paths_resolve_next_to_the_config(tmp_path):
    config = ExperimentConfig.load(experiment_files(tmp_path / "exp", ["a"]))
    assert config.server_file == str(tmp_path / "exp" / "server.json")
    assert config.output_dir == str(tmp_path / "exp" / "out")


def test_key_from_environment_wins():
    config = ServerConfig.from_mapping({"server": "http://h:1", "client_key": "000"}, env={"FEDDART_KEY": "secret"})
    assert config.client_key == "secret"
    assert ServerConfig.from_mapping({"server": "http://h:1", "client_key": "000"}, env={}).client_key == "000"


# ------------------------------------------------------------------ report

def record(round_index, loss=0.5, cluster=0):
    return {"clustering_round": 1, "round": round_index, "cluster": cluster, "loss": loss,
            "devices": ["a", "b"], "durations": {"a": 0.25, "b": 0.5}, "missing": ["c"]}


def test_report_has_one_row_per_round(tmp_path, capsys):
    path = tmp_path / "metrics.jsonl"
    path.write_text("".join(json.dumps(record(i, 1.0 / i)) + "\n" for i in (1, 2, 3)))
    assert main(["report", str(path)]) == EXIT_OK
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == ",".join(REPORT_COLUMNS)
    assert len(lines) == 4
    assert lines[1] == "1,1,0,1.0,2,a;b,c,0.500000"


def test_report_of_empty_file_is_header_only(tmp_path, capsys):
    path = tmp_path / "metrics.jsonl"
    path.write_text("")
    assert main(["report", str(path)]) == EXIT_OK
    assert capsys.readouterr().out == ",".join(REPORT_COLUMNS) + "\n"


def test_report_names_the_malformed_line(tmp_path, capsys):
    path = tmp_path / "metrics.jsonl"
    path.write_text(json.dumps(record(1)) + "\n{not json\n")
    assert main(["report", str(path)]) == EXIT_BAD_CONFIG
    assert "line 2" in capsys.readouterr().err


def test_read_metrics_rejects_records_without_fields():
    with pytest.raises(ReportError, match="line 1"):
        read_metrics(io.StringIO('{"round": 1}\n'))


def test_write_report_tolerates_missing_optional_fields():
    out = io.StringIO()
    write_report([{"round": 1, "cluster": 0, "loss": 2}], out)
    assert out.getvalue().splitlines()[1] == "1,1,0,2.0,0,,,"


# -------------------------------------------------------------- processes

def test_module_entry_point(tmp_path):
    config = experiment_files(tmp_path, ["a", "b"], fl_rounds=2)
    done = subprocess.run([sys.executable, "-m", "feddart", "--log-level", "error", "run", "--config", str(config)],
                          env=subprocess_env(), capture_output=True, text=True, timeout=120)
    assert done.returncode == EXIT_OK, done.stderr
    assert len(metrics_lines(tmp_path / "out" / "metrics.jsonl")) == 2


def test_server_command_rejects_bad_config(tmp_path):
    path = write_json(tmp_path / "server.json", {"client_key": "000"})
    assert main(["server", "--config", str(path)]) == EXIT_BAD_CONFIG


def test_worker_command_rejects_bad_config(tmp_path):
    path = write_json(tmp_path / "worker.json", {"device_name": "a"})
    assert main(["worker", "--config", str(path)]) == EXIT_BAD_CONFIG
