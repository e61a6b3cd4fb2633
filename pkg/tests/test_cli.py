import pytest
import requests
import yaml
from click.testing import CliRunner

from cli.ais import EXIT_BUDGET_ERROR, EXIT_CONFIG_ERROR, cli
from tests.conftest import TINY


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump(TINY))
    return str(path)


def scenario_lines(output):
    return [line for line in output.splitlines() if line.startswith(("Nodes:", "  connection", "Misbehaving"))]


class TestConfigHandling:

    def test_print_config(self, runner, config_file):
        result = runner.invoke(cli, ["--config", config_file, "--set", "ais.r=13", "--print-config"])

        assert result.exit_code == 0
        assert "ais.r = 13" in result.output
        assert "topology.n = 12" in result.output

    def test_print_paper_preset(self, runner):
        result = runner.invoke(cli, ["--preset", "paper", "--print-config"])

        assert result.exit_code == 0
        assert "thresholds.window_threshold = 14" in result.output

    @pytest.mark.parametrize("override", ["ais.r=abc", "ais.r", "ais.radius=3"])
    def test_bad_override(self, runner, config_file, override):
        result = runner.invoke(cli, ["--config", config_file, "--set", override, "--print-config"])

        assert result.exit_code == EXIT_CONFIG_ERROR

    def test_off_grid_without_opt_in(self, runner):
        result = runner.invoke(cli, ["--set", "ais.r=9", "topology"])

        assert result.exit_code == EXIT_CONFIG_ERROR
        assert "allow_off_grid" in result.output


class TestPipelineCommands:

    def test_full_flow(self, runner, config_file, tmp_path):
        traces, learning, report = tmp_path / "traces", tmp_path / "learning", tmp_path / "report"
        detection = tmp_path / "detection.json"
        base = ["--config", config_file]

        result = runner.invoke(cli, base + ["topology", "--out", str(tmp_path / "topology.json")])
        assert result.exit_code == 0, result.output
        assert "Misbehaving nodes" in result.output

        for phase in ("learning", "detection"):
            result = runner.invoke(cli, base + ["simulate", "--phase", phase, "--out", str(traces)])
            assert result.exit_code == 0, result.output
        assert sorted(p.name for p in traces.glob("*.tsv")) == [
            "detection_run0.tsv", "detection_run1.tsv", "learning_run0.tsv", "learning_run1.tsv",
        ]

        result = runner.invoke(cli, base + ["learn", "--traces", str(traces), "--out", str(learning)])
        assert result.exit_code == 0, result.output
        assert (learning / "learning.json").exists()

        result = runner.invoke(cli, base + [
            "detect", "--traces", str(traces), "--learning", str(learning), "--out", str(detection),
        ])
        assert result.exit_code == 0, result.output

        result = runner.invoke(cli, base + [
            "report", "--learning", str(learning), "--detection", str(detection), "--traces", str(traces),
            "--out", str(report),
        ])
        assert result.exit_code == 0, result.output
        assert "Detection rate" in result.output
        for name in ("metrics.csv", "report.json", "genes.csv"):
            assert (report / name).exists()

    def test_learn_without_traces(self, runner, config_file, tmp_path):
        empty = tmp_path / "empty"
        empty.mkdir()
        result = runner.invoke(cli, ["--config", config_file, "learn", "--traces", str(empty), "--out", str(tmp_path / "l")])

        assert result.exit_code == 1
        assert "No learning traces" in result.output

    def test_generation_budget_exit_code(self, runner, config_file, tmp_path):
        """At r=1 a silent node leaves almost no valid detector"""
        traces = tmp_path / "traces"
        base = ["--config", config_file, "--set", "ais.r=1", "--set", "ais.max_iterations=200",
                "--set", "ais.evaluate=all", "--set", "ais.detector_count=5"]
        assert runner.invoke(cli, base + ["simulate", "--run", "0", "--out", str(traces)]).exit_code == 0

        result = runner.invoke(cli, base + ["learn", "--traces", str(traces), "--out", str(tmp_path / "learning")])

        assert result.exit_code == EXIT_BUDGET_ERROR

    def test_sweep(self, runner, config_file, tmp_path):
        out = tmp_path / "sweep"
        result = runner.invoke(cli, ["--config", config_file, "--set", "grid.r=[7, 13]", "sweep", "--out", str(out)])

        assert result.exit_code == 0, result.output
        assert "r7_d50_l0.5_CBR" in result.output
        assert (out / "metrics.csv").exists()
        assert yaml.safe_load((out / "config.yaml").read_text())["grid"]["r"] == [7, 13]

    def test_saved_topology_is_reused(self, runner, config_file, tmp_path):
        saved = str(tmp_path / "topology.json")
        generated = runner.invoke(cli, ["--config", config_file, "topology", "--out", saved])
        reused = runner.invoke(cli, ["--config", config_file, "--topology", saved, "topology"])

        assert reused.exit_code == 0, reused.output
        assert scenario_lines(reused.output) == scenario_lines(generated.output)
        assert "Misbehaving nodes" in reused.output

    def test_saved_topology_with_sweep(self, runner, config_file, tmp_path):
        saved = str(tmp_path / "topology.json")
        runner.invoke(cli, ["--config", config_file, "topology", "--out", saved])
        result = runner.invoke(cli, ["--config", config_file, "--topology", saved, "sweep", "--out", str(tmp_path / "s")])

        assert result.exit_code == EXIT_CONFIG_ERROR


class TestApiCommands:

    def test_submit_rejects_extension(self, runner, tmp_path):
        path = tmp_path / "tiny.txt"
        path.write_text("n: 3")
        result = runner.invoke(cli, ["submit", str(path), "--name", "tiny"])

        assert result.exit_code == EXIT_CONFIG_ERROR

    def test_results_without_server(self, runner, monkeypatch):
        def refuse(*args, **kwargs):
            raise requests.ConnectionError("refused")

        monkeypatch.setattr(requests, "get", refuse)
        result = runner.invoke(cli, ["results", "1"])

        assert result.exit_code == 1
        assert "Cannot connect" in result.output
