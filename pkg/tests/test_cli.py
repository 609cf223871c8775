"""Tests for the `fcil` command line."""

from __future__ import annotations

import json

import pytest

from fcil.cli import build_parser, load_config, main
from tests.conftest import tiny_config


@pytest.fixture
def config_file(tmp_path):
    def write(**overrides):
        data = tiny_config(output_dir=str(tmp_path / "runs")).model_dump(mode="json")
        data.update(overrides)
        path = tmp_path / "config.json"
        path.write_text(json.dumps(data))
        return path

    return write


class TestLoadConfig:
    def test_desk_profile_without_file(self):
        config = load_config(None, {"method": "ewc"})
        assert config.T == 3
        assert config.method == "ewc"

    def test_overrides_win(self, config_file):
        config = load_config(str(config_file()), {"seeds": [4]})
        assert config.seeds == [4]
        assert config.synthetic_classes == 4


class TestMain:
    def test_invalid_sigma_exits_2(self, config_file, capsys):
        assert main(["run", "--config", str(config_file(sigma=0))]) == 2
        assert "sigma" in capsys.readouterr().err

    def test_too_many_tasks_exits_2(self, config_file, capsys):
        assert main(["run", "--config", str(config_file(T=5))]) == 2
        assert "synthetic_classes" in capsys.readouterr().err

    def test_missing_config_exits_2(self, tmp_path):
        assert main(["run", "--config", str(tmp_path / "nope.json")]) == 2

    def test_run_then_plot(self, config_file, tmp_path, capsys):
        assert main(["run", "--config", str(config_file()), "--method", "replay", "--seed", "2"]) == 0
        seed_dir = tmp_path / "runs" / "replay" / "seed_2"
        assert (seed_dir / "metrics.json").exists()
        assert "A_avg=" in capsys.readouterr().out

        assert main(["plot", "--run", str(tmp_path / "runs" / "replay")]) == 0
        assert (tmp_path / "runs" / "replay" / "accuracy_curves.png").exists()

    def test_plot_of_empty_directory(self, tmp_path):
        assert main(["plot", "--run", str(tmp_path)]) == 1

    def test_compare_defaults(self):
        args = build_parser().parse_args(["compare"])
        assert args.sigmas == [0.2, 0.5, 0.8]
