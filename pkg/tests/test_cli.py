from __future__ import annotations

import json
from dataclasses import replace

import pytest

from mfcrs.cli import EXIT_FAIL, EXIT_OK, EXIT_USAGE, build_parser, main
from mfcrs.experiments import load_config
from mfcrs.suites import reduced


def write_json(path, payload):
    path.write_text(json.dumps(payload))
    return str(path)


@pytest.fixture
def small_lq(tmp_path):
    cfg = replace(reduced(load_config("lq_regime"), sweep=(4, 8, 16), reps=32, n_mf=256), out=str(tmp_path / "out"))
    return write_json(tmp_path / "lq.json", cfg.to_dict())


class TestParser:
    def test_subcommands(self):
        choices = build_parser()._subparsers._group_actions[0].choices
        assert set(choices) == {"validate", "simulate", "metric", "hjb-check", "optimize", "convergence", "poc", "all"}

    @pytest.mark.parametrize(
        "argv",
        [[], ["bogus"], ["convergence"], ["convergence", "--config", "lq_regime", "--seed", "-1"], ["poc", "--config", "x", "--threads", "0"]],
    )
    def test_usage_errors(self, argv, capsys):
        with pytest.raises(SystemExit) as exc:
            main(argv)
        assert exc.value.code == EXIT_USAGE
        assert "usage" in capsys.readouterr().err

    def test_missing_config(self, capsys):
        assert main(["validate", "--config", "/nonexistent.json", "--quiet"]) == EXIT_USAGE
        assert "error" in capsys.readouterr().err


class TestMetric:
    def test_equal_measures(self, tmp_path, capsys):
        a = write_json(tmp_path / "a.json", {"atoms": [[-1.0, 0.25], [0.5, 0.75]]})
        b = write_json(tmp_path / "b.json", {"atoms": [[0.5, 0.75], [-1.0, 0.25]]})
        assert main(["metric", "--a", a, "--b", b]) == EXIT_OK
        out = capsys.readouterr().out.split()
        assert out == ["d=0", "dhat=0"]

    def test_distinct_measures(self, tmp_path, capsys):
        a = write_json(tmp_path / "a.json", {"atoms": [[0.0, 1.0]]})
        b = write_json(tmp_path / "b.json", {"atoms": [[1.0, 1.0]]})
        assert main(["metric", "--a", a, "--b", b]) == EXIT_OK
        d = float(capsys.readouterr().out.split()[0].split("=")[1])
        assert d > 0

    def test_bad_measure_file(self, tmp_path):
        a = write_json(tmp_path / "a.json", {"points": []})
        assert main(["metric", "--a", a, "--b", a]) == EXIT_USAGE


class TestCommands:
    def test_validate(self, tmp_path, capsys):
        assert main(["validate", "--config", "lq_regime", "--out", str(tmp_path), "--samples", "200", "--quiet"]) == EXIT_OK
        assert (tmp_path / "validate.json").exists()

    def test_simulate(self, small_lq, tmp_path):
        assert main(["simulate", "--config", small_lq, "--N", "4", "--quiet"]) == EXIT_OK
        header = (tmp_path / "out" / "trajectory.csv").read_text().splitlines()[0]
        assert header.split(",")[:3] == ["rep", "t", "regime"]

    def test_optimize(self, small_lq, tmp_path):
        assert main(["optimize", "--config", small_lq, "--N", "4", "--quiet"]) == EXIT_OK
        assert (tmp_path / "out" / "control_nagent_4.json").exists()

    def test_convergence_byte_identical(self, small_lq, tmp_path):
        texts = []
        for run in ("r1", "r2"):
            out = tmp_path / run
            code = main(["convergence", "--config", small_lq, "--seed", "7", "--out", str(out), "--quiet"])
            assert code in (EXIT_OK, EXIT_FAIL)
            texts.append([p.read_bytes() for p in sorted(out.iterdir())])
        assert texts[0] == texts[1]
        assert len(texts[0]) == 2

    def test_seed_changes_output(self, small_lq, tmp_path):
        outs = []
        for seed in ("7", "8"):
            main(["convergence", "--config", small_lq, "--seed", seed, "--out", str(tmp_path / seed), "--quiet"])
            outs.append(next((tmp_path / seed).glob("*.csv")).read_text())
        assert outs[0] != outs[1]

    @pytest.mark.slow
    def test_hjb_check_linear(self, tmp_path, capsys):
        assert main(["hjb-check", "--config", "linear", "--out", str(tmp_path), "--quiet"]) == EXIT_OK
        lines = capsys.readouterr().out.splitlines()
        assert len(lines) == 4 and all("PASS" in ln for ln in lines)
        assert len(json.loads((tmp_path / "hjb_checks.json").read_text())) == 4
