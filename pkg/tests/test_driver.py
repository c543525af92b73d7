"""Command line behavior: artifacts, report contents, exit codes."""

import json

import numpy as np
import pytest

from adjopt import driver
from adjopt.driver import (ConfigError, _parse_objective, build_parser,
                           config_from_args, main, verify)
from adjopt.stats import PHASES


def run_cli(tmp_path, *extra):
    args = ["--grid", "16", "--steps", "2", "--dt", "0.5",
            "--out-dir", str(tmp_path), *extra]
    return main(args)


class TestObjectiveParsing:

    def test_center_and_node_forms(self):
        assert _parse_objective("u@center") == ("u", None)
        assert _parse_objective("v@center") == ("v", None)
        assert _parse_objective("v@3,4") == ("v", (3, 4))
        assert _parse_objective("@center") == ("u", None)
        assert _parse_objective(" U@Center ") == ("u", None)

    def test_rejects_malformed(self):
        for bad in ("u", "w@center", "u@3", "u@a,b", "u@1,2,3"):
            with pytest.raises(ConfigError):
                _parse_objective(bad)


class TestConfig:

    def parse(self, *argv):
        return config_from_args(build_parser().parse_args(list(argv)))

    def test_grid_broadcast(self):
        cfg = self.parse("--grid", "24")
        assert (cfg.mx, cfg.my) == (24, 24)
        cfg = self.parse("--grid", "16", "32")
        assert (cfg.mx, cfg.my) == (16, 32)

    def test_rejections(self):
        with pytest.raises(ConfigError):
            self.parse("--grid", "8", "8", "8")
        with pytest.raises(ConfigError):
            self.parse("--dt", "0")
        with pytest.raises(ConfigError):
            self.parse("--steps", "-1")
        with pytest.raises(ConfigError):
            self.parse("--theta", "1.5")

    def test_out_dir_env_fallback(self, tmp_path, monkeypatch):
        monkeypatch.setenv("ADJOPT_OUT_DIR", str(tmp_path / "env_out"))
        cfg = self.parse("--grid", "16")
        assert cfg.out_dir == tmp_path / "env_out"


class TestRunArtifacts:

    def test_files_and_report(self, tmp_path):
        assert run_cli(tmp_path) == 0
        for name in ("solution.csv", "gradient.csv", "report.json"):
            assert (tmp_path / name).exists()

        report = json.loads((tmp_path / "report.json").read_text())
        for key in ("config", "phase_seconds", "phase_seconds_sum",
                    "total_seconds", "newton_iters", "linear_iters",
                    "colors_used", "objective_value", "gradient_norm",
                    "counters"):
            assert key in report, key
        assert report["config"]["mx"] == 16
        assert report["config"]["strategy"] == "compressed"
        assert report["config"]["objective"] == "u@8,8"
        assert report["colors_used"] == 8
        assert len(report["newton_iters"]) == 2
        assert set(report["linear_iters"]) == {"forward", "adjoint"}
        assert set(report["phase_seconds"]) == set(PHASES)
        assert report["total_seconds"] > 0.0

    def test_solution_csv_layout(self, tmp_path):
        run_cli(tmp_path)
        lines = (tmp_path / "solution.csv").read_text().splitlines()
        assert lines[0] == "x,y,u,v"
        assert len(lines) == 1 + 16 * 16
        table = np.loadtxt(tmp_path / "solution.csv", delimiter=",",
                           skiprows=1)
        assert table.shape == (256, 4)
        hx = 2.5 / 16
        # row k holds node (i, j) = (k % mx, k // mx)
        assert table[0, :2] == pytest.approx([0.0, 0.0])
        assert table[1, 0] == pytest.approx(hx)
        assert table[16, 1] == pytest.approx(hx)
        assert np.all(table[:, 2] >= 0.0)

        grad_lines = (tmp_path / "gradient.csv").read_text().splitlines()
        assert grad_lines[0] == "x,y,du,dv"
        assert len(grad_lines) == 1 + 16 * 16

    def test_report_consistent_with_csv(self, tmp_path):
        run_cli(tmp_path, "--objective", "v@center")
        report = json.loads((tmp_path / "report.json").read_text())
        table = np.loadtxt(tmp_path / "solution.csv", delimiter=",",
                           skiprows=1)
        # v@center on 16x16 means node (8, 8), flat row 8*16 + 8
        assert report["config"]["objective"] == "v@8,8"
        assert report["objective_value"] == table[8 * 16 + 8, 3]
        grad = np.loadtxt(tmp_path / "gradient.csv", delimiter=",",
                          skiprows=1)
        norm = float(np.sqrt(np.sum(grad[:, 2] ** 2 + grad[:, 3] ** 2)))
        assert report["gradient_norm"] == pytest.approx(norm, rel=1e-12)

    def test_deterministic_artifacts(self, tmp_path):
        a = tmp_path / "a"
        b = tmp_path / "b"
        run_cli(a)
        run_cli(b)
        assert (a / "solution.csv").read_bytes() \
            == (b / "solution.csv").read_bytes()
        assert (a / "gradient.csv").read_bytes() \
            == (b / "gradient.csv").read_bytes()
        ra = json.loads((a / "report.json").read_text())
        rb = json.loads((b / "report.json").read_text())
        assert ra["objective_value"] == rb["objective_value"]
        assert ra["newton_iters"] == rb["newton_iters"]

    def test_strategies_write_matching_solutions(self, tmp_path):
        finals = {}
        for name in ("analytic", "matrix-free"):
            out = tmp_path / name
            assert run_cli(out, "--strategy", name) == 0
            finals[name] = np.loadtxt(out / "solution.csv", delimiter=",",
                                      skiprows=1)[:, 2:]
        assert np.allclose(finals["analytic"], finals["matrix-free"],
                           rtol=1e-10, atol=1e-12)


class TestExitCodes:

    def test_config_errors(self, tmp_path, capsys):
        assert run_cli(tmp_path, "--theta", "2.0") == 2
        assert run_cli(tmp_path, "--objective", "nope") == 2
        assert main(["--grid", "2", "--out-dir", str(tmp_path)]) == 2
        capsys.readouterr()

    def test_solver_failure(self, tmp_path, monkeypatch):
        from adjopt.integrate import NewtonConvergenceError

        def explode(*args, **kwargs):
            raise NewtonConvergenceError("no convergence", step=0)

        monkeypatch.setattr(driver, "integrate", explode)
        assert run_cli(tmp_path) == 3

    def test_output_failure(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        assert run_cli(blocker / "sub") == 4


class TestVerify:

    def test_battery_passes(self, capsys):
        code = main(["--verify", "--grid", "12", "--steps", "2"])
        out = capsys.readouterr().out
        assert code == 0
        assert "all checks passed" in out
        for name in ("analytic vs ad jacobian", "ad vs fd jacobian",
                     "analytic vs fd jacobian",
                     "compressed recovery lossless",
                     "transpose dot identity",
                     "adjoint gradient vs differences"):
            assert f"PASS  {name}" in out

    def test_grid_cap(self):
        assert main(["--verify", "--grid", "48"]) == 2

    def test_corrupted_jacobian_is_caught(self, capsys):
        cfg = config_from_args(build_parser().parse_args(
            ["--grid", "12", "--steps", "2"]))
        code = verify(cfg, corrupt_analytic=True)
        out = capsys.readouterr().out
        assert code == 1
        assert "FAIL  analytic vs ad jacobian" in out
        assert "FAIL  analytic vs fd jacobian" in out
        assert "PASS  ad vs fd jacobian" in out
        assert "PASS  compressed recovery lossless" in out
