"""Command-line interface: every subcommand, config precedence, reproduction and errors."""

import csv
import json
import subprocess
import sys

import pytest

from erkguid.cli import DEFAULTS, resolve_config, run
from erkguid.core import RunManifest

FAST = ["--steps", "8", "--count", "4", "--substeps", "10"]


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


class TestSubcommands:
    @pytest.mark.parametrize("guide", ["none", "cfg", "ag", "erk", "cfg+erk", "ag+erk", "erk-proj"])
    def test_sample_guides(self, tmp_path, guide):
        out = tmp_path / guide
        assert run(["sample", "--guide", guide, "--out", str(out)] + FAST) == 0
        assert len(read_csv(out / "endpoints.csv")) == 4
        assert len(read_csv(out / "trace.csv")) == 4 * 8
        manifest = RunManifest.read(out / "manifest.json")
        assert manifest.guidance["guide"] == guide and manifest.count == 4

    @pytest.mark.parametrize("solver", ["euler", "heun", "dpm2s", "deis"])
    def test_sample_solvers(self, tmp_path, solver):
        assert run(["sample", "--solver", solver, "--out", str(tmp_path)] + FAST) == 0
        assert RunManifest.read(tmp_path / "manifest.json").solver == solver

    def test_align(self, tmp_path):
        assert run(["align", "--out", str(tmp_path)] + FAST) == 0
        assert len(read_csv(tmp_path / "alignment.csv")) > 0
        bins = read_csv(tmp_path / "bins.csv")
        assert {b["quantity"] for b in bins} == {"abs_cos_vhat", "cos_vhat", "abs_cos_dx", "abs_cos_lte"}
        assert float(read_csv(tmp_path / "summary.csv")[0]["pairs"]) > 0

    def test_heatmap(self, tmp_path):
        assert run(["heatmap", "--resolution", "12", "--out", str(tmp_path)]) == 0
        assert len(read_csv(tmp_path / "heatmap.csv")) == 144
        assert (tmp_path / "heatmap.svg").read_text().startswith("<svg")

    def test_lte_table(self, tmp_path):
        assert run(["lte-table", "--resolution", "16", "--substeps", "20", "--out", str(tmp_path)]) == 0
        rows = read_csv(tmp_path / "lte_table.csv")
        assert [r["quantity"] for r in rows] == ["lte", "erk_dx"]

    def test_sweep(self, tmp_path):
        args = ["sweep", "--count", "256", "--steps", "8", "--substeps", "10", "--w-stiff-grid", "0.5,1", "--w-con-grid", "0.5,1"]
        assert run(args + ["--out", str(tmp_path)]) == 0
        rows = read_csv(tmp_path / "sweep.csv")
        assert len(rows) == 1 + 4 and rows[0]["enabled"] == "0"

    def test_ablate_scaling(self, tmp_path):
        args = ["ablate-scaling", "--count", "256", "--steps", "8", "--substeps", "10", "--w-stiff-grid", "0,1"]
        assert run(args + ["--out", str(tmp_path)]) == 0
        rows = read_csv(tmp_path / "ablation.csv")
        assert [r["scaling"] for r in rows[1:]] == ["alpha", "quad", "abs"]

    @pytest.mark.parametrize("solver,order", [("euler", 1.0), ("heun", 2.0)])
    def test_converge(self, tmp_path, solver, order):
        assert run(["converge", "--solver", solver, "--out", str(tmp_path)]) == 0
        assert abs(float(read_csv(tmp_path / "converge.csv")[0]["slope"]) - order) < 0.1

    def test_baseline(self, tmp_path):
        assert run(["baseline", "--out", str(tmp_path)] + FAST) == 0
        methods = [r["method"] for r in read_csv(tmp_path / "baseline.csv")]
        assert methods[:2] == ["heun", "erk-guid"] and len(methods) == 5


class TestReproducibility:
    def test_jobs_do_not_change_outputs(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert run(["sample", "--count", "10", "--steps", "8", "--out", str(a)]) == 0
        assert run(["sample", "--count", "10", "--steps", "8", "--jobs", "3", "--out", str(b)]) == 0
        for name in ("endpoints.csv", "trace.csv", "manifest.json"):
            assert (a / name).read_bytes() == (b / name).read_bytes()

    def test_manifest_reproduces_run(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert run(["sample", "--guide", "ag+erk", "--w-stiff", "0.75", "--seed", "5", "--out", str(a)] + FAST) == 0
        assert run(["sample", "--config", str(a / "manifest.json"), "--out", str(b)]) == 0
        for name in ("endpoints.csv", "trace.csv", "manifest.json"):
            assert (a / name).read_bytes() == (b / name).read_bytes()


class TestConfig:
    def test_precedence(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"steps": 12, "w_stiff": 0.25}))
        cfg = resolve_config({"config": path, "w_stiff": 0.75})
        assert cfg["steps"] == 12 and cfg["w_stiff"] == 0.75 and cfg["w_con"] == DEFAULTS["w_con"]

    def test_field_file_embedded(self, tmp_path, gauss):
        path = tmp_path / "g.json"
        path.write_text(gauss.to_json())
        out = tmp_path / "run"
        assert run(["sample", "--field", str(path), "--guide", "erk", "--out", str(out)] + FAST) == 0
        manifest = RunManifest.read(out / "manifest.json")
        assert manifest.field_hash == gauss.digest()
        assert manifest.config["field_data"]["weights"] == [1.0]


class TestErrors:
    @pytest.mark.parametrize(
        "argv",
        [
            ["sample", "--steps", "1"],
            ["sample", "--w-stiff", "-1"],
            ["sample", "--solver", "rk4"],
            ["sample", "--guide", "erk-proj", "--solver", "dpm2s"],
            ["sample", "--jobs", "0"],
            ["sample", "--count", "0"],
            ["heatmap", "--sigma-index", "40"],
            ["sweep", "--count", "10"],
            ["converge", "--h-seq", "0.1,0.05"],
            ["sample", "--config", "/nonexistent.json"],
            ["sample", "--field", "/nonexistent.json"],
            ["bogus"],
        ],
    )
    def test_configuration_errors(self, tmp_path, capsys, argv):
        assert run(argv + ["--out", str(tmp_path)]) == 2
        err = capsys.readouterr().err.strip().splitlines()
        assert len(err) == 1 and err[0].startswith("erkguid: error:")

    def test_unknown_config_key(self, tmp_path, capsys):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"stepz": 3}))
        assert run(["sample", "--config", str(path), "--out", str(tmp_path)]) == 2
        assert "stepz" in capsys.readouterr().err

    def test_capability_error(self, tmp_path, capsys):
        path = tmp_path / "g3.json"
        path.write_text(json.dumps({"weights": [1.0], "means": [[0.0, 0.0, 0.0]], "stds": [1.0]}))
        assert run(["heatmap", "--field", str(path), "--out", str(tmp_path)]) == 2
        assert "2D" in capsys.readouterr().err

    def test_help_exits_zero(self, capsys):
        assert run(["--help"]) == 0
        assert "sample" in capsys.readouterr().out

    def test_console_script_module(self, tmp_path):
        proc = subprocess.run(
            [sys.executable, "-c", "from erkguid.cli import main; main()", "sample", "--steps", "1", "--out", str(tmp_path)],
            capture_output=True,
            text=True,
        )
        assert proc.returncode == 2 and proc.stderr.startswith("erkguid: error:")
