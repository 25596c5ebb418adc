import json
import logging
import os
import subprocess
import sys

import pytest
import yaml

from pn_relax import __version__
from pn_relax import cli
from pn_relax.config import ConfigError, parse_config

STEADY = {"grid": {"R": 40, "N": 4000}, "steady": {"refine": False}}
EVOLVE = {
    "grid": {"R": 30, "N": 1500},
    "evolve": {"dt": 0.01, "T": 1, "record_every": 1},
    "initial": {"kind": "ordered_blend", "params": {"a": -1, "b": 1}},
}
CONVERGE = {
    "grid": {"R": 50, "N": 2500},
    "evolve": {"dt": 0.02, "T": 6, "record_every": 5},
    "initial": {"kind": "bump", "params": {"x0": 0.7, "amplitude": 0.2, "width": 1.0, "offset": 0.5}},
    "monitors": {"energy_rate": False},
    "shift": {"alpha_limit_tol": 0.01},
}
SPECTRUM = {
    "grid": {"R": 20, "N": 400},
    "spectral": {"k": 3, "grids": [[20, 800], [40, 1600]], "count_radii": [10, 20, 40],
                 "hardy_samples": 50, "hardy_grid": [20, 1000]},
}


def write(tmp_path, data, name="cfg.yaml"):
    p = tmp_path / name
    p.write_text(yaml.safe_dump(data))
    return p


def rejected_field(data):
    with pytest.raises(ConfigError) as exc:
        parse_config(data)
    return exc.value.field


def test_defaults_resolve():
    cfg = parse_config({"grid": {"R": 10, "N": 100}})
    d = cfg.resolved()
    assert d["evolve"]["dt"] == 0.01
    assert d["shift"]["delta"] == 0.25
    assert d["spectral"]["grids"] == [[100.0, 20000], [200.0, 40000]]


@pytest.mark.parametrize(
    "data, field",
    [
        ({"grid": {"R": 10, "N": 100}, "bogus": 1}, "bogus"),
        ({"grid": {"R": 10, "N": 100, "h": 0.1}}, "grid.h"),
        ({"grid": {"R": 10, "N": 100}, "evolve": {"dt": 0.6}}, "evolve.dt"),
        ({"grid": {"R": 10, "N": 101}}, "grid"),
        ({"grid": {"R": -1, "N": 100}}, "grid"),
        ({}, "grid"),
        ({"grid": {"R": 10, "N": 100}, "shift": {"delta": 0.5}}, "shift.delta"),
        ({"grid": {"R": 10, "N": 100}, "initial": {"kind": "bump", "params": {"x0": 0.0, "width": 5.0}}},
         "initial.params"),
        ({"grid": {"R": 10, "N": 100}, "initial": {"kind": "shifted", "params": {"a": 1}}}, "initial"),
        ({"grid": {"R": 10, "N": 100}, "spectral": {"grids": [[10, 100]]}}, "spectral.grids"),
        ({"grid": {"R": 10, "N": 100}, "output": {"formats": ["xml"]}}, "output.formats.0"),
    ],
)
def test_rejections_name_the_field(data, field):
    assert rejected_field(data) == field


def test_non_mapping_rejected():
    assert rejected_field([1, 2]) == "<root>"


def test_cli_config_rejection_exit_code(tmp_path, caplog):
    p = write(tmp_path, {**STEADY, "steady": {"refine": False, "tolerance": 1}})
    with caplog.at_level(logging.ERROR, logger="pn_relax"):
        code, report = cli.run("steady-check", p, str(tmp_path / "out"))
    assert code == cli.EXIT_CONFIG and report is None
    assert "steady.tolerance" in caplog.text
    assert not (tmp_path / "out").exists()
    bad = tmp_path / "bad.yaml"
    bad.write_text("grid: [unclosed")
    assert cli.run("steady-check", bad, None)[0] == cli.EXIT_CONFIG
    assert cli.run("steady-check", tmp_path / "missing.yaml", None)[0] == cli.EXIT_CONFIG


def test_cli_pass_and_report_contents(tmp_path):
    code, report = cli.run("steady-check", write(tmp_path, STEADY), str(tmp_path / "o"))
    assert code == cli.EXIT_PASS
    d = json.loads((tmp_path / "o" / "steady_check.json").read_text())
    assert d == report
    assert d["version"] == __version__
    assert d["config"] == parse_config(STEADY).resolved()
    assert d["passed"] and d["exit_code"] == 0


def test_cli_tolerance_failure(tmp_path):
    data = {**STEADY, "steady": {"refine": False, "residual_tol": 1e-12}}
    code, report = cli.run("steady-check", write(tmp_path, data), str(tmp_path / "o"))
    assert code == cli.EXIT_TOLERANCE
    assert not report["checks"]["quadrature_residual"]["pass"]


def test_cli_numerical_abort(tmp_path, monkeypatch):
    from pn_relax.evolution import InternalSolveError

    def boom(*args, **kwargs):
        raise InternalSolveError("CG did not converge")

    monkeypatch.setattr(cli, "evolve", boom)
    code, report = cli.run("evolve", write(tmp_path, EVOLVE), str(tmp_path / "o"))
    assert code == cli.EXIT_NUMERICAL
    assert "CG" in report["results"]["abort"]
    assert json.loads((tmp_path / "o" / "evolve.json").read_text())["exit_code"] == 4


def test_cli_evolve_writes_csv(tmp_path):
    code, report = cli.run("evolve", write(tmp_path, EVOLVE), str(tmp_path / "o"))
    assert code == cli.EXIT_PASS, report["checks"]
    lines = (tmp_path / "o" / "energy.csv").read_text().splitlines()
    assert lines[0] == "t,energy,dissipation,sup_dist,alpha"
    assert len(lines) == 1 + report["results"]["n_records"]


def test_cli_json_only_output(tmp_path):
    data = {**EVOLVE, "output": {"formats": ["json"]}}
    cli.run("evolve", write(tmp_path, data), str(tmp_path / "o"))
    assert sorted(p.name for p in (tmp_path / "o").iterdir()) == ["evolve.json"]


def test_cli_converge_small(tmp_path):
    code, report = cli.run("converge", write(tmp_path, CONVERGE), str(tmp_path / "o"))
    assert code == cli.EXIT_PASS, {k: v for k, v in report["checks"].items() if not v["pass"]}
    assert report["results"]["fits"]["l2_v_alpha"]["mu_hat"] > 0
    assert (tmp_path / "o" / "shift.csv").exists()


def test_cli_converge_zero_data(tmp_path):
    data = {**CONVERGE, "initial": {"kind": "shifted", "params": {"x0": 0.0}}}
    code, report = cli.run("converge", write(tmp_path, data), str(tmp_path / "o"))
    assert code == cli.EXIT_PASS
    assert report["results"]["x0_estimate"] == 0.0
    assert "note" in report["results"]


def test_cli_spectrum_small(tmp_path):
    code, report = cli.run("spectrum", write(tmp_path, SPECTRUM), str(tmp_path / "o"))
    assert code == cli.EXIT_PASS, report["checks"]
    assert report["results"]["gap"]["classification"] == "essential edge"


def test_threads_env(monkeypatch, tmp_path):
    monkeypatch.setenv(cli.THREADS_ENV, "1")
    assert cli._threads() == 1
    assert cli.run("steady-check", write(tmp_path, STEADY), str(tmp_path / "o"))[0] == 0
    for bad in ("zero", "0", "-2"):
        monkeypatch.setenv(cli.THREADS_ENV, bad)
        with pytest.raises(ConfigError):
            cli._threads()
        assert cli.run("steady-check", write(tmp_path, STEADY), None)[0] == cli.EXIT_CONFIG
    monkeypatch.delenv(cli.THREADS_ENV)
    assert cli._threads() is None


def _run_cli(args, env_threads):
    env = dict(os.environ)
    env[cli.THREADS_ENV] = env_threads
    return subprocess.run([sys.executable, "-m", "pn_relax.cli", *args], env=env, capture_output=True, text=True)


def test_cli_subprocess_determinism(tmp_path):
    cfg = write(tmp_path, CONVERGE)
    outs = []
    for i, threads in enumerate(("1", "2")):
        out = tmp_path / f"run{i}"
        res = _run_cli(["converge", "--config", str(cfg), "--out", str(out)], threads)
        assert res.returncode == 0, res.stderr
        outs.append({p.name: p.read_bytes() for p in sorted(out.iterdir())})
    assert outs[0].keys() == {"converge.json", "energy.csv", "shift.csv"}
    assert outs[0] == outs[1]


def test_cli_subprocess_rejection_message(tmp_path):
    cfg = write(tmp_path, {**STEADY, "unknown_section": {}})
    res = _run_cli(["steady-check", "--config", str(cfg)], "1")
    assert res.returncode == 3
    assert "unknown_section" in res.stderr
