"""Acceptance gate: the ten numbered criteria at their stated tolerances.

The heavy runs go through the CLI with the shipped configs, so the numbers
checked here are the ones a user reproduces with ``pn-relax``.  Runtime is
several minutes, dominated by the R=100, dt=1e-3, T=30 evolution.
"""

import csv
import io
from pathlib import Path

import numpy as np
import pytest
import yaml

from acceptance_log import report
from oracles import double_sum_form, half_laplacian_pv_sum
from pn_relax import cli
from pn_relax.grid import h_half_seminorm_sq, make_grid, sample
from pn_relax.nonlocal_ops import apply_half_laplacian, assemble_half_laplacian

pytestmark = pytest.mark.slow

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def run_cli(command, config, out):
    code, rep = cli.run(command, config, str(out))
    assert rep is not None, f"{command} rejected its config"
    return code, rep


def read_csv(path):
    rows = list(csv.DictReader(io.StringIO(Path(path).read_text())))
    return {k: np.array([float(r[k]) if r[k] != "" else np.nan for r in rows]) for k in rows[0]}


def outputs(directory):
    return {p.name: p.read_bytes() for p in sorted(Path(directory).iterdir())}


@pytest.fixture(scope="module")
def steady(tmp_path_factory):
    out = tmp_path_factory.mktemp("steady")
    return out, *run_cli("steady-check", CONFIGS / "steady.yaml", out)


@pytest.fixture(scope="module")
def blend(tmp_path_factory):
    out = tmp_path_factory.mktemp("blend")
    return out, *run_cli("evolve", CONFIGS / "evolve_blend.yaml", out)


@pytest.fixture(scope="module")
def spectrum(tmp_path_factory):
    out = tmp_path_factory.mktemp("spectrum")
    return out, *run_cli("spectrum", CONFIGS / "spectrum.yaml", out)


@pytest.fixture(scope="module")
def converge(tmp_path_factory):
    out = tmp_path_factory.mktemp("converge")
    return out, *run_cli("converge", CONFIGS / "converge_bump.yaml", out)


def test_criterion_01_steady_state(steady):
    _, code, rep = steady
    g = rep["config"]["grid"]
    res = rep["checks"]["quadrature_residual"]["value"]
    order = rep["checks"]["residual_order"]
    ok = (
        (g["R"], g["N"]) == (100.0, 20000)
        and res <= 1e-3
        and order["fine"] < order["coarse"]
        and order["observed_order"] >= 1.5
        and order["fine_grid"] == [200.0, 80000]
    )
    detail = f"residual {res:.2e}, refined {order['fine']:.2e}, order {order['observed_order']:.2f}"
    assert report(1, "closed-form steady state", ok, detail)


def test_criterion_02_hilbert_identity(steady):
    _, code, rep = steady
    err = rep["checks"]["hilbert_identity"]["cases"][0]["max_error"]
    assert report(2, "Hilbert identity H(phi') on |x| <= R/2", err <= 1e-3, f"sup error {err:.2e}")


def test_criterion_03_operator_oracle():
    worst = 0.0
    for N, tail in ((40, False), (120, True), (200, False)):
        g = make_grid(5.0, N)
        op = assemble_half_laplacian(g) if tail else assemble_half_laplacian(g, "zero")
        if tail:
            f = sample(g, lambda x: x / (1 + x * x) + 0.5 / (1 + np.abs(x)), tail="algebraic")
        else:
            f = sample(g, lambda x: np.exp(-x * x) * np.cos(2 * x))
        ours = apply_half_laplacian(op, f).values
        ref = np.array(half_laplacian_pv_sum(list(f.values), g.h, f.tail))
        worst = max(worst, np.max(np.abs(ours - ref)) / np.max(np.abs(ref)))
    g = make_grid(6.0, 200)
    f = sample(g, lambda x: np.exp(-x * x))
    q = h_half_seminorm_sq(f, assemble_half_laplacian(g, "zero"))
    ds = double_sum_form(list(f.values), g.h)
    # the double sum drops the diagonal cell, an O(h) term: 5% at h = 0.06
    form_rel = abs(q - ds) / abs(ds)
    ok = worst <= 1e-12 and form_rel <= 0.05
    assert report(3, "operator oracle equivalence", ok, f"max rel diff {worst:.1e}, form rel diff {form_rel:.2e}")


def test_criterion_04_energy_dissipation(blend):
    out, code, rep = blend
    cfg = rep["config"]
    assert (cfg["grid"]["R"], cfg["grid"]["N"], cfg["evolve"]["dt"], cfg["evolve"]["T"]) == (100.0, 20000, 1e-3, 30.0)
    assert cfg["initial"]["kind"] == "ordered_blend"
    s = read_csv(out / "energy.csv")
    h = 2 * cfg["grid"]["R"] / cfg["grid"]["N"]
    budget = cfg["monitors"]["budget_constant"] * (cfg["evolve"]["dt"] + h**1.5)
    dE = np.diff(s["energy"])
    rate = -dE / np.diff(s["t"])
    q = s["dissipation"][:-1]
    m = q > 1e-6
    rel = np.abs(rate[m] - q[m]) / q[m]
    ok = bool(np.all(dE <= budget)) and m.sum() > 0 and rel.max() <= 0.05 and rep["checks"]["monitor_energy"]["pass"]
    detail = f"max increase {dE.max():.2e} vs budget {budget:.2e}, rate rel err {rel.max():.2e} on {m.sum()} pairs"
    assert report(4, "energy dissipation", ok, detail)


def test_criterion_05_comparison_principle(blend):
    _, code, rep = blend
    v = rep["checks"]["monitor_comparison"]
    h = 2 * rep["config"]["grid"]["R"] / rep["config"]["grid"]["N"]
    eps_e = rep["config"]["monitors"]["budget_constant"] * (rep["config"]["evolve"]["dt"] + h**1.5)
    ok = v["pass"] and v["violations"] == 0 and v["tol"] == pytest.approx(eps_e) and v["min_margin"] >= -eps_e
    n = rep["results"]["n_records"]
    assert report(5, "comparison principle", ok, f"{n} records, {v['violations']} violations, min margin {v['min_margin']:.1e}")


def test_criterion_06_spectral_structure(spectrum):
    _, code, rep = spectrum
    res = rep["results"]
    coarse = res["spectrum_R100_N20000"]
    fine = res["spectrum_R200_N40000"]
    lam1, cos = coarse["eigenvalues"][0], coarse["cosine_phi_prime"]
    l2c, l2f = coarse["eigenvalues"][1], fine["eigenvalues"][1]
    drift = abs(l2f - l2c) / abs(l2f)
    lowest = min(coarse["eigenvalues"][0], fine["eigenvalues"][0])
    counts = rep["checks"]["shadow_count_grows"]["counts"]
    ok = (
        abs(lam1) <= 5e-3
        and cos >= 0.999
        and min(l2c, l2f) > 0.01
        and drift < 0.05
        and lowest >= -1 - 5e-3
        and all(b > a for a, b in zip(counts, counts[1:]))
    )
    detail = f"lambda1 {lam1:.1e}, cos {cos:.6f}, lambda2 {l2c:.5f}->{l2f:.5f}, counts {counts}"
    assert report(6, "spectral structure", ok, detail)


def test_criterion_07_hardy(spectrum):
    _, code, rep = spectrum
    hb = rep["checks"]["hardy_random"]
    eq = rep["checks"]["hardy_equality"]["slack"]
    ok = hb["n"] == 1000 and hb["min_slack"] >= -1e-6 and abs(eq) <= 5e-3
    assert report(7, "Hardy inequality", ok, f"min slack {hb['min_slack']:.2e}, equality slack {eq:.2e}")


def test_criterion_08_exponential_convergence(converge):
    out, code, rep = converge
    res, chk = rep["results"], rep["checks"]
    tr = read_csv(out / "shift.csv")
    t = tr["t"]
    n = len(t)
    final = slice(n - int(round(n / 3)), n)
    # refit both series on the final third, independently of the report
    p = np.polyfit(t[final], np.log(tr["l2_v_alpha"][final]), 1)
    rms_v = np.sqrt(np.mean((np.polyval(p, t[final]) - np.log(tr["l2_v_alpha"][final])) ** 2))
    ainf = res["fits"]["alpha"]["alpha_inf"]
    da = np.abs(tr["alpha"][final] - ainf)
    pa = np.polyfit(t[final], np.log(da), 1)
    rms_a = np.sqrt(np.mean((np.polyval(pa, t[final]) - np.log(da)) ** 2))
    env = chk["envelope"]
    ok = (
        chk["shift_activated"]["pass"]
        and rms_v <= 0.1
        and rms_a <= 0.1
        and -p[0] > 0
        and -pa[0] > 0
        and env["violations"] == 0
        and env["checked"] > 0
        and abs(ainf) <= 1e-3
    )
    detail = (
        f"mu {-p[0]:.3f} (rms {rms_v:.1e}), alpha mu {-pa[0]:.3f} (rms {rms_a:.1e}), "
        f"envelope C {env['C']:.2f} with {env['violations']} violations, x0 {res['x0_estimate']:.6f}, "
        f"alpha limit {ainf:.1e}"
    )
    assert report(8, "exponential convergence to a shifted profile", ok, detail)


def test_criterion_09_orthogonality(converge):
    out, code, rep = converge
    tr = read_csv(out / "shift.csv")
    rel = rep["checks"]["orthogonality"]["worst_relative"]
    ok = rep["checks"]["orthogonality"]["violations"] == 0 and rel <= 1e-10 and len(tr["t"]) > 0
    assert report(9, "orthogonality contract", ok, f"{len(tr['t'])} records, worst relative residual {rel:.1e}")


def test_criterion_10_determinism(steady, spectrum, converge, tmp_path):
    same = {}
    for name, first in (("steady-check", steady), ("spectrum", spectrum), ("converge", converge)):
        cfg = {"steady-check": "steady.yaml", "spectrum": "spectrum.yaml", "converge": "converge_bump.yaml"}[name]
        second = tmp_path / name
        run_cli(name, CONFIGS / cfg, second)
        same[name] = outputs(first[0]) == outputs(second)
    # evolve on the production grid, shortened so the repeat stays cheap
    short = yaml.safe_load((CONFIGS / "evolve_blend.yaml").read_text())
    short["evolve"]["T"] = 1.0
    cfg = tmp_path / "short.yaml"
    cfg.write_text(yaml.safe_dump(short))
    runs = []
    for i in range(2):
        run_cli("evolve", cfg, tmp_path / f"evolve{i}")
        runs.append(outputs(tmp_path / f"evolve{i}"))
    same["evolve"] = runs[0] == runs[1]
    ok = all(same.values())
    assert report(10, "byte-identical repeated runs", ok, ", ".join(f"{k}: {v}" for k, v in same.items()))
