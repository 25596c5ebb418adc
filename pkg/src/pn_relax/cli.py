"""Command-line front end: ``pn-relax steady-check|evolve|spectrum|converge``.

Exit codes: 0 all checks pass, 2 tolerance failure, 3 config rejection,
4 numerical abort.  Every JSON report embeds the resolved config and the
package version; time series are written as CSV.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import math
import os
import sys
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import numpy as np
import scipy.fft
from scipy.sparse.linalg import ArpackNoConvergence
from threadpoolctl import threadpool_limits

from . import __version__
from .config import ConfigError, RunConfig, load_config
from .evolution import (
    EvolveConfig,
    InternalSolveError,
    SqueezeSpec,
    energy_rate_check,
    evolve,
    make_initial,
)
from .grid import TransitionState, field_to_csv, make_grid, sample
from .model import EnergySample, phi_diff, phi_prime, phi_second, stability_constants, steady_residual
from .nonlocal_ops import (
    Indeterminate,
    assemble_half_laplacian,
    hilbert_transform_check,
    strict_positivity_probe,
)
from .shift_decay import envelope_check, fit_exponential, fit_shift_limit, track, x0_estimate
from .spectral import (
    assemble_linearized,
    cosine_similarity,
    count_in_window,
    eigen_lowest,
    gap_from_results,
    hardy_battery,
)

log = logging.getLogger("pn_relax")

EXIT_PASS = 0
EXIT_TOLERANCE = 2
EXIT_CONFIG = 3
EXIT_NUMERICAL = 4

THREADS_ENV = "PN_RELAX_THREADS"


class NumericalAbort(RuntimeError):
    pass


def _jsonable(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        # JSON has no inf/nan; keep the report strict
        return x if math.isfinite(x) else str(x)
    return obj


def _threads() -> Optional[int]:
    raw = os.environ.get(THREADS_ENV)
    if raw is None or raw == "":
        return None
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(THREADS_ENV, f"must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(THREADS_ENV, f"must be a positive integer, got {raw!r}")
    return n


@contextlib.contextmanager
def _parallelism(n: Optional[int]):
    if n is None:
        yield
        return
    with threadpool_limits(limits=n), scipy.fft.set_workers(n):
        yield


class Reporter:
    """Collects named checks and writes deterministic JSON/CSV artifacts."""

    def __init__(self, command: str, cfg: RunConfig, out_dir: Path):
        self.command = command
        self.cfg = cfg
        self.out_dir = out_dir
        self.checks: Dict[str, dict] = {}
        self.results: Dict[str, Any] = {}

    def check(self, name: str, passed: bool, **detail) -> bool:
        self.checks[name] = {"pass": bool(passed), **detail}
        log.info("%-28s %s", name, "PASS" if passed else "FAIL")
        return passed

    @property
    def passed(self) -> bool:
        return all(c["pass"] for c in self.checks.values())

    def write_text(self, name: str, text: str) -> None:
        if "csv" in self.cfg.output.formats:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            (self.out_dir / name).write_text(text)

    def finish(self, exit_code: int) -> dict:
        report = {
            "command": self.command,
            "version": __version__,
            "config": self.cfg.resolved(),
            "results": self.results,
            "checks": self.checks,
            "passed": self.passed,
            "exit_code": exit_code,
        }
        report = _jsonable(report)
        if "json" in self.cfg.output.formats:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            text = json.dumps(report, indent=2, sort_keys=True) + "\n"
            (self.out_dir / f"{self.command}.json").write_text(text)
        return report


def energy_csv(samples) -> str:
    return "\n".join([EnergySample.CSV_HEADER] + [s.csv_row() for s in samples]) + "\n"


# ---------------------------------------------------------------- commands


def cmd_steady_check(cfg: RunConfig, rep: Reporter) -> None:
    g = make_grid(cfg.grid.R, cfg.grid.N)
    st = cfg.steady
    op = assemble_half_laplacian(g)
    analytic = steady_residual(g, op, "analytic")
    rep.check("analytic_residual", analytic <= st.analytic_tol, value=analytic, tol=st.analytic_tol)
    quad = steady_residual(g, op, "quadrature")
    rep.check("quadrature_residual", quad <= st.residual_tol, value=quad, tol=st.residual_tol)
    if st.refine:
        g2 = make_grid(2.0 * g.R, 4 * g.N)
        quad2 = steady_residual(g2, assemble_half_laplacian(g2), "quadrature")
        order = math.log2(quad / quad2) if quad2 > 0 else math.inf
        rep.check("residual_order", order >= st.min_order, coarse=quad, fine=quad2,
                  fine_grid=[g2.R, g2.N], observed_order=order, min_order=st.min_order)
    pairs = [
        (phi_prime, lambda x: (2.0 / np.pi) * x / (1.0 + x * x)),
        (lambda x: x / (1.0 + x * x), lambda x: -1.0 / (1.0 + x * x)),
    ]
    hil = hilbert_transform_check(g, pairs, window=0.5)
    worst = max(r["max_error"] for r in hil)
    rep.check("hilbert_identity", worst <= st.hilbert_tol, cases=hil, tol=st.hilbert_tol)
    probes = []
    ok = True
    for name, fn in (("x*exp(-x^2)", lambda x: x * np.exp(-x * x)),
                     ("phi''", phi_second),
                     ("cos(x)exp(-x^2/8)", lambda x: np.cos(x) * np.exp(-x * x / 8.0))):
        try:
            at_min, at_max = strict_positivity_probe(sample(g, fn), op)
        except Indeterminate as exc:
            probes.append({"field": name, "error": str(exc)})
            ok = False
            continue
        probes.append({"field": name, "at_min": at_min, "at_max": at_max})
        ok &= at_min < 0.0 < at_max
    rep.check("strict_positivity", ok, probes=probes)


def _run_evolution(cfg: RunConfig, snapshots: bool):
    g = make_grid(cfg.grid.R, cfg.grid.N)
    op = assemble_half_laplacian(g)
    v0, (a, b) = make_initial(cfg.initial.kind, dict(cfg.initial.params), g)
    mon = cfg.monitors
    squeeze = None
    if mon.squeeze:
        eps = mon.squeeze_eps if mon.squeeze_eps is not None else 0.25 * cfg.shift.delta
        squeeze = SqueezeSpec(mon.squeeze_x0, eps, stability_constants(cfg.shift.delta))
    ev = cfg.evolve
    ecfg = EvolveConfig(
        dt=ev.dt,
        T=ev.T,
        record_every=ev.record_every,
        energy=mon.energy,
        comparison=(a, b) if mon.comparison else None,
        squeeze=squeeze,
        snapshot_every=ev.snapshot_every if snapshots else 0,
        budget_constant=mon.budget_constant,
    )
    try:
        traj = evolve(v0, ecfg, op)
    except InternalSolveError as exc:
        raise NumericalAbort(str(exc)) from exc
    if traj.final is None or not np.all(np.isfinite(traj.final.values)):
        raise NumericalAbort("non-finite state")
    return traj, (a, b)


def _monitor_checks(cfg: RunConfig, rep: Reporter, traj) -> None:
    for name, verdict in traj.verdicts.items():
        rep.check(f"monitor_{name}", verdict.get("holds", True), **verdict)
    if cfg.monitors.energy_rate:
        rc = energy_rate_check(traj.samples, cfg.monitors.q_floor, cfg.monitors.rate_rel_tol)
        rep.check("energy_rate", rc["holds"], **rc)
    ff = np.array(traj.far_field)
    rep.results["far_field_constant_max"] = float(ff.max())
    rep.check("far_field_bounded", bool(np.all(np.isfinite(ff))), max=float(ff.max()))


def cmd_evolve(cfg: RunConfig, rep: Reporter) -> None:
    traj, (a, b) = _run_evolution(cfg, snapshots=False)
    rep.results.update({"ordering_bounds": [a, b], "t_final": traj.t_final,
                        "n_records": len(traj.samples), "aborted": traj.aborted})
    rep.write_text("energy.csv", energy_csv(traj.samples))
    if cfg.output.final_field:
        rep.write_text("final_field.csv", field_to_csv(traj.final))
    if traj.aborted:
        raise NumericalAbort(f"energy increased beyond budget; aborted at t={traj.t_final}")
    _monitor_checks(cfg, rep, traj)


def cmd_spectrum(cfg: RunConfig, rep: Reporter) -> None:
    sp = cfg.spectral
    results = []
    for R, N in sp.grids:
        g = make_grid(R, N)
        Lop = assemble_linearized(g)
        try:
            sr = eigen_lowest(Lop, k=sp.k)
        except ArpackNoConvergence as exc:
            raise NumericalAbort(f"eigensolver failed on (R={R}, N={N}): {exc}") from exc
        results.append(sr)
        cos = abs(cosine_similarity(sr.field(0, g), sample(g, phi_prime)))
        tag = f"R{g.R:g}_N{g.N}"
        rep.results[f"spectrum_{tag}"] = {**sr.to_json(), "cosine_phi_prime": cos}
        lam1 = float(sr.eigenvalues[0])
        rep.check(f"lambda1_{tag}", abs(lam1) <= sp.eigen_tol and cos >= sp.cosine_min,
                  lambda1=lam1, cosine=cos, tol=sp.eigen_tol, cosine_min=sp.cosine_min)
        rep.check(f"lower_bound_{tag}", lam1 >= -1.0 - sp.eigen_tol, lambda_min=lam1)
    gap = gap_from_results(results)
    rep.results["gap"] = gap.to_json()
    lam2 = [row["lambda2"] for row in gap.table]
    drift = abs(lam2[-1] - lam2[-2]) / abs(lam2[-1])
    rep.check("lambda2_positive", min(lam2) > sp.gap_min, lambda2=lam2, gap_min=sp.gap_min)
    rep.check("lambda2_refinement_drift", drift < sp.drift_max, drift=drift, drift_max=sp.drift_max)
    lo, hi = sp.count_window
    counts = []
    for R in sp.count_radii:
        g = make_grid(R, int(round(2.0 * R / sp.count_h)))
        counts.append(count_in_window(assemble_linearized(g), lo, hi))
    grows = all(c1 > c0 for c0, c1 in zip(counts[:-1], counts[1:]))
    rep.check("shadow_count_grows", grows, radii=sp.count_radii, counts=counts, window=[lo, hi])
    if sp.hardy_samples:
        hb = hardy_battery(make_grid(*sp.hardy_grid), sp.hardy_samples, sp.seed)
        rep.check("hardy_random", hb["min_slack"] >= -sp.hardy_tol, **hb, tol=sp.hardy_tol)
        rep.check("hardy_equality", abs(hb["equality_slack"]) <= sp.hardy_equality_tol,
                  slack=hb["equality_slack"], tol=sp.hardy_equality_tol)


def cmd_converge(cfg: RunConfig, rep: Reporter) -> None:
    sh = cfg.shift
    traj, (a, b) = _run_evolution(cfg, snapshots=True)
    rep.write_text("energy.csv", energy_csv(traj.samples))
    if traj.aborted:
        raise NumericalAbort(f"energy increased beyond budget; aborted at t={traj.t_final}")
    _monitor_checks(cfg, rep, traj)
    x0 = x0_estimate(TransitionState(0.0, traj.final), (a, b))
    q_last = traj.samples[-1].dissipation
    rep.results.update({"ordering_bounds": [a, b], "x0_estimate": x0, "final_dissipation": q_last})
    if q_last > sh.q_final_max:
        log.warning("dissipation %.3g at t_last is above %.3g; x0 estimate may be early", q_last, sh.q_final_max)
        rep.results["x0_warning"] = "dissipation at final time above threshold; increase T"
    trace = track(traj.snapshots, x0, sh.delta)
    rep.write_text("shift.csv", trace.to_csv())
    rep.results.update({"t_activation": trace.t_activation, "in_basin_records": len(trace.records),
                        "skipped_times": trace.skipped})
    if not rep.check("shift_activated", trace.activated, t_activation=trace.t_activation):
        rep.results["guidance"] = "shift tracking never entered the basin; increase T"
        return
    orth = [r.orth_residual <= sh.orth_tol * r.orth_scale for r in trace.records]
    worst = max(r.orth_residual / r.orth_scale if r.orth_scale > 0 else 0.0 for r in trace.records)
    rep.check("orthogonality", all(orth), violations=orth.count(False), worst_relative=worst, tol=sh.orth_tol)

    t = trace.column("t")
    l2 = trace.column("l2")
    if np.max(l2) <= 1e-14:
        rep.results["note"] = "perturbation vanishes identically; decay fits not applicable"
        rep.check("envelope", True, violations=0)
        return
    n = len(t)
    start = max(int(sh.skip_fraction * n), n - int(round(sh.fit_window_fraction * n)))
    window = (float(t[start]), float(t[-1]))
    fit_v = fit_exponential(t, l2, window, "l2_v_alpha")
    fit_a = fit_shift_limit(t, trace.column("alpha"), window, mu_guess=max(fit_v.mu_hat, 0.1))
    sup_d = np.array([np.max(np.abs(phi_diff(v.grid.x, 0.0, x0) + v.values)) for _, v in traj.snapshots])
    t_snap = np.array([s for s, _ in traj.snapshots])
    fit_s = fit_exponential(t_snap, sup_d, window, "sup_dist")
    rep.results["fits"] = {"l2_v_alpha": fit_v.to_json(), "alpha": fit_a.to_json(), "sup_dist": fit_s.to_json()}
    rep.results["mu_convexity"] = stability_constants(sh.delta).mu
    for name, fit in (("fit_l2_v_alpha", fit_v), ("fit_alpha", fit_a.decay)):
        rep.check(name, fit.rms_residual <= sh.rms_max and fit.mu_hat > 0,
                  mu_hat=fit.mu_hat, rms=fit.rms_residual, rms_max=sh.rms_max)
    split = float(t_snap[0] + sh.envelope_split_fraction * (t_snap[-1] - t_snap[0]))
    env = envelope_check(traj.snapshots, x0, fit_v.mu_hat, split)
    rep.check("envelope", env["violations"] == 0, **env)
    # the alpha-limit expressed as a profile centre: x0 + alpha_inf
    rep.check("alpha_limit", abs(fit_a.alpha_inf) <= sh.alpha_limit_tol,
              x0_estimate=x0, centre_from_alpha=x0 + fit_a.alpha_inf,
              alpha_inf=fit_a.alpha_inf, tol=sh.alpha_limit_tol)


COMMANDS = {
    "steady-check": cmd_steady_check,
    "evolve": cmd_evolve,
    "spectrum": cmd_spectrum,
    "converge": cmd_converge,
}


def run(command: str, config_path, out: Optional[str] = None) -> Tuple[int, Optional[dict]]:
    """Execute one command; returns ``(exit_code, report)``."""
    try:
        cfg = load_config(config_path)
        threads = _threads()
    except ConfigError as exc:
        log.error("config rejected: %s", exc)
        return EXIT_CONFIG, None
    except OSError as exc:
        log.error("cannot read config: %s", exc)
        return EXIT_CONFIG, None
    out_dir = Path(out if out is not None else cfg.output.dir)
    rep = Reporter(command.replace("-", "_"), cfg, out_dir)
    try:
        with _parallelism(threads), np.errstate(over="raise", invalid="raise"):
            COMMANDS[command](cfg, rep)
    except (NumericalAbort, FloatingPointError) as exc:
        log.error("numerical abort: %s", exc)
        rep.results["abort"] = str(exc)
        return EXIT_NUMERICAL, rep.finish(EXIT_NUMERICAL)
    code = EXIT_PASS if rep.passed else EXIT_TOLERANCE
    return code, rep.finish(code)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="pn-relax", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, help="YAML run configuration")
    parser.add_argument("--out", default=None, help="output directory (overrides output.dir)")
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    code, _ = run(args.command, args.config, args.out)
    return code


if __name__ == "__main__":
    sys.exit(main())
