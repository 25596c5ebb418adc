"""IMEX time stepping of the perturbation equation and run-time monitors.

The perturbation ``v = u - phi`` obeys ``dv/dt = -A v + G(v)`` with
``A = Lambda + I`` and ``G(v) = f(phi) - f(v + phi) + v``.  ``A`` is taken
implicitly and ``G`` explicitly; ``G`` is 2-Lipschitz, so ``dt < 1/2``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.optimize import brentq
from scipy.sparse.linalg import LinearOperator, cg

from .grid import Field, Grid, TransitionState, with_fitted_tail
from .model import (
    EnergySample,
    StabilityConstants,
    dissipation,
    f_increment,
    perturbed_energy,
    phi,
    phi_diff,
)
from .nonlocal_ops import HalfLaplacianOperator

log = logging.getLogger(__name__)

LIPSCHITZ_G = 2.0


class OrderingError(ValueError):
    """Initial data violates ``phi(x - b) <= u0 <= phi(x - a)``."""


class InternalSolveError(RuntimeError):
    pass


@dataclass(frozen=True)
class SqueezeSpec:
    x0: float
    eps: float
    constants: StabilityConstants


@dataclass(frozen=True)
class EvolveConfig:
    dt: float
    T: float
    record_every: int = 1
    energy: bool = True
    comparison: Optional[Tuple[float, float]] = None
    squeeze: Optional[SqueezeSpec] = None
    #: keep a snapshot every this many records (0 disables snapshots)
    snapshot_every: int = 1
    budget_constant: float = 1.0
    abort_on_energy_increase: bool = True

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if LIPSCHITZ_G * self.dt >= 1.0:
            raise ValueError(f"dt={self.dt} violates 2 dt < 1 for the explicit part")
        if not self.T > 0:
            raise ValueError("T must be positive")
        if int(self.record_every) != self.record_every or self.record_every < 1:
            raise ValueError("record_every must be an integer >= 1")
        if self.snapshot_every < 0:
            raise ValueError("snapshot_every must be >= 0")
        if self.comparison is not None and self.comparison[0] > self.comparison[1]:
            raise ValueError("comparison bounds need a <= b")

    @property
    def n_steps(self) -> int:
        return int(round(self.T / self.dt))

    def energy_budget(self, h: float) -> float:
        """Allowed energy increase between records: ``C (dt + h^1.5)``."""
        return self.budget_constant * (self.dt + h**1.5)


@dataclass
class Trajectory:
    grid: Grid
    samples: List[EnergySample] = field(default_factory=list)
    snapshots: List[Tuple[float, Field]] = field(default_factory=list)
    far_field: List[float] = field(default_factory=list)
    verdicts: Dict[str, dict] = field(default_factory=dict)
    aborted: bool = False
    final: Optional[Field] = None
    t_final: float = 0.0

    @property
    def times(self) -> np.ndarray:
        return np.array([s.t for s in self.samples])

    def ok(self) -> bool:
        return not self.aborted and all(v.get("holds", True) for v in self.verdicts.values())


class IMEXStepper:
    """Backward Euler in ``A``, forward Euler in ``G``.

    The tail source of ``Lambda`` is lagged with ``G``; the Toeplitz system
    ``(1 + dt) I + dt T`` is solved by conjugate gradients with FFT products.
    """

    def __init__(self, op: HalfLaplacianOperator, dt: float, rtol: float = 1e-14):
        if LIPSCHITZ_G * dt >= 1.0:
            raise ValueError(f"dt={dt} violates 2 dt < 1")
        self.op = op
        self.dt = dt
        self.rtol = rtol
        n = op.grid.N + 1
        T = op.toeplitz
        self._A = LinearOperator((n, n), matvec=lambda x: (1.0 + dt) * x + dt * (T @ x), dtype=float)
        x = op.grid.x
        self._phi = phi(x)

    def G(self, v: np.ndarray) -> np.ndarray:
        return v - f_increment(self._phi, v)

    def __call__(self, v: Field) -> Field:
        rhs = v.values + self.dt * self.G(v.values)
        if self.op.tail_policy == "algebraic" and v.tail is not None:
            rhs = rhs + self.dt * self.op.tail_vector(*v.tail)
        if not np.any(rhs):
            return with_fitted_tail(Field(v.grid, rhs))
        x, info = cg(self._A, rhs, x0=v.values, rtol=self.rtol, atol=0.0, maxiter=500)
        if info != 0:
            raise InternalSolveError(f"CG did not converge (info={info})")
        return with_fitted_tail(Field(v.grid, x))


def step(v: Field, op: HalfLaplacianOperator, dt: float) -> Field:
    return IMEXStepper(op, dt)(v)


def center_of(u: np.ndarray, x: np.ndarray) -> float:
    """Zero crossing of ``u`` by linear interpolation (nearest to the origin)."""
    s = np.flatnonzero(np.signbit(u[:-1]) != np.signbit(u[1:]))
    if len(s) == 0:
        return float("nan")
    i = s[np.argmin(np.abs(x[s]))]
    return float(x[i] - u[i] * (x[i + 1] - x[i]) / (u[i + 1] - u[i]))


def comparison_monitor(u: TransitionState, a: float, b: float, tol: float = 0.0) -> dict:
    """Check ``phi(x - b) <= u <= phi(x - a)`` at every node."""
    if a > b:
        raise ValueError("comparison monitor needs a <= b")
    x = u.grid.x
    # u - phi(x - b) = phi(x - x0) - phi(x - b) + v, evaluated without cancellation
    lower = phi_diff(x, u.x0, b) + u.v.values
    upper = phi_diff(x, a, u.x0) - u.v.values
    lo, up = float(lower.min()), float(upper.min())
    return {"holds": bool(lo >= -tol and up >= -tol), "lower_margin": lo, "upper_margin": up}


def squeeze_bounds(x: np.ndarray, spec: SqueezeSpec, t: float, tN: float):
    s = spec.constants.shift_factor * spec.eps
    decay = spec.eps * np.exp(-spec.constants.mu * (t - tN))
    return phi(x - spec.x0 - s) - decay, phi(x - spec.x0 + s) + decay


def squeeze_monitor(u: TransitionState, spec: SqueezeSpec, t: float, tN: float, tol: float = 0.0) -> dict:
    lo, hi = squeeze_bounds(u.grid.x, spec, t, tN)
    uu = u.values()
    bad = int(np.count_nonzero((uu < lo - tol) | (uu > hi + tol)))
    return {"holds": bad == 0, "violating_nodes": bad}


def squeeze_active(u: TransitionState, spec: SqueezeSpec) -> bool:
    """Activation precondition ``sup |u - phi(. - x0)| < eps < delta/2``."""
    if not spec.eps < 0.5 * spec.constants.delta:
        return False
    return sup_distance(u, spec.x0) < spec.eps


def sup_distance(u: TransitionState, x0: float) -> float:
    x = u.grid.x
    return float(np.max(np.abs(phi_diff(x, u.x0, x0) + u.v.values)))


def far_field_constant(u: TransitionState, cut: float = 10.0) -> float:
    """``max_{|x| > cut} |1 - |u|| (1 + |x|)``."""
    x = u.grid.x
    m = np.abs(x) > cut
    if not np.any(m):
        return 0.0
    uu = u.values()[m]
    return float(np.max(np.abs(1.0 - np.abs(uu)) * (1.0 + np.abs(x[m]))))


def evolve(v0: Field, cfg: EvolveConfig, op: HalfLaplacianOperator) -> Trajectory:
    """Integrate from ``v0`` to time ``T`` recording energy samples and monitor verdicts."""
    g = op.grid
    stepper = IMEXStepper(op, cfg.dt)
    budget = cfg.energy_budget(g.h)
    traj = Trajectory(grid=g)
    energy_v = {"holds": True, "budget": budget, "max_increase": 0.0, "violations": 0}
    comp_v = {"holds": True, "violations": 0, "min_margin": np.inf, "tol": budget}
    sq_v = {"holds": True, "active": False, "t_activation": None, "violations": 0, "checked": 0}

    def record(t: float, v: Field, n_rec: int):
        u = TransitionState(0.0, v)
        E = perturbed_energy(v, op)
        Q = dissipation(v, op)
        ref = cfg.squeeze.x0 if cfg.squeeze is not None else center_of(u.values(), g.x)
        traj.samples.append(EnergySample(t, E, Q, sup_distance(u, ref)))
        traj.far_field.append(far_field_constant(u))
        if cfg.snapshot_every and n_rec % cfg.snapshot_every == 0:
            traj.snapshots.append((t, v))
        if cfg.comparison is not None:
            c = comparison_monitor(u, *cfg.comparison, tol=budget)
            comp_v["min_margin"] = min(comp_v["min_margin"], c["lower_margin"], c["upper_margin"])
            if not c["holds"]:
                comp_v["violations"] += 1
                comp_v["holds"] = False
        if cfg.squeeze is not None:
            if not sq_v["active"] and squeeze_active(u, cfg.squeeze):
                sq_v["active"], sq_v["t_activation"] = True, t
            if sq_v["active"]:
                s = squeeze_monitor(u, cfg.squeeze, t, sq_v["t_activation"], tol=budget)
                sq_v["checked"] += 1
                if not s["holds"]:
                    sq_v["violations"] += 1
                    sq_v["holds"] = False
        if cfg.energy and len(traj.samples) > 1:
            inc = traj.samples[-1].energy - traj.samples[-2].energy
            energy_v["max_increase"] = max(energy_v["max_increase"], inc)
            if inc > budget:
                energy_v["violations"] += 1
                energy_v["holds"] = False
                return False
        return True

    v = v0
    n_rec = 0
    record(0.0, v, n_rec)
    n = cfg.n_steps
    for k in range(1, n + 1):
        v = stepper(v)
        if k % cfg.record_every == 0 or k == n:
            n_rec += 1
            if not record(k * cfg.dt, v, n_rec) and cfg.abort_on_energy_increase:
                log.warning("energy increased beyond budget at t=%g; aborting", k * cfg.dt)
                traj.aborted = True
                traj.t_final = k * cfg.dt
                break
    else:
        traj.t_final = n * cfg.dt
    traj.final = v
    if cfg.energy:
        traj.verdicts["energy"] = energy_v
    if cfg.comparison is not None:
        traj.verdicts["comparison"] = comp_v
    if cfg.squeeze is not None:
        if not sq_v["active"]:
            sq_v["note"] = "activation precondition never met"
        traj.verdicts["squeeze"] = sq_v
    return traj


def make_initial(kind: str, params: dict, g: Grid) -> Tuple[Field, Tuple[float, float]]:
    """Initial perturbation ``v0 = u0 - phi`` and ordering bounds ``(a, b)``.

    Kinds: ``shifted`` (``x0``), ``ordered_blend`` (``a``, ``b``, ``weight``;
    ``u0 = w phi(x - a) + (1 - w) phi(x - b)``) and ``bump`` (``x0``,
    ``amplitude``, ``width``): a Gaussian added to ``phi(x - x0)``.
    """
    x = g.x
    if kind == "shifted":
        x0 = float(params.get("x0", 0.0))
        v0 = phi_diff(x, x0, 0.0)
        a = b = x0
    elif kind == "ordered_blend":
        a, b = float(params["a"]), float(params["b"])
        w = float(params.get("weight", 0.5))
        if a > b or not 0.0 <= w <= 1.0:
            raise OrderingError("ordered_blend needs a <= b and 0 <= weight <= 1")
        v0 = w * phi_diff(x, a, 0.0) + (1.0 - w) * phi_diff(x, b, 0.0)
    elif kind == "bump":
        x0 = float(params.get("x0", 0.0))
        width = float(params.get("width", 1.0))
        guard = float(params.get("guard", g.R / 10.0))
        if not 0.0 < width <= guard:
            raise OrderingError(f"bump width must lie in (0, {guard}]")
        amp = float(np.clip(params.get("amplitude", 0.1), -0.5, 0.5))
        center = x0 + float(params.get("offset", 0.0))
        bump = amp * np.exp(-(((x - center) / width) ** 2))
        v0 = phi_diff(x, x0, 0.0) + bump
        s = _bump_shift(x, x0, np.abs(bump))
        a, b = (x0 - s, x0) if amp >= 0 else (x0, x0 + s)
    else:
        raise ValueError(f"unknown initial kind {kind!r}")
    _assert_ordering(x, v0, a, b)
    return with_fitted_tail(Field(g, v0)), (a, b)


def _bump_shift(x, x0, bump) -> float:
    """Smallest ``s`` with ``phi(x - x0 + s) - phi(x - x0) >= bump`` on the nodes."""
    if not np.any(bump):
        return 0.0

    def gap(s):
        return float(np.min(phi_diff(x, x0 - s, x0) - bump))

    hi = 1.0
    while gap(hi) < 0:
        hi *= 2.0
        if hi > 1e6:
            raise OrderingError("bump cannot be bracketed by shifted profiles")
    return brentq(gap, 0.0, hi, xtol=1e-12) * (1 + 1e-9) + 1e-12


def _assert_ordering(x, v0, a, b):
    lower = phi_diff(x, 0.0, b) + v0
    upper = phi_diff(x, a, 0.0) - v0
    for name, m in (("lower", lower), ("upper", upper)):
        if m.min() < -1e-14:
            i = int(np.argmin(m))
            raise OrderingError(f"{name} ordering violated at node {i} (x={x[i]}): margin {m[i]}")


def energy_rate_check(samples, q_floor: float = 1e-6, rel_tol: float = 0.05) -> dict:
    """Compare ``(F_k - F_{k+1}) / dt_k`` with ``Q(v_k)`` on consecutive records.

    Only pairs with ``Q(v_k) > q_floor`` are checked; below that the
    difference quotient is dominated by rounding in ``F``.
    """
    worst, checked, failed = 0.0, 0, 0
    for s0, s1 in zip(samples[:-1], samples[1:]):
        if s0.dissipation <= q_floor:
            continue
        rate = (s0.energy - s1.energy) / (s1.t - s0.t)
        rel = abs(rate - s0.dissipation) / s0.dissipation
        worst = max(worst, rel)
        checked += 1
        failed += int(rel > rel_tol)
    return {"holds": failed == 0, "checked": checked, "violations": failed,
            "max_rel_error": worst, "q_floor": q_floor, "rel_tol": rel_tol}
