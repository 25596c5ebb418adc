"""Dynamic shift ``alpha(t)``, orthogonal decomposition and decay-rate fits.

Along a trajectory ``u = phi(x - x0 - alpha) + v_alpha`` with ``v_alpha``
orthogonal to ``phi'(x - x0 - alpha)``; ``alpha`` is the root of
``W(alpha) = int u phi'(x - x0 - alpha) dx``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import brentq, curve_fit, minimize_scalar

from .grid import Field, TransitionState, inner, l2_norm, sup_norm, with_fitted_tail
from .model import phi, phi_diff, phi_prime, phi_second

log = logging.getLogger(__name__)


class NotInBasin(RuntimeError):
    """``W(t, .)`` has no sign change in the scan window (too early in the run)."""


def _profile_field(u: TransitionState, fn, c: float) -> Field:
    return with_fitted_tail(Field(u.grid, fn(u.grid.x - c)))


def decompose(u: TransitionState, x0: float, alpha: float) -> Field:
    """``v_alpha = u - phi(. - x0 - alpha)`` with an algebraic tail."""
    c = x0 + alpha
    return with_fitted_tail(Field(u.grid, phi_diff(u.grid.x, u.x0, c) + u.v.values))


def W(u: TransitionState, x0: float, alpha: float) -> float:
    """Shift functional.

    Evaluated as ``<u - phi_c, phi'_c>`` since ``int phi_c phi'_c = 0``;
    only the decaying difference enters the quadrature.
    """
    c = x0 + alpha
    return inner(decompose(u, x0, alpha), _profile_field(u, phi_prime, c))


def dW_dalpha(u: TransitionState, x0: float, alpha: float) -> float:
    c = x0 + alpha
    dphi = _profile_field(u, phi_prime, c)
    ddphi = _profile_field(u, phi_second, c)
    return inner(dphi, dphi) - inner(decompose(u, x0, alpha), ddphi)


def orthogonality_residual(u: TransitionState, x0: float, alpha: float) -> float:
    return abs(W(u, x0, alpha))


def solve_alpha(
    u: TransitionState,
    x0: float,
    alpha_guess: float = 0.0,
    window: float = 4.0,
    scan_points: int = 81,
) -> float:
    """Root of ``W(t, .)``: Newton from ``alpha_guess``, bisection on a scanned bracket.

    Raises :class:`NotInBasin` when ``W`` does not change sign on
    ``[alpha_guess - window, alpha_guess + window]`` or is not increasing at
    the root.
    """
    alpha = _newton(u, x0, alpha_guess)
    if alpha is None:
        grid = alpha_guess + np.linspace(-window, window, scan_points)
        vals = np.array([W(u, x0, a) for a in grid])
        s = np.flatnonzero(np.sign(vals[:-1]) != np.sign(vals[1:]))
        if len(s) == 0:
            raise NotInBasin("W has no sign change in the scan window")
        if len(s) > 1:
            raise NotInBasin(f"W changes sign {len(s)} times in the scan window")
        i = int(s[0])
        alpha = brentq(lambda a: W(u, x0, a), grid[i], grid[i + 1], xtol=1e-14, rtol=1e-15)
        alpha = _newton(u, x0, alpha) or alpha
    if dW_dalpha(u, x0, alpha) <= 0:
        raise NotInBasin("W is not increasing at its root")
    return float(alpha)


def _newton(u, x0, alpha, maxiter: int = 30) -> Optional[float]:
    best, best_w = None, np.inf
    for _ in range(maxiter):
        w = W(u, x0, alpha)
        if abs(w) < best_w:
            best, best_w = alpha, abs(w)
        if w == 0.0:
            return alpha
        d = dW_dalpha(u, x0, alpha)
        if d <= 0:
            return None
        step = w / d
        if abs(step) > 1.0:
            return None
        alpha -= step
        if abs(step) <= 4e-16 * max(1.0, abs(alpha)):
            w = W(u, x0, alpha)
            return alpha if abs(w) <= best_w else best
    # converged to rounding noise without a tiny step
    return best if best_w < 1e-10 else None


@dataclass
class ShiftRecord:
    t: float
    alpha: float
    l2: float
    sup: float
    orth_residual: float
    orth_scale: float


@dataclass
class ShiftTrace:
    x0: float
    records: List[ShiftRecord] = field(default_factory=list)
    skipped: List[float] = field(default_factory=list)
    t_activation: Optional[float] = None

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])

    @property
    def activated(self) -> bool:
        return bool(self.records)

    CSV_HEADER = "t,alpha,l2_v_alpha,sup_v_alpha,orth_residual"

    def to_csv(self) -> str:
        rows = [self.CSV_HEADER]
        for r in self.records:
            rows.append(",".join(repr(float(v)) for v in (r.t, r.alpha, r.l2, r.sup, r.orth_residual)))
        return "\n".join(rows) + "\n"


def track(snapshots: Sequence[Tuple[float, Field]], x0: float, delta: float = 0.25) -> ShiftTrace:
    """Shift decomposition at every snapshot after activation.

    Tracking starts at the first snapshot with ``sup |u - phi(. - x0)| <
    delta / 2``; ``alpha`` is warm-started from the previous record.
    """
    trace = ShiftTrace(x0=x0)
    alpha = 0.0
    active = False
    for t, v in snapshots:
        u = TransitionState(0.0, v)
        if not active:
            if np.max(np.abs(phi_diff(v.grid.x, 0.0, x0) + v.values)) >= 0.5 * delta:
                continue
            active = True
            trace.t_activation = t
        try:
            alpha = solve_alpha(u, x0, alpha)
        except NotInBasin:
            trace.skipped.append(t)
            continue
        va = decompose(u, x0, alpha)
        dphi = _profile_field(u, phi_prime, x0 + alpha)
        trace.records.append(
            ShiftRecord(
                t=t,
                alpha=alpha,
                l2=l2_norm(va),
                sup=sup_norm(va),
                orth_residual=abs(inner(va, dphi)),
                orth_scale=l2_norm(va) * l2_norm(dphi),
            )
        )
    return trace


@dataclass
class DecayFit:
    mu_hat: float
    prefactor: float
    window: Tuple[float, float]
    rms_residual: float
    n_points: int
    series_name: str = ""
    truncated: bool = False

    def to_json(self) -> dict:
        return {
            "series": self.series_name,
            "mu_hat": self.mu_hat,
            "prefactor": self.prefactor,
            "window": list(self.window),
            "rms_residual": self.rms_residual,
            "n_points": self.n_points,
            "truncated": self.truncated,
        }


def fit_exponential(t, y, window: Optional[Tuple[float, float]] = None, name: str = "") -> DecayFit:
    """Least-squares line through ``(t, log y)``; ``mu_hat = -slope``.

    If ``y`` reaches a nonpositive value inside the window, the window is cut
    just before it.
    """
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    if window is not None:
        m = (t >= window[0]) & (t <= window[1])
        t, y = t[m], y[m]
    truncated = False
    bad = np.flatnonzero(~(y > 0))
    if len(bad):
        t, y = t[: bad[0]], y[: bad[0]]
        truncated = True
    if len(t) < 10:
        raise ValueError(f"exponential fit needs >= 10 positive samples, got {len(t)}")
    ly = np.log(y)
    A = np.vstack([t, np.ones_like(t)]).T
    (slope, icpt), *_ = np.linalg.lstsq(A, ly, rcond=None)
    rms = float(np.sqrt(np.mean((A @ np.array([slope, icpt]) - ly) ** 2)))
    return DecayFit(float(-slope), float(np.exp(icpt)), (float(t[0]), float(t[-1])), rms, len(t), name, truncated)


@dataclass
class ShiftLimitFit:
    """``alpha(t) ~ alpha_inf + A exp(-mu t)`` and the log-linear fit of ``|alpha - alpha_inf|``."""

    alpha_inf: float
    decay: DecayFit

    def to_json(self) -> dict:
        return {"alpha_inf": self.alpha_inf, **self.decay.to_json()}


def fit_shift_limit(t, alpha, window: Optional[Tuple[float, float]] = None,
                    mu_guess: float = 1.0) -> ShiftLimitFit:
    """Limit ``alpha_inf`` of the shift and the decay rate of ``alpha - alpha_inf``.

    The reference ``x0`` is only known to the accuracy of the late-time
    profile fit, so ``alpha`` settles at a small offset rather than exactly
    at zero.  The offset is the constant of a three-parameter exponential
    fit on the window; ``|alpha - alpha_inf|`` is then fitted log-linearly.
    """
    t = np.asarray(t, dtype=float)
    a = np.asarray(alpha, dtype=float)
    if window is not None:
        m = (t >= window[0]) & (t <= window[1])
        t, a = t[m], a[m]
    if len(t) < 10:
        raise ValueError(f"shift limit fit needs >= 10 samples, got {len(t)}")
    t0 = t[0]
    scale = max(float(np.max(np.abs(a - a[-1]))), 1e-300)

    def model(tt, ainf, amp, mu):
        return ainf + amp * np.exp(-mu * (tt - t0))

    p0 = (a[-1] / scale, (a[0] - a[-1]) / scale, mu_guess)
    (ainf, _, _), *_ = curve_fit(model, t, a / scale, p0=p0, maxfev=20000)
    ainf *= scale
    return ShiftLimitFit(float(ainf), fit_exponential(t, np.abs(a - ainf), None, "alpha"))


def x0_estimate(u: TransitionState, bracket: Tuple[float, float]) -> float:
    """Shift ``s`` in ``bracket`` minimizing ``sup |u - phi(. - s)|``."""
    a, b = bracket
    x = u.grid.x

    def dist(s):
        return float(np.max(np.abs(phi_diff(x, u.x0, s) + u.v.values)))

    if a == b:
        return float(a)
    # golden-section search on the shift; widen slightly so a boundary minimum is interior
    pad = 1e-3 * max(1.0, b - a)
    res = minimize_scalar(dist, bounds=(a - pad, b + pad), method="bounded",
                          options={"xatol": 1e-12, "maxiter": 500})
    return float(res.x)


def envelope_check(snapshots, x0: float, mu: float, split: float) -> dict:
    """Pointwise bound ``|u - phi(. - x0)| <= C min(1/(1+|x|), exp(-mu t))``.

    ``C`` is the smallest constant valid on snapshots with ``t < split``;
    violations are counted on the remaining snapshots.
    """
    ratios = []
    for t, v in snapshots:
        x = v.grid.x
        d = np.abs(phi_diff(x, 0.0, x0) + v.values)
        env = np.minimum(1.0 / (1.0 + np.abs(x)), np.exp(-mu * t))
        ratios.append((t, float(np.max(d / env))))
    C = max((r for t, r in ratios if t < split), default=0.0)
    late = [r for t, r in ratios if t >= split]
    return {"C": C, "mu": mu, "split": split, "checked": len(late),
            "violations": sum(r > C for r in late), "worst_ratio_after_split": max(late, default=0.0)}
