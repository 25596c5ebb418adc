"""Frenkel potential, steady dislocation profile, energy and dissipation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .grid import Field, Grid, h_half_seminorm_sq, inner, l2_norm, sample, with_fitted_tail
from .nonlocal_ops import (
    HalfLaplacianOperator,
    HilbertOperator,
    apply_half_laplacian,
    half_laplacian_on_transition,
)
from .grid import TransitionState

PI = np.pi


def F(u):
    """Double-well potential ``(1 + cos(pi u)) / pi^2``; zero at odd integers."""
    u = np.asarray(u, dtype=float)
    # 1 + cos(pi u) = 2 sin^2(pi r / 2) with r = u - (nearest odd integer):
    # exact zeros at the wells and full relative accuracy near them
    r = (u - 1.0) - 2.0 * np.round(0.5 * (u - 1.0))
    return 2.0 * np.sin(0.5 * PI * r) ** 2 / PI**2


def f(u):
    return -np.sin(PI * u) / PI


def f_increment(p, v):
    """``f(p + v) - f(p)`` without cancellation; exactly zero when ``v = 0``."""
    p = np.asarray(p, dtype=float)
    v = np.asarray(v, dtype=float)
    return -(2.0 / PI) * np.cos(PI * (p + 0.5 * v)) * np.sin(0.5 * PI * v)


def f_prime(u):
    return -np.cos(PI * u)


def phi(x):
    """Steady profile ``(2/pi) arctan x`` connecting -1 to 1."""
    return (2.0 / PI) * np.arctan(x)


def phi_prime(x):
    x = np.asarray(x, dtype=float)
    return (2.0 / PI) / (1.0 + x * x)


def phi_second(x):
    x = np.asarray(x, dtype=float)
    return -(4.0 / PI) * x / (1.0 + x * x) ** 2


def phi_diff(x, a: float, b: float):
    """``phi(x - a) - phi(x - b)`` without cancellation far from the core."""
    x = np.asarray(x, dtype=float)
    p, q = x - a, x - b
    # arg((1 + i p)(1 - i q)) = arctan p - arctan q, no branch issue
    den = 1.0 + p * q
    out = np.arctan2(p - q, den)
    return (2.0 / PI) * out


def f_of_phi(x):
    """``f(phi(x)) = -(2/pi) x / (1 + x^2)`` evaluated without the composition."""
    x = np.asarray(x, dtype=float)
    return -(2.0 / PI) * x / (1.0 + x * x)


def linearized_potential(x):
    """``f'(phi(x)) = (x^2 - 1) / (x^2 + 1)``."""
    x = np.asarray(x, dtype=float)
    return (x * x - 1.0) / (x * x + 1.0)


def steady_residual(grid: Grid, op: HalfLaplacianOperator, mode: str = "analytic") -> float:
    """Sup-norm of ``(-d_xx)^{1/2} phi + f(phi)`` on the nodes.

    ``"analytic"`` uses the closed-form half-Laplacian of the profile and is
    zero up to rounding.  ``"quadrature"`` evaluates ``H(phi')`` with the
    discrete Hilbert transform and measures the discretization error.
    """
    x = grid.x
    if mode == "analytic":
        lphi = half_laplacian_on_transition(TransitionState(0.0, Field.zeros(grid)), op).values
    elif mode == "quadrature":
        dphi = sample(grid, phi_prime, tail="algebraic")
        lphi = HilbertOperator.assemble(grid).apply(dphi).values
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return float(np.max(np.abs(lphi + f_of_phi(x))))


def _F_tail(c: float) -> float:
    # far field u -> +-1 with u -+ 1 ~ c/|x|; F(u) ~ (u -+ 1)^2 / 2
    return 0.5 * c * c


def perturbed_energy(v: Field, op: HalfLaplacianOperator) -> float:
    """``int  |(-d_xx)^{1/4} v|^2 / 2 - v f(phi) + F(v + phi)  dx``."""
    g = v.grid
    x = g.x
    w = g.weights
    elastic = 0.5 * h_half_seminorm_sq(v, op)
    cm, cp = v.c_minus, v.c_plus
    # f(phi) ~ -+ 2/(pi |x|) beyond +-R
    fphi = Field(g, f_of_phi(x), (2.0 / PI, -2.0 / PI))
    coupling = -inner(v, fphi)
    u = phi(x) + v.values
    misfit = float(np.dot(w, F(u)))
    # exterior: u - 1 ~ (cp - 2/pi)/x,  u + 1 ~ (cm + 2/pi)/|x|
    misfit += (_F_tail(cp - 2.0 / PI) + _F_tail(cm + 2.0 / PI)) / g.R
    return elastic + coupling + misfit


def evolution_rhs(v: Field, op: HalfLaplacianOperator) -> Field:
    """``-Lambda v - f(v + phi) + f(phi)``: the time derivative of the perturbation."""
    lv = apply_half_laplacian(op, v).values
    rhs = -lv - f_increment(phi(v.grid.x), v.values)
    return with_fitted_tail(Field(v.grid, rhs))


def dissipation(v: Field, op: HalfLaplacianOperator) -> float:
    """Squared L2 norm of the evolution right-hand side."""
    return l2_norm(evolution_rhs(v, op)) ** 2


@dataclass(frozen=True)
class StabilityConstants:
    """Constants of the squeeze argument near the wells and along the core."""

    delta: float
    mu: float
    k: float
    beta: float

    @property
    def shift_factor(self) -> float:
        """``(mu + k) / (mu beta)``: profile shift per unit of sup-distance."""
        return (self.mu + self.k) / (self.mu * self.beta)


def stability_constants(delta: float = 0.25, samples: int = 400) -> StabilityConstants:
    """Sampled convexity constant ``mu``, Lipschitz ``k`` and slope ``beta``.

    ``mu`` is the minimum of ``(f(p) - f(p - q)) / q`` over a lattice of
    ``p`` in the wells ``[1 - delta, 1]`` (and the mirror well, by oddness of
    ``f``) and ``0 < q < delta / 2``.
    """
    if not 0.0 < delta <= 0.5:
        raise ValueError(f"delta must lie in (0, 1/2], got {delta}")
    # mu > 0 needs the whole window [1 - 3 delta / 2, 1] inside the convex
    # part |u| > 1/2 of the wells, i.e. delta < 1/3; larger delta give mu <= 0
    p = np.linspace(1.0 - delta, 1.0, samples)
    q = np.linspace(0.0, 0.5 * delta, samples + 1)[1:]
    P, Q = np.meshgrid(p, q, indexing="ij")
    upper = (f(P) - f(P - Q)) / Q
    lower = (f(-P) - f(-P - Q)) / Q
    mu = float(min(upper.min(), lower.min()))
    # f' is concave-then-convex; endpoint of q range is not a lattice point
    qmax = 0.5 * delta
    mu = min(mu, float((f(1 - delta) - f(1 - delta - qmax)) / qmax))
    k = 1.0
    beta = float((2.0 / PI) / (1.0 + np.tan(PI * (1.0 - delta) / 2.0) ** 2))
    return StabilityConstants(delta=delta, mu=mu, k=k, beta=beta)


@dataclass
class EnergySample:
    t: float
    energy: float
    dissipation: float
    sup_dist: float
    alpha: Optional[float] = None

    CSV_HEADER = "t,energy,dissipation,sup_dist,alpha"

    def csv_row(self) -> str:
        vals = [self.t, self.energy, self.dissipation, self.sup_dist]
        a = "" if self.alpha is None else repr(float(self.alpha))
        return ",".join(repr(float(v)) for v in vals) + "," + a
