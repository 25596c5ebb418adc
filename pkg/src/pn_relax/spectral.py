"""Spectrum of the operator linearized along the steady profile.

``L = (-d_xx)^{1/2} + (x^2 - 1)/(x^2 + 1)``.  Eigenproblems use the zero
exterior extension: point-spectrum eigenfunctions decay like ``1/x^2``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg
from scipy.sparse.linalg import ArpackNoConvergence, LinearOperator, eigsh

from .grid import Field, Grid, h_half_seminorm_sq, inner, l2_norm, make_grid
from .model import linearized_potential, phi_prime
from .nonlocal_ops import HalfLaplacianOperator, assemble_half_laplacian

log = logging.getLogger(__name__)

#: Largest system solved with a dense symmetric eigensolver.
DENSE_EIG_LIMIT = 4001


@dataclass(frozen=True, eq=False)
class LinearizedOperator:
    grid: Grid
    op: HalfLaplacianOperator
    potential: np.ndarray
    shift: float = 0.0

    def matvec(self, x: np.ndarray) -> np.ndarray:
        q = self.potential if x.ndim == 1 else self.potential[:, None]
        return self.op.toeplitz @ x + q * x

    @property
    def matrix(self) -> np.ndarray:
        m = self.op.matrix
        m[np.diag_indices_from(m)] += self.potential
        return m

    @property
    def norm_bound(self) -> float:
        return self.op.norm_bound + 1.0

    def apply(self, f: Field) -> Field:
        return Field(self.grid, self.matvec(f.values))


def assemble_linearized(grid: Grid, op: Optional[HalfLaplacianOperator] = None, shift: float = 0.0) -> LinearizedOperator:
    """``Lambda + diag(f'(phi(x - shift)))`` with zero exterior extension."""
    if op is None:
        op = assemble_half_laplacian(grid, "zero")
    if op.grid != grid:
        raise ValueError("operator grid mismatch")
    return LinearizedOperator(grid, op, linearized_potential(grid.x - shift), shift)


@dataclass
class SpectrumResult:
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    residuals: np.ndarray
    R: float
    N: int
    method: str
    tag: str = ""

    def field(self, j: int, grid: Grid) -> Field:
        return Field(grid, self.eigenvectors[:, j])

    def to_json(self) -> dict:
        return {
            "R": self.R,
            "N": self.N,
            "method": self.method,
            "tag": self.tag,
            "eigenvalues": [float(x) for x in self.eigenvalues],
            "residuals": [float(x) for x in self.residuals],
        }


def _normalize(Lop: LinearizedOperator, w: np.ndarray, V: np.ndarray):
    g = Lop.grid
    mid = g.half
    wts = g.weights
    V = V / np.sqrt(np.einsum("i,ij,ij->j", wts, V, V))
    # deterministic sign: nonnegative at the node nearest the origin
    sgn = np.where(V[mid] < 0, -1.0, 1.0)
    sgn[(V[mid] == 0) & (V.sum(axis=0) < 0)] = -1.0
    V = V * sgn
    res = np.linalg.norm(Lop.matvec(V) - V * w, axis=0) / np.linalg.norm(V, axis=0)
    return w, V, res


def eigen_lowest(Lop: LinearizedOperator, k: int = 6, method: str = "auto") -> SpectrumResult:
    """The ``k`` smallest eigenpairs of the discretized linearized operator."""
    if not 1 <= k <= 20:
        raise ValueError("k must lie in 1..20")
    n = Lop.grid.N + 1
    if method == "auto":
        method = "dense" if n <= DENSE_EIG_LIMIT else "lanczos"
    if method == "lanczos":
        A = LinearOperator((n, n), matvec=Lop.matvec, matmat=Lop.matvec, dtype=float)
        v0 = phi_prime(Lop.grid.x - Lop.shift)
        try:
            w, V = eigsh(A, k=k, which="SA", tol=1e-13, ncv=max(4 * k, 40), v0=v0)
        except ArpackNoConvergence:
            log.warning("Lanczos did not converge; falling back to dense eigensolver")
            method = "dense"
        else:
            order = np.argsort(w)
            w, V = w[order], V[:, order]
    if method == "dense":
        w, V = scipy.linalg.eigh(Lop.matrix, subset_by_index=[0, k - 1])
    w, V, res = _normalize(Lop, w, V)
    return SpectrumResult(w, V, res, Lop.grid.R, Lop.grid.N, method)


def count_in_window(Lop: LinearizedOperator, lo: float, hi: float, k_max: int = 200) -> int:
    """Number of eigenvalues in ``[lo, hi]``, with ``hi`` below the bulk of the spectrum."""
    n = Lop.grid.N + 1
    k = 20
    while True:
        k = min(k, n - 2)
        if n <= DENSE_EIG_LIMIT:
            w = scipy.linalg.eigvalsh(Lop.matrix, subset_by_value=(-np.inf, hi))
            return int(np.count_nonzero(w >= lo))
        A = LinearOperator((n, n), matvec=Lop.matvec, matmat=Lop.matvec, dtype=float)
        w = eigsh(A, k=k, which="SA", tol=1e-10, return_eigenvectors=False,
                  v0=phi_prime(Lop.grid.x))
        if w.max() > hi or k >= k_max:
            return int(np.count_nonzero((w >= lo) & (w <= hi)))
        k *= 2


def rayleigh_quotient(Lop: LinearizedOperator, f: Field) -> float:
    nrm = inner(f, f)
    if nrm == 0.0:
        raise ValueError("Rayleigh quotient of the zero field")
    return inner(f, Lop.apply(f)) / nrm


@dataclass
class GapEstimate:
    lambda2: float
    table: List[dict]
    cauchy: bool
    classification: str
    order: float

    def to_json(self) -> dict:
        return {
            "lambda2_extrapolated": self.lambda2,
            "cauchy_5pct": self.cauchy,
            "classification": self.classification,
            "assumed_or_observed_order": self.order,
            "table": self.table,
        }


def spectral_gap_estimate(grids: Sequence[Tuple[float, int]], k: int = 4) -> GapEstimate:
    """Second eigenvalue on a sequence of refined grids plus a Richardson limit.

    Grids are ``(R, N)`` pairs, coarse to fine.  With three or more grids the
    convergence order is estimated from the last three; otherwise order 2 in
    ``1/R`` is assumed.
    """
    if len(grids) < 2:
        raise ValueError("spectral_gap_estimate needs at least two grids")
    results = [eigen_lowest(assemble_linearized(make_grid(R, N)), k=k) for R, N in grids]
    return gap_from_results(results)


def gap_from_results(results: Sequence[SpectrumResult]) -> GapEstimate:
    """Refinement table and extrapolated second eigenvalue from solved grids."""
    if len(results) < 2:
        raise ValueError("gap estimate needs at least two grids")
    table = []
    for sr in results:
        table.append({"R": sr.R, "N": sr.N, "h": 2.0 * sr.R / sr.N,
                      "lambda1": float(sr.eigenvalues[0]), "lambda2": float(sr.eigenvalues[1])})
    lam = np.array([row["lambda2"] for row in table])
    Rs = np.array([row["R"] for row in table])
    p = 2.0
    if len(lam) >= 3:
        d1, d2 = lam[-2] - lam[-3], lam[-1] - lam[-2]
        ratio = Rs[-1] / Rs[-2]
        if d1 * d2 > 0 and abs(d2) < abs(d1) and ratio > 1:
            p = float(np.log(d1 / d2) / np.log(ratio))
    ratio = Rs[-1] / Rs[-2]
    if ratio > 1:
        lim = lam[-1] + (lam[-1] - lam[-2]) / (ratio**p - 1.0)
    else:
        lim = lam[-1]
    cauchy = bool(abs(lam[-1] - lam[-2]) < 0.05 * abs(lam[-1]))
    # the first shadow eigenvalue of the continuous spectrum sits just above 1
    cls = "discrete eigenvalue below edge" if lim < 1.0 - 0.05 else "essential edge"
    return GapEstimate(float(lim), table, cauchy, cls, p)


def hardy_check(f: Field, op: HalfLaplacianOperator) -> Tuple[float, float, float]:
    """``lhs = int (1 - x^2)/(1 + x^2) f^2``, ``rhs = |f|^2_{H^{1/2}}``, ``rhs - lhs``."""
    x = f.grid.x
    weight = (1.0 - x * x) / (1.0 + x * x)
    lhs = float(np.dot(f.grid.weights * weight, f.values**2))
    # weight -> -1 outside [-R, R]
    lhs -= (f.c_minus**2 + f.c_plus**2) / f.grid.R
    rhs = h_half_seminorm_sq(f, op)
    return lhs, rhs, rhs - lhs


def cosine_similarity(a: Field, b: Field) -> float:
    return inner(a, b) / (l2_norm(a) * l2_norm(b))


def spectrum_json(sr: SpectrumResult) -> str:
    return json.dumps(sr.to_json(), indent=2, sort_keys=True)


def random_decaying_fields(grid: Grid, n: int, seed: int = 0, max_terms: int = 4):
    """``n`` reproducible random fields built from Gaussians and Lorentzians.

    Centres lie in ``[-R/4, R/4]`` and widths in ``[0.2, 5]``; every field has
    a zero exterior tail to the precision of the grid.
    """
    rng = np.random.default_rng(seed)
    x = grid.x
    for _ in range(n):
        vals = np.zeros_like(x)
        for _ in range(int(rng.integers(1, max_terms + 1))):
            c = rng.uniform(-0.25, 0.25) * grid.R
            w = rng.uniform(0.2, 5.0)
            a = rng.normal()
            z = (x - c) / w
            if rng.random() < 0.5:
                vals += a * np.exp(-z * z)
            else:
                vals += a / (1.0 + z * z) ** 2
        yield Field(grid, vals)


def hardy_battery(grid: Grid, n: int, seed: int = 0) -> dict:
    """Hardy slack on ``n`` random fields and on the equality case ``1/(1+x^2)``."""
    op = assemble_half_laplacian(grid, "zero")
    slacks, rel = [], []
    for fld in random_decaying_fields(grid, n, seed):
        _, _, slack = hardy_check(fld, op)
        slacks.append(slack)
        rel.append(slack / inner(fld, fld))
    eq = Field(grid, 1.0 / (1.0 + grid.x**2))
    _, _, eq_slack = hardy_check(eq, op)
    return {
        "n": n,
        "seed": seed,
        "min_slack": float(min(slacks)) if slacks else None,
        "min_relative_slack": float(min(rel)) if rel else None,
        "equality_slack": float(eq_slack),
    }
