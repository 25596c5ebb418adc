"""Discrete half-Laplacian and Hilbert transform on a uniform grid.

Both operators are principal-value integrals evaluated with the trapezoid
rule on the infinite lattice ``x_j = j h``.  Nodes outside ``[-R, R]`` carry
the field's tail model ``c/|x|``, and the resulting lattice sums over the
exterior are evaluated in closed form with polygamma functions.  The
singular point contributes half the trapezoid weight of the (even, smooth)
integrand at ``z = 0``, ``-v''(x_i) h / 2``, replaced by a centred
difference.

With ``g_k = 2 v_i - v_{i+k} - v_{i-k}`` and the second-order difference the
half-Laplacian reads::

    (Lambda v)_i = 1/(pi h) * ( sum_{k>=1} g_k / k^2  +  g_1 / 2 )

(the default fourth-order difference uses ``2 g_1 / 3 - g_2 / 24``), so on
the grid it is a symmetric Toeplitz matrix with constant diagonal minus a
source vector from the exterior values.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence, Tuple

import numpy as np
import scipy.fft
import scipy.linalg
from scipy.special import polygamma, psi

from .grid import Field, Grid, GridMismatch, TransitionState, with_fitted_tail

__all__ = [
    "HalfLaplacianOperator",
    "HilbertOperator",
    "Indeterminate",
    "assemble_half_laplacian",
    "apply_half_laplacian",
    "half_laplacian_on_transition",
    "hilbert_transform",
    "hilbert_transform_check",
    "strict_positivity_probe",
    "transition_half_laplacian_closed_form",
]

#: Below this size matrix-vector products use the dense matrix.
DENSE_LIMIT = 2048


class Indeterminate(ValueError):
    """The positivity probe was asked about a constant field."""


class Toeplitz:
    """Fast products with a Toeplitz matrix given by its first column and row."""

    def __init__(self, col: np.ndarray, row: np.ndarray):
        col = np.asarray(col, dtype=float)
        row = np.asarray(row, dtype=float)
        if col[0] != row[0]:
            raise ValueError("col[0] and row[0] must agree")
        self.col, self.row = col, row
        self.n = n = len(col)
        self._dense = scipy.linalg.toeplitz(col, row) if n <= DENSE_LIMIT else None
        self.m = m = scipy.fft.next_fast_len(2 * n - 1, real=True)
        circ = np.zeros(m)
        circ[:n] = col
        circ[m - n + 1 :] = row[1:][::-1]
        self._symbol = scipy.fft.rfft(circ)

    def dense(self) -> np.ndarray:
        if self._dense is not None:
            return self._dense.copy()
        return scipy.linalg.toeplitz(self.col, self.row)

    def __matmul__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self._dense is not None:
            return self._dense @ x
        xs = scipy.fft.rfft(x, n=self.m, axis=0)
        sym = self._symbol if x.ndim == 1 else self._symbol[:, None]
        return scipy.fft.irfft(xs * sym, n=self.m, axis=0)[: self.n]


def _exterior_sums(grid: Grid, power: int) -> np.ndarray:
    """``S(d) = sum_{m>=1} 1 / ((A+m) (d+m)^power)`` for ``d = 0..N``, ``A = N/2``.

    ``d`` is the index distance from a node to the last grid node on the
    side of the tail; ``A + m`` is the tail node's distance from the origin
    in units of ``h``.
    """
    A = grid.half
    d = np.arange(grid.N + 1, dtype=float)
    D = A - d
    out = np.empty_like(d)
    off = D != 0
    Doff = D[off]
    if power == 1:
        out[off] = (psi(A + 1.0) - psi(d[off] + 1.0)) / Doff
        out[~off] = polygamma(1, A + 1.0)
    elif power == 2:
        out[off] = (psi(d[off] + 1.0) - psi(A + 1.0)) / Doff**2 + polygamma(
            1, d[off] + 1.0
        ) / Doff
        out[~off] = -0.5 * polygamma(2, A + 1.0)
    else:
        raise ValueError(power)
    return out


@dataclass(frozen=True, eq=False)
class HalfLaplacianOperator:
    """Assembled ``(-d_xx)^{1/2}`` on a grid."""

    grid: Grid
    toeplitz: Toeplitz
    tail_policy: str
    _s2: np.ndarray
    corrections: dict

    @property
    def column(self) -> np.ndarray:
        return self.toeplitz.col

    @property
    def matrix(self) -> np.ndarray:
        """Dense symmetric matrix (O(N^2) memory; meant for small grids)."""
        return self.toeplitz.dense()

    @property
    def norm_bound(self) -> float:
        """Upper bound on the spectral norm (maximum of the Toeplitz symbol)."""
        h = self.grid.h
        theta = np.linspace(0.0, np.pi, 257)
        sym = np.pi * theta - theta**2 / 2
        for k, c in self.corrections.items():
            sym = sym + 2 * c * (1 - np.cos(k * theta))
        return float(sym.max()) / (np.pi * h)

    def tail_vector(self, c_minus: float, c_plus: float) -> np.ndarray:
        """Contribution of exterior tail values, to be subtracted from ``Lambda v``."""
        g = self.grid
        h = g.h
        s2 = self._s2
        # s2[d]: d = distance (in nodes) to the right / left end
        t = (c_plus * s2[::-1] + c_minus * s2) / (np.pi * h * h)
        # exterior nodes within the difference stencil carry its extra weight
        for k, c in self.corrections.items():
            for m in range(1, k + 1):
                ext = 1.0 / (h * (g.half + m))
                t[g.N - k + m] += c * c_plus * ext / (np.pi * h)
                t[k - m] += c * c_minus * ext / (np.pi * h)
        return t

    def matvec(self, values: np.ndarray) -> np.ndarray:
        return self.toeplitz @ values

    def apply(self, f: Field) -> Field:
        return apply_half_laplacian(self, f)


#: Weights (in units of ``g_k / h``) of the centred-difference approximation
#: of ``-(h/2) v''`` that supplies the singular-point trapezoid term.
LOCAL_CORRECTIONS = {
    "second": {1: 1.0 / 2.0},
    "fourth": {1: 2.0 / 3.0, 2: -1.0 / 24.0},
}


def assemble_half_laplacian(
    g: Grid, tail_policy: str = "algebraic", correction: str = "fourth"
) -> HalfLaplacianOperator:
    """Assemble the discrete half-Laplacian on ``g``.

    ``tail_policy`` records how fields are extended beyond ``[-R, R]``:
    ``"algebraic"`` uses each field's fitted ``c/|x|`` tail, ``"zero"``
    ignores tails (exterior values are zero).  ``correction`` selects the
    second- or fourth-order centred difference at the singular point.
    """
    if tail_policy not in ("algebraic", "zero"):
        raise ValueError(f"unknown tail policy {tail_policy!r}")
    corr = LOCAL_CORRECTIONS[correction]
    h = g.h
    k = np.arange(1, g.N + 1, dtype=float)
    weights = 1.0 / k**2
    for j, c in corr.items():
        weights[j - 1] += c
    col = np.empty(g.N + 1)
    # full-lattice diagonal: 2 (zeta(2) + sum of corrections)
    col[0] = 2.0 * (np.pi**2 / 6.0 + sum(corr.values())) / (np.pi * h)
    col[1:] = -weights / (np.pi * h)
    return HalfLaplacianOperator(g, Toeplitz(col, col), tail_policy, _exterior_sums(g, 2), corr)


def apply_half_laplacian(op: HalfLaplacianOperator, f: Field) -> Field:
    if f.grid != op.grid:
        raise GridMismatch(f"field grid {f.grid} does not match operator grid {op.grid}")
    out = op.matvec(f.values)
    if op.tail_policy == "algebraic" and f.tail is not None:
        out = out - op.tail_vector(*f.tail)
    return with_fitted_tail(Field(op.grid, out))


def transition_half_laplacian_closed_form(x: np.ndarray, x0: float = 0.0) -> np.ndarray:
    """``(-d_xx)^{1/2} phi(x - x0) = (2/pi) (x - x0) / (1 + (x - x0)^2)``."""
    y = np.asarray(x, dtype=float) - x0
    return (2.0 / np.pi) * y / (1.0 + y * y)


def half_laplacian_on_transition(u: TransitionState, op: HalfLaplacianOperator) -> Field:
    """Half-Laplacian of ``phi(. - x0) + v``: closed form for the profile, matrix for ``v``."""
    lv = apply_half_laplacian(op, u.v)
    values = transition_half_laplacian_closed_form(op.grid.x, u.x0) + lv.values
    return with_fitted_tail(Field(op.grid, values))


@dataclass(frozen=True, eq=False)
class HilbertOperator:
    """``(H u)(x) = (1/pi) PV int u(y)/(x - y) dy`` on a grid (antisymmetric Toeplitz)."""

    grid: Grid
    toeplitz: Toeplitz
    _s1: np.ndarray

    @classmethod
    def assemble(cls, g: Grid) -> "HilbertOperator":
        k = np.arange(1, g.N + 1, dtype=float)
        a = np.empty(g.N + 1)
        a[0] = 0.0
        a[1:] = 1.0 / (np.pi * k)
        a[1] += 0.5 / np.pi
        # row i, column j = i - k gets +a_k; column j = i + k gets -a_k
        return cls(g, Toeplitz(a, -a), _exterior_sums(g, 1))

    def tail_vector(self, c_minus: float, c_plus: float) -> np.ndarray:
        g = self.grid
        h = g.h
        s1 = self._s1
        t = (c_minus * s1 - c_plus * s1[::-1]) / (np.pi * h)
        first = 1.0 / (h * (g.half + 1))
        t[-1] -= 0.5 * c_plus * first / np.pi
        t[0] += 0.5 * c_minus * first / np.pi
        return t

    def apply(self, f: Field) -> Field:
        if f.grid != self.grid:
            raise GridMismatch(f"field grid {f.grid} does not match operator grid {self.grid}")
        out = self.toeplitz @ f.values
        if f.tail is not None:
            out = out + self.tail_vector(*f.tail)
        return with_fitted_tail(Field(self.grid, out))


def hilbert_transform(f: Field) -> Field:
    return HilbertOperator.assemble(f.grid).apply(f)


def hilbert_transform_check(
    g: Grid,
    fn_pairs: Iterable[Tuple[Callable, Callable]],
    window: float = 0.5,
) -> list:
    """Max error of the discrete Hilbert transform against known transforms.

    Errors are measured on ``|x| <= window * R``.  Inputs are sampled with
    algebraic tails.
    """
    from .grid import sample

    H = HilbertOperator.assemble(g)
    mask = np.abs(g.x) <= window * g.R
    report = []
    for fn, expected in fn_pairs:
        hf = H.apply(sample(g, fn, tail="algebraic"))
        err = np.abs(hf.values - expected(g.x))[mask]
        report.append({"max_error": float(err.max()), "argmax": float(g.x[mask][err.argmax()])})
    return report


def strict_positivity_probe(f: Field, op: HalfLaplacianOperator) -> Tuple[float, float]:
    """``(Lambda f)`` at the global minimum and global maximum of ``f``.

    At a global minimum the half-Laplacian of a non-constant function is
    strictly negative, at a global maximum strictly positive.
    """
    v = f.values
    if np.ptp(v) == 0.0:
        raise Indeterminate("constant field has no strict extremum")
    lf = apply_half_laplacian(op, f).values
    return float(lf[np.argmin(v)]), float(lf[np.argmax(v)])


def export_matrix(op: HalfLaplacianOperator, path) -> None:
    """Write the dense matrix as row-major float64 after a ``(R, N)`` header."""
    with open(path, "wb") as fh:
        fh.write(b"PNHL")
        fh.write(struct.pack("<dq", op.grid.R, op.grid.N))
        fh.write(np.ascontiguousarray(op.matrix, dtype="<f8").tobytes())


def import_matrix(path) -> Tuple[float, int, np.ndarray]:
    with open(path, "rb") as fh:
        if fh.read(4) != b"PNHL":
            raise ValueError("not a half-Laplacian matrix file")
        R, N = struct.unpack("<dq", fh.read(16))
        data = np.frombuffer(fh.read(), dtype="<f8")
    return R, N, data.reshape(N + 1, N + 1)
