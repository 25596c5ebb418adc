"""Uniform grids on [-R, R], decaying fields with algebraic tails, quadrature."""

from __future__ import annotations

import io
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Tuple

import numpy as np

__all__ = [
    "Grid",
    "Field",
    "TransitionState",
    "GridMismatch",
    "make_grid",
    "sample",
    "tail_fit",
    "with_fitted_tail",
    "l2_norm",
    "sup_norm",
    "inner",
    "h_half_seminorm_sq",
    "field_to_csv",
    "field_from_csv",
]

#: Number of boundary nodes per side used by :func:`tail_fit`.
TAIL_NODES = 5


class GridMismatch(ValueError):
    """Two fields (or a field and an operator) live on different grids."""


@dataclass(frozen=True)
class Grid:
    """Uniform mesh ``x_i = -R + i h`` for ``i = 0..N`` with ``h = 2R/N``."""

    R: float
    N: int

    def __post_init__(self):
        if not (self.R > 0 and np.isfinite(self.R)):
            raise ValueError(f"R must be a positive finite number, got {self.R!r}")
        if int(self.N) != self.N or self.N < 2:
            raise ValueError(f"N must be an integer >= 2, got {self.N!r}")
        if self.N % 2:
            raise ValueError(f"N must be even (OddN), got {self.N}")
        object.__setattr__(self, "N", int(self.N))

    @property
    def h(self) -> float:
        return 2.0 * self.R / self.N

    @property
    def half(self) -> int:
        """Index of the node at the origin."""
        return self.N // 2

    @property
    def x(self) -> np.ndarray:
        # integer offsets keep x[N/2] == 0 and the mesh exactly symmetric
        x = (np.arange(self.N + 1) - self.half) * self.h
        x.flags.writeable = False
        return x

    @property
    def weights(self) -> np.ndarray:
        """Composite trapezoid weights."""
        w = np.full(self.N + 1, self.h)
        w[0] = w[-1] = 0.5 * self.h
        return w

    def __len__(self):
        return self.N + 1


def make_grid(R: float, N: int) -> Grid:
    return Grid(float(R), N)


@dataclass(frozen=True, eq=False)
class Field:
    """Nodal values of a decaying function plus a far-field model.

    ``tail is None`` means the function vanishes outside ``[-R, R]``;
    otherwise ``tail = (c_minus, c_plus)`` and the function is modelled as
    ``c_minus/|y|`` for ``y < -R`` and ``c_plus/|y|`` for ``y > R``.
    """

    grid: Grid
    values: np.ndarray
    tail: Optional[Tuple[float, float]] = None

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.shape != (self.grid.N + 1,):
            raise ValueError(
                f"expected {self.grid.N + 1} values, got shape {values.shape}"
            )
        if not np.all(np.isfinite(values)):
            bad = int(np.flatnonzero(~np.isfinite(values))[0])
            raise ValueError(f"non-finite value at node {bad} (x={self.grid.x[bad]})")
        values.flags.writeable = False
        object.__setattr__(self, "values", values)
        if self.tail is not None:
            object.__setattr__(self, "tail", (float(self.tail[0]), float(self.tail[1])))

    @property
    def c_minus(self) -> float:
        return 0.0 if self.tail is None else self.tail[0]

    @property
    def c_plus(self) -> float:
        return 0.0 if self.tail is None else self.tail[1]

    @classmethod
    def zeros(cls, grid: Grid) -> "Field":
        return cls(grid, np.zeros(grid.N + 1))

    def with_values(self, values, refit: bool = True) -> "Field":
        """Same grid, new values; tail refitted when this field is algebraic."""
        new = replace(self, values=values)
        if refit and self.tail is not None:
            new = with_fitted_tail(new)
        return new

    def __neg__(self):
        tail = None if self.tail is None else (-self.tail[0], -self.tail[1])
        return Field(self.grid, -self.values, tail)

    def __add__(self, other: "Field") -> "Field":
        _check_same_grid(self, other)
        return Field(self.grid, self.values + other.values, _add_tails(self.tail, other.tail))

    def __sub__(self, other: "Field") -> "Field":
        return self + (-other)

    def scaled(self, a: float) -> "Field":
        tail = None if self.tail is None else (a * self.tail[0], a * self.tail[1])
        return Field(self.grid, a * self.values, tail)


def _add_tails(t1, t2):
    if t1 is None and t2 is None:
        return None
    a = t1 or (0.0, 0.0)
    b = t2 or (0.0, 0.0)
    return (a[0] + b[0], a[1] + b[1])


def _check_same_grid(a, b):
    if a.grid != b.grid:
        raise GridMismatch(f"grid mismatch: {a.grid} vs {b.grid}")


@dataclass(frozen=True, eq=False)
class TransitionState:
    """``u(x) = phi(x - x0) + v(x)`` with ``v`` decaying."""

    x0: float
    v: Field

    @property
    def grid(self) -> Grid:
        return self.v.grid

    def values(self) -> np.ndarray:
        from .model import phi

        return phi(self.grid.x - self.x0) + self.v.values


def tail_fit(f: Field) -> Tuple[float, float]:
    """Fit ``c/|x|`` tails from the outermost :data:`TAIL_NODES` nodes per side."""
    g = f.grid
    if g.N < 10:
        raise ValueError("tail_fit needs N >= 10")
    x = g.x
    n = TAIL_NODES
    c_plus = float(np.mean(f.values[-n:] * x[-n:]))
    c_minus = float(np.mean(f.values[:n] * np.abs(x[:n])))
    return c_minus, c_plus


def with_fitted_tail(f: Field) -> Field:
    """Return ``f`` with an algebraic tail fitted to its boundary values.

    Fields whose boundary values are all exactly zero get the zero tail.
    """
    n = TAIL_NODES
    if not (np.any(f.values[:n]) or np.any(f.values[-n:])):
        return replace(f, tail=None)
    return replace(f, tail=tail_fit(f))


def sample(g: Grid, fn: Callable[[np.ndarray], np.ndarray], tail: str = "zero") -> Field:
    """Sample ``fn`` on the nodes of ``g``.

    ``tail`` is ``"zero"`` or ``"algebraic"`` (fitted via :func:`tail_fit`).
    """
    values = np.broadcast_to(np.asarray(fn(g.x), dtype=float), (g.N + 1,)).copy()
    f = Field(g, values)
    if tail == "algebraic":
        return with_fitted_tail(f)
    if tail != "zero":
        raise ValueError(f"unknown tail policy {tail!r}")
    return f


def inner(f: Field, g: Field) -> float:
    """Trapezoid L2 inner product plus the exact integral of the tail models."""
    _check_same_grid(f, g)
    w = f.grid.weights
    s = float(np.dot(w, f.values * g.values))
    # int_R^inf (a/y)(b/y) dy = ab/R on each side
    s += (f.c_minus * g.c_minus + f.c_plus * g.c_plus) / f.grid.R
    return s


def l2_norm(f: Field) -> float:
    return float(np.sqrt(max(inner(f, f), 0.0)))


def sup_norm(f: Field) -> float:
    return float(np.max(np.abs(f.values)))


def h_half_seminorm_sq(f: Field, op) -> float:
    """``<f, (-d_xx)^{1/2} f>``, twice the nonlocal elastic energy of ``f``."""
    return inner(f, op.apply(f))


def field_to_csv(f: Field) -> str:
    buf = io.StringIO()
    cm, cp = (f.tail if f.tail is not None else (None, None))
    tail = "zero" if f.tail is None else f"algebraic {float(cm)!r} {float(cp)!r}"
    buf.write(f"# R={float(f.grid.R)!r} N={f.grid.N} tail={tail}\n")
    buf.write("x,value\n")
    for xi, vi in zip(f.grid.x, f.values):
        buf.write(f"{float(xi)!r},{float(vi)!r}\n")
    return buf.getvalue()


def field_from_csv(text: str) -> Field:
    lines = text.splitlines()
    header = lines[0].lstrip("#").split()
    meta = dict(item.split("=", 1) for item in header[:3])
    g = make_grid(float(meta["R"]), int(meta["N"]))
    tail = None
    if meta["tail"] == "algebraic":
        tail = (float(header[3]), float(header[4]))
    data = np.loadtxt(io.StringIO("\n".join(lines[2:])), delimiter=",", ndmin=2)
    return Field(g, data[:, 1], tail)
