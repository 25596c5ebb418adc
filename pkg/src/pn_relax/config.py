"""Run configuration: schema, defaults and validation.

A config file is YAML (JSON is accepted as a subset).  Every section except
``grid`` is optional.  Unknown keys are rejected, and every module
precondition that can be checked without running a computation is checked
here, so a rejected config names the offending field before any work starts.
"""

from __future__ import annotations

from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .evolution import LIPSCHITZ_G


class ConfigError(ValueError):
    """Rejected configuration; ``field`` is the dotted path of the offending key."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field
        self.message = message


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


def _check_grid(R: float, N: int) -> None:
    if not R > 0:
        raise ValueError("R must be positive")
    if N < 2 or N % 2:
        raise ValueError(f"N must be even and >= 2, got {N}")


class GridSection(_Section):
    R: float
    N: int

    @model_validator(mode="after")
    def _valid(self):
        _check_grid(self.R, self.N)
        return self


class EvolveSection(_Section):
    dt: float = Field(0.01, gt=0)
    T: float = Field(10.0, gt=0)
    record_every: int = Field(10, ge=1)
    snapshot_every: int = Field(1, ge=0)

    @field_validator("dt")
    @classmethod
    def _explicit_stability(cls, dt):
        if LIPSCHITZ_G * dt >= 1.0:
            raise ValueError(f"dt={dt} violates 2 dt < 1")
        return dt


class InitialSection(_Section):
    kind: Literal["shifted", "ordered_blend", "bump"] = "shifted"
    params: Dict[str, float] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _known_params(self):
        allowed = {
            "shifted": {"x0"},
            "ordered_blend": {"a", "b", "weight"},
            "bump": {"x0", "amplitude", "width", "offset", "guard"},
        }[self.kind]
        extra = sorted(set(self.params) - allowed)
        if extra:
            raise ValueError(f"unknown parameter(s) {extra} for kind {self.kind!r}")
        if self.kind == "ordered_blend" and not {"a", "b"} <= set(self.params):
            raise ValueError("ordered_blend needs parameters a and b")
        return self


class MonitorsSection(_Section):
    energy: bool = True
    comparison: bool = True
    energy_rate: bool = True
    q_floor: float = Field(1e-6, gt=0)
    rate_rel_tol: float = Field(0.05, gt=0)
    budget_constant: float = Field(1.0, gt=0)
    squeeze: bool = False
    squeeze_eps: Optional[float] = Field(None, gt=0)
    squeeze_x0: float = 0.0


class SpectralSection(_Section):
    k: int = Field(6, ge=2, le=20)
    grids: List[Tuple[float, int]] = Field(default_factory=lambda: [(100.0, 20000), (200.0, 40000)])
    eigen_tol: float = Field(5e-3, gt=0)
    cosine_min: float = Field(0.999, gt=0, le=1)
    gap_min: float = Field(0.01, gt=0)
    drift_max: float = Field(0.05, gt=0)
    count_window: Tuple[float, float] = (0.9, 1.1)
    count_radii: List[float] = Field(default_factory=lambda: [50.0, 100.0, 200.0])
    count_h: float = Field(0.1, gt=0)
    hardy_samples: int = Field(1000, ge=0)
    hardy_grid: Tuple[float, int] = (50.0, 5000)
    hardy_tol: float = Field(1e-6, ge=0)
    hardy_equality_tol: float = Field(5e-3, gt=0)
    seed: int = 0

    @field_validator("grids")
    @classmethod
    def _grids(cls, grids):
        if len(grids) < 2:
            raise ValueError("need at least two refinement grids")
        for R, N in grids:
            _check_grid(R, N)
        return grids

    @field_validator("hardy_grid")
    @classmethod
    def _hardy_grid(cls, g):
        _check_grid(*g)
        return g

    @field_validator("count_window")
    @classmethod
    def _window(cls, w):
        if not w[0] < w[1]:
            raise ValueError("count_window needs lo < hi")
        return w

    @model_validator(mode="after")
    def _count_grids(self):
        for R in self.count_radii:
            N = 2.0 * R / self.count_h
            if abs(N - round(N)) > 1e-9 or round(N) % 2:
                raise ValueError(f"2 R / count_h must be an even integer (R={R})")
        return self


class ShiftSection(_Section):
    delta: float = Field(0.25, gt=0, le=0.5)
    fit_window_fraction: float = Field(1.0 / 3.0, gt=0, le=1)
    skip_fraction: float = Field(0.2, ge=0, lt=1)
    envelope_split_fraction: float = Field(1.0 / 3.0, gt=0, lt=1)
    rms_max: float = Field(0.1, gt=0)
    alpha_limit_tol: float = Field(1e-3, gt=0)
    orth_tol: float = Field(1e-10, gt=0)
    q_final_max: float = Field(1e-6, gt=0)

    @field_validator("delta")
    @classmethod
    def _convex_wells(cls, delta):
        from .model import stability_constants

        if stability_constants(delta).mu <= 0:
            raise ValueError(f"delta={delta} leaves the convex part of the wells (mu <= 0); use delta < 1/3")
        return delta


class SteadySection(_Section):
    residual_tol: float = Field(1e-3, gt=0)
    analytic_tol: float = Field(1e-12, gt=0)
    hilbert_tol: float = Field(1e-3, gt=0)
    refine: bool = True
    min_order: float = 1.5


class OutputSection(_Section):
    dir: str = "pn_relax_out"
    formats: List[Literal["json", "csv"]] = Field(default_factory=lambda: ["json", "csv"])
    final_field: bool = False


class RunConfig(_Section):
    grid: GridSection
    evolve: EvolveSection = EvolveSection()
    initial: InitialSection = InitialSection()
    monitors: MonitorsSection = MonitorsSection()
    spectral: SpectralSection = SpectralSection()
    shift: ShiftSection = ShiftSection()
    steady: SteadySection = SteadySection()
    output: OutputSection = OutputSection()

    def resolved(self) -> Dict[str, Any]:
        return self.model_dump(mode="json")


def parse_config(data: Any) -> RunConfig:
    """Validate a mapping; raises :class:`ConfigError` naming the first bad field."""
    if not isinstance(data, dict):
        raise ConfigError("<root>", "config must be a mapping")
    try:
        cfg = RunConfig.model_validate(data)
    except ValidationError as exc:
        err = exc.errors()[0]
        loc = ".".join(str(p) for p in err["loc"]) or "<root>"
        raise ConfigError(loc, err["msg"]) from None
    _check_initial(cfg)
    return cfg


def _check_initial(cfg: RunConfig) -> None:
    # initial data ordering is cheap to verify and is a precondition of evolve
    from .evolution import OrderingError, make_initial
    from .grid import make_grid

    try:
        make_initial(cfg.initial.kind, dict(cfg.initial.params), make_grid(cfg.grid.R, cfg.grid.N))
    except OrderingError as exc:
        raise ConfigError("initial.params", str(exc)) from None


def load_config(path) -> RunConfig:
    text = Path(path).read_text()
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError("<file>", f"not valid YAML: {exc}") from None
    return parse_config(data)
