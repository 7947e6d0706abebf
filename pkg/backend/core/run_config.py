"""
Run configuration: one TOML file per run, validated in full before any compute.
"""

import hashlib
import json
import logging
import os
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Any, Dict, Iterable, List, Literal, Optional, Union, get_args

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from backend.core.cauchy_solver import SolverSettings, TimeGridSpec
from backend.core.errors import ConfigError
from backend.core.potentials import TimeKernelQuadrature
from backend.core.profiles import AsymptoticState, ProfileVariant, WPlusSpec, make_w_plus
from backend.core.spectral_core import SpectralGrid

logger = logging.getLogger(__name__)

ScenarioName = Literal[
    "identities",
    "fixed_point",
    "decay_suite",
    "finite_t0_crosscheck",
    "energy_drift",
    "scaling_law",
    "tmax_doubling",
]
SCENARIOS: List[str] = list(get_args(ScenarioName))

DEFAULT_WORKERS = 4


class GridConfig(BaseModel):
    """Periodic box of n^3 points and period L."""

    model_config = ConfigDict(extra="forbid")

    n: int = Field(16, gt=1, description="Grid points per axis (power of two)")
    L: float = Field(16.0, gt=0.0, description="Box period")

    @field_validator("n")
    @classmethod
    def _power_of_two(cls, value: int) -> int:
        if value & (value - 1):
            raise ValueError(f"n = {value} is not a power of two")
        return value

    def build(self) -> SpectralGrid:
        return SpectralGrid(n_per_axis=self.n, box_length=self.L)


class PhysicsConfig(BaseModel):
    """Regularity parameters and profile variant."""

    model_config = ConfigDict(extra="forbid")

    beta: float = Field(0.3, gt=0.0, lt=0.5, description="Cutoff exponent of the short/long split")
    alpha: float = Field(3.0, gt=1.0, description="Extra regularity of w_+")
    k: float = Field(2.0, ge=0.0, description="Base Sobolev order")
    variant: ProfileVariant = Field("full", description="Profile variant: full, simplified or closed_form")
    nodes_per_decade: int = Field(40, ge=2, description="Lattice density of the profile integrals below T")

    @model_validator(mode="after")
    def _beta_alpha(self) -> "PhysicsConfig":
        if self.beta * (self.alpha + 1.0) < 1.0:
            raise ConfigError(
                "beta_alpha_constraint",
                f"beta * (alpha + 1) = {self.beta * (self.alpha + 1.0):.4g} must be >= 1",
            )
        return self


class DiagnosticsConfig(BaseModel):
    """Thresholds of the scenario checks."""

    model_config = ConfigDict(extra="forbid")

    window_start_factor: float = Field(10 ** 0.5, ge=1.0, description="Decay fits start at this multiple of T")
    slack: float = Field(0.2, ge=0.0, description="Allowed excess of a fitted exponent over its envelope")
    min_r_squared: float = Field(0.95, ge=0.0, le=1.0, description="Smallest accepted r^2 of a decay fit")
    t0_factor: float = Field(3.0, ge=1.0, description="Finite-t0 cross-check restarts at t0 = t0_factor * T")
    crosscheck_factor: float = Field(10.0, gt=0.0, description="Cross-check threshold in units of solver.tol")
    energy_drift_tol: float = Field(1e-2, gt=0.0, description="Relative energy drift allowed per time decade")
    maxwell_tol: float = Field(1e-3, gt=0.0, description="Largest relative Maxwell residual of the assembled solution")
    scaling_factor: float = Field(2.0, gt=1.0, description="Amplitude ratio of the scaling-law pair")
    scaling_rtol: float = Field(0.15, gt=0.0, description="Relative tolerance on the cubic scaling ratio")


class RunConfig(BaseModel):
    """Everything a scenario run depends on."""

    model_config = ConfigDict(extra="forbid")

    grid: GridConfig = Field(default_factory=GridConfig)
    physics: PhysicsConfig = Field(default_factory=PhysicsConfig)
    time: TimeGridSpec = Field(default_factory=TimeGridSpec)
    solver: SolverSettings = Field(default_factory=SolverSettings)
    quadrature: TimeKernelQuadrature = Field(default_factory=TimeKernelQuadrature)
    initial_state: WPlusSpec = Field(default_factory=WPlusSpec)
    diagnostics: DiagnosticsConfig = Field(default_factory=DiagnosticsConfig)
    scenario: ScenarioName
    seed: int = Field(0, ge=0, description="Seed of the randomized identity checks")
    out_dir: Path

    @model_validator(mode="after")
    def _check_windows(self) -> "RunConfig":
        if self.scenario == "decay_suite":
            span = self.time.T_max / self.time.T
            needed = 10.0 * self.diagnostics.window_start_factor
            if span < needed * (1 - 1e-12):
                raise ConfigError(
                    "decay_window",
                    f"decay_suite needs T_max / T >= {needed:.4g} for a one-decade fit window, got {span:.4g}",
                )
        if self.scenario == "finite_t0_crosscheck":
            t0 = self.diagnostics.t0_factor * self.time.T
            if t0 > self.time.times[-1]:
                raise ConfigError("t0_outside_window", f"t0 = {t0:.4g} lies beyond T_max = {self.time.T_max:.4g}")
        return self

    def build_grid(self) -> SpectralGrid:
        return self.grid.build()

    def build_state(self, amplitude_factor: float = 1.0) -> AsymptoticState:
        """Sample w_+ and attach the regularity parameters."""
        w_plus = make_w_plus(self.build_grid(), self.initial_state)
        if amplitude_factor != 1.0:
            w_plus = w_plus.with_values(amplitude_factor * w_plus.values)
        return AsymptoticState(w_plus=w_plus, alpha=self.physics.alpha, beta=self.physics.beta, k=self.physics.k)

    def canonical(self) -> Dict[str, Any]:
        """JSON-ready dump without out_dir, the input of config_hash."""
        return self.model_dump(mode="json", exclude={"out_dir"}, exclude_none=True)

    def config_hash(self) -> str:
        payload = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()

    def to_toml(self) -> str:
        return dump_toml(self.model_dump(mode="json", exclude_none=True))


# loading


def _first_config_error(exc: ValidationError) -> ConfigError:
    for error in exc.errors():
        cause = error.get("ctx", {}).get("error")
        if isinstance(cause, ConfigError):
            return cause
    details = "; ".join(
        f"{'.'.join(str(part) for part in error['loc']) or '<root>'}: {error['msg']}" for error in exc.errors()
    )
    return ConfigError("invalid_config", details)


def parse_override(text: str) -> tuple:
    """Split 'section.key=value' into (['section', 'key'], value).

    The value is read as a TOML scalar or array; anything that does not parse
    is kept as a bare string.
    """
    if "=" not in text:
        raise ConfigError("override_syntax", f"override '{text}' is not of the form key=value")
    key, raw = text.split("=", 1)
    path = [part.strip() for part in key.strip().split(".")]
    if not all(path):
        raise ConfigError("override_syntax", f"override '{text}' has an empty key segment")
    raw = raw.strip()
    try:
        value = tomllib.loads(f"value = {raw}")["value"]
    except tomllib.TOMLDecodeError:
        value = raw
    return path, value


def apply_overrides(data: Dict[str, Any], overrides: Iterable[str]) -> Dict[str, Any]:
    for text in overrides:
        path, value = parse_override(text)
        table = data
        for part in path[:-1]:
            table = table.setdefault(part, {})
            if not isinstance(table, dict):
                raise ConfigError("override_syntax", f"override '{text}' descends into a non-table value")
        table[path[-1]] = value
    return data


def resolve_out_dir(out_dir: Union[str, Path]) -> Path:
    """Prefix relative output directories with MSSCATTER_OUT_ROOT when it is set."""
    out_dir = Path(out_dir)
    root = os.getenv("MSSCATTER_OUT_ROOT")
    if root and not out_dir.is_absolute():
        return Path(root) / out_dir
    return out_dir


def load_config(
    path: Union[str, Path],
    overrides: Iterable[str] = (),
    scenario: Optional[str] = None,
    out_dir: Optional[Union[str, Path]] = None,
) -> RunConfig:
    """
    Read a TOML run file, apply dotted overrides and validate.

    Args:
        path: TOML config file
        overrides: 'section.key=value' strings, applied in order
        scenario: Scenario name; replaces the file value when given
        out_dir: Output directory; replaces the file value when given

    Returns:
        Validated RunConfig

    Raises:
        ConfigError: On TOML syntax errors or any constraint violation
        OSError: If the file cannot be read
    """
    path = Path(path)
    with open(path, "rb") as handle:
        try:
            data = tomllib.load(handle)
        except tomllib.TOMLDecodeError as e:
            raise ConfigError("toml_syntax", f"{path}: {e}") from e

    apply_overrides(data, overrides)
    if scenario is not None:
        data["scenario"] = scenario
    if out_dir is not None:
        data["out_dir"] = str(out_dir)
    if "out_dir" in data:
        data["out_dir"] = str(resolve_out_dir(data["out_dir"]))

    solver = data.setdefault("solver", {})
    if isinstance(solver, dict) and "workers" not in solver:
        solver["workers"] = int(os.getenv("MSSCATTER_WORKERS", str(DEFAULT_WORKERS)))

    initial = data.get("initial_state")
    if isinstance(initial, dict) and initial.get("dump_path"):
        dump_path = Path(initial["dump_path"])
        if not dump_path.is_absolute():
            initial["dump_path"] = str(path.parent / dump_path)

    try:
        cfg = RunConfig.model_validate(data)
    except ValidationError as e:
        raise _first_config_error(e) from e
    logger.info(f"Loaded {path} for scenario {cfg.scenario} (config {cfg.config_hash()[:12]})")
    return cfg


# archive


def _toml_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        if isinstance(value, float) and value != value:
            return "nan"
        if value in (float("inf"), float("-inf")):
            return "inf" if value > 0 else "-inf"
        return repr(value)
    if isinstance(value, str):
        return json.dumps(value)
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_toml_value(item) for item in value) + "]"
    raise TypeError(f"cannot write {type(value).__name__} as a TOML value")


def dump_toml(data: Dict[str, Any]) -> str:
    """Write a nested dict of scalars and arrays as TOML (tables one level deep)."""
    lines: List[str] = []
    for key, value in data.items():
        if not isinstance(value, dict) and value is not None:
            lines.append(f"{key} = {_toml_value(value)}")
    for key, value in data.items():
        if isinstance(value, dict):
            lines.append("")
            lines.append(f"[{key}]")
            for inner, item in value.items():
                if isinstance(item, dict):
                    raise TypeError(f"nested table {key}.{inner} is not supported")
                if item is not None:
                    lines.append(f"{inner} = {_toml_value(item)}")
    return "\n".join(lines) + "\n"
