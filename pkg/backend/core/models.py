from typing import Any, Dict, List, Literal, Optional, Tuple
from datetime import datetime

from pydantic import BaseModel, ConfigDict, Field, model_validator

SCHEMA_VERSION = "1.0"


class WeightedNorms(BaseModel):
    """Weighted suprema of a trajectory over its nodes."""
    Y: float = Field(0.0, description="sup t (ln t)^-1 (|q|_k v |xq|_k)")
    Y1: float = Field(0.0, description="sup (t^-1 ln t + t^-alpha*beta)^-1 |q|_{k+1}")
    Z0: float = Field(0.0, description="sup [t^-1 ln t (ln t + 1)]^-1 |sigma|^._k")
    Z1: float = Field(0.0, description="sup [t^-1 ln t (ln t + t^beta)]^-1 |sigma|^._{k+1}")
    Z2: float = Field(0.0, description="sup [t^-1 ln t (ln t + t^2beta)]^-1 |sigma|^._{k+2}")
    N: float = Field(0.0, description="sup t (ln t)^-1 (|B_b| v |x.B_b|)_{K^{k+1}}")

    def as_dict(self) -> Dict[str, float]:
        return self.model_dump()

    def dominated_by(self, other: "WeightedNorms", rtol: float = 1e-12) -> bool:
        """True if every entry is at most the matching entry of other."""
        mine, theirs = self.model_dump(), other.model_dump()
        return all(mine[key] <= theirs[key] * (1 + rtol) + 1e-300 for key in mine)


class IterationReport(BaseModel):
    """One Gamma iterate of a fixed-point run."""
    iterate_index: int = Field(description="1 for the first application of Gamma to the zero trajectory")
    weighted_norms: WeightedNorms = Field(default_factory=WeightedNorms)
    distance: float = Field(0.0, description="Weighted distance to the previous iterate")
    relative_distance: float = Field(0.0, description="distance / weighted size of the iterate")
    contraction_ratio: Optional[float] = Field(
        None, description="distance_n / distance_{n-1}, defined from iterate 2 on"
    )
    residuals: Dict[str, float] = Field(default_factory=dict, description="Per-equation residual norms")


class DecayFit(BaseModel):
    """Power-law fit of a norm series against t^exponent (ln t)^log_power.

    The envelope is one-sided: within_envelope only bounds the exponent from
    above by target_exponent + slack, so faster decay passes.
    """
    series_name: str
    exponent: float = Field(0.0, description="Fitted exponent after dividing out (ln t)^log_power")
    log_power: int = Field(0, ge=0, le=2)
    r_squared: float = Field(0.0, description="Coefficient of determination of the log-log fit")
    window: Tuple[float, float] = Field(description="(t_lo, t_hi) of the fit window")
    n_nodes: int = Field(0, description="Nodes inside the window")
    target_exponent: Optional[float] = Field(None, description="Envelope exponent the series must not exceed")
    slack: float = Field(0.2, description="Allowed excess over target_exponent")
    within_envelope: Optional[bool] = None
    zero_series: bool = Field(False, description="Series vanished identically; fit skipped")

    @model_validator(mode="after")
    def _envelope(self) -> "DecayFit":
        if self.zero_series:
            self.within_envelope = True
        elif self.target_exponent is not None and self.within_envelope is None:
            self.within_envelope = self.exponent <= self.target_exponent + self.slack
        return self


class InvariantCheck(BaseModel):
    """A measured quantity compared against its tolerance."""
    name: str
    value: float
    tolerance: float
    passed: bool
    detail: Optional[str] = None

    @classmethod
    def below(cls, name: str, value: float, tolerance: float, detail: Optional[str] = None) -> "InvariantCheck":
        return cls(name=name, value=float(value), tolerance=float(tolerance), passed=bool(value <= tolerance), detail=detail)


class RunMetadata(BaseModel):
    """Provenance recorded with every report."""
    scenario: str
    config_hash: str = Field(description="sha256 of the effective config")
    seed: int = 0
    package_version: str
    started_at: datetime = Field(default_factory=datetime.now)
    finished_at: Optional[datetime] = None
    grid: Dict[str, Any] = Field(default_factory=dict)


class ReportDocument(BaseModel):
    """Top-level report.json document."""
    model_config = ConfigDict(extra="forbid")

    schema_version: str = SCHEMA_VERSION
    metadata: Optional[RunMetadata] = None
    status: Literal["pass", "fail", "error"] = "pass"
    failure_reason: Optional[str] = None
    results: Dict[str, Any] = Field(default_factory=dict)
    invariant_checks: List[InvariantCheck] = Field(default_factory=list)
    decay_fits: List[DecayFit] = Field(default_factory=list)
    iterations: List[IterationReport] = Field(default_factory=list)
    series_columns: List[str] = Field(default_factory=list, description="Columns of series.csv after t")

    def failed_checks(self) -> List[InvariantCheck]:
        return [check for check in self.invariant_checks if not check.passed]

    def get_status_emoji(self) -> str:
        """Marker used in the summary table."""
        return {"pass": "✅", "fail": "❌", "error": "⚠️"}.get(self.status, "❓")
