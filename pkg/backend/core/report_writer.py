import csv
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, TextIO, Union

from backend.core.errors import FieldValidationError
from backend.core.models import ReportDocument
from backend.storage.run_store import RunStore

logger = logging.getLogger(__name__)

SCHEMA_NAME = "report_schema.json"


class ReportWriter:
    """Write report.json, series.csv and the summary table of a run."""

    def __init__(self, store: RunStore):
        self.store = store

    def write_report(self, report: ReportDocument) -> Path:
        self.store.report_path.write_text(report.model_dump_json(indent=2), encoding="utf-8")
        return self.store.report_path

    def write_schema(self) -> Path:
        """Ship the JSON schema of report.json next to it."""
        path = self.store.out_dir / SCHEMA_NAME
        path.write_text(json.dumps(ReportDocument.model_json_schema(), indent=2, sort_keys=True), encoding="utf-8")
        return path

    def write_series(self, series: Mapping[str, Sequence[float]]) -> List[str]:
        """
        Write series.csv: column t first, then one column per series.

        Args:
            series: Mapping with key "t" plus equally long value lists

        Returns:
            Column names after t
        """
        times = list(series.get("t", []))
        columns = [name for name in series if name != "t"]
        for name in columns:
            if len(series[name]) != len(times):
                raise FieldValidationError(f"series '{name}' has {len(series[name])} values for {len(times)} nodes")
        with open(self.store.series_path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(["t"] + columns)
            for i, t in enumerate(times):
                writer.writerow([_exact(t)] + [_exact(series[name][i]) for name in columns])
        return columns

    def summary_table(self, report: ReportDocument) -> str:
        """One-screen summary of a finished run."""
        meta = report.metadata
        lines = [
            f"{report.get_status_emoji()} {meta.scenario if meta else 'run'}: {report.status.upper()}"
            + (f" ({report.failure_reason})" if report.failure_reason else ""),
        ]
        if meta:
            lines.append(f"   config {meta.config_hash[:12]}  seed {meta.seed}  version {meta.package_version}")
        if report.invariant_checks:
            lines.append("")
            lines.append(f"   {'check':<28} {'value':>12} {'tolerance':>12}  ok")
            for check in report.invariant_checks:
                mark = "yes" if check.passed else "NO"
                lines.append(f"   {check.name:<28} {check.value:>12.3e} {check.tolerance:>12.1e}  {mark}")
        if report.decay_fits:
            lines.append("")
            lines.append(f"   {'series':<28} {'exponent':>9} {'target':>8} {'r^2':>7}  ok")
            for fit in report.decay_fits:
                target = "-" if fit.target_exponent is None else f"{fit.target_exponent:.3f}"
                exponent = "zero" if fit.zero_series else f"{fit.exponent:.3f}"
                mark = "yes" if fit.within_envelope else "NO"
                lines.append(f"   {fit.series_name:<28} {exponent:>9} {target:>8} {fit.r_squared:>7.3f}  {mark}")
        scalars = {key: value for key, value in report.results.items() if isinstance(value, (int, float, str, bool))}
        if scalars:
            lines.append("")
            for key, value in scalars.items():
                shown = f"{value:.6g}" if isinstance(value, float) else str(value)
                lines.append(f"   {key:<28} {shown}")
        return "\n".join(lines)


def _exact(value: float) -> str:
    return "%.17g" % float(value)


def emit_report(
    report: ReportDocument,
    series: Optional[Mapping[str, Sequence[float]]],
    store: RunStore,
    stream: Optional[TextIO] = None,
) -> Dict[str, Path]:
    """
    Write every artifact of a finished run and print the summary table.

    Args:
        report: Completed report (series_columns is filled in here)
        series: Node series including "t"; None or empty gives a header-only CSV
        store: Run directory
        stream: Where the summary goes (stdout by default)

    Returns:
        Paths of the written files
    """
    writer = ReportWriter(store)
    report.series_columns = writer.write_series(series or {"t": []})
    paths = {
        "series": store.series_path,
        "report": writer.write_report(report),
        "schema": writer.write_schema(),
    }
    print(writer.summary_table(report), file=stream or sys.stdout)
    logger.info(f"Report written to {paths['report']}")
    return paths


def load_report(path: Union[str, Path]) -> ReportDocument:
    """Read report.json back through the pydantic schema."""
    return ReportDocument.model_validate_json(Path(path).read_text(encoding="utf-8"))
