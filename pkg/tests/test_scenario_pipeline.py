"""
Tests for scenario orchestration and the identity suite.
"""

import io
from pathlib import Path

import numpy as np
import pytest

from backend.core.errors import ConfigError, NonContractionError, ToleranceError
from backend.core.identity_suite import run_identity_suite
from backend.core.report_writer import load_report
from backend.core.run_config import SCENARIOS, RunConfig, load_config
from backend.core.scenario_pipeline import SCENARIO_STEPS, ScenarioPipeline, failure_reason, run_scenario
from backend.core.spectral_core import SpectralGrid
from backend.storage.run_store import RunStore

CONFIGS = Path(__file__).resolve().parent.parent / "configs"

# small nonzero Gaussian on the coarse vacuum box
SMALL_GAUSSIAN = [
    "initial_state.amplitude=0.1",
    "initial_state.target_l2=0.02",
    "initial_state.width=1.0",
    "solver.workers=1",
]


def vacuum(tmp_path: Path, scenario: str, overrides=()) -> RunConfig:
    return load_config(
        CONFIGS / "vacuum.toml", ["solver.workers=1", *overrides], scenario=scenario, out_dir=tmp_path / scenario
    )


class TestGraph:
    def test_every_scenario_has_steps(self) -> None:
        assert set(SCENARIO_STEPS) == set(SCENARIOS)

    def test_unknown_scenario_rejected(self) -> None:
        with pytest.raises(ConfigError):
            ScenarioPipeline("sweep")

    def test_progress_reports_each_step(self, tmp_path: Path) -> None:
        cfg = vacuum(tmp_path, "energy_drift")
        seen = []
        final = ScenarioPipeline(cfg.scenario).run(cfg, lambda current, total, message: seen.append(message))
        steps = [message for message in seen if message.startswith("Step")]
        assert len(steps) == len(SCENARIO_STEPS["energy_drift"])
        assert final["progress_messages"] == steps
        assert final["error"] is None

    def test_failing_step_stops_the_chain(self, tmp_path: Path) -> None:
        cfg = vacuum(tmp_path, "energy_drift", ["solver.max_iters=1", *SMALL_GAUSSIAN])
        final = ScenarioPipeline(cfg.scenario).run(cfg)
        assert isinstance(final["failure"], NonContractionError)
        assert final["error"].startswith("NonContractionError")
        assert final["solution"] is None
        assert len(final["progress_messages"]) == 2


class TestVacuumRuns:
    @pytest.mark.parametrize("scenario", [name for name in SCENARIOS if name != "identities"])
    def test_zero_state_passes_with_zero_series(self, tmp_path: Path, scenario: str) -> None:
        cfg = vacuum(tmp_path, scenario)
        report = run_scenario(cfg, stream=io.StringIO())
        assert report.status == "pass"
        assert all(check.passed for check in report.invariant_checks)
        lines = (cfg.out_dir / "series.csv").read_text().splitlines()
        if scenario != "scaling_law":
            assert len(lines) == cfg.time.node_count + 1
            for line in lines[1:]:
                values = [float(item) for item in line.split(",")[1:]]
                assert all(value == 0.0 for value in values)

    def test_decay_suite_reports_zero_fits(self, tmp_path: Path) -> None:
        report = run_scenario(vacuum(tmp_path, "decay_suite"), stream=io.StringIO())
        assert report.decay_fits
        assert all(fit.zero_series for fit in report.decay_fits)
        assert "lebesgue_inf" in report.series_columns

    def test_artifacts_are_written(self, tmp_path: Path) -> None:
        cfg = vacuum(tmp_path, "fixed_point")
        report = run_scenario(cfg, stream=io.StringIO())
        assert load_report(cfg.out_dir / "report.json") == report
        assert (cfg.out_dir / "config.toml").exists()
        assert (cfg.out_dir / "report_schema.json").exists()
        assert RunStore(cfg.out_dir).list_checkpoints() == ["trajectory"]
        assert report.metadata.config_hash == cfg.config_hash()
        assert report.iterations

    def test_archived_config_reruns(self, tmp_path: Path) -> None:
        cfg = vacuum(tmp_path, "fixed_point")
        run_scenario(cfg, stream=io.StringIO())
        again = load_config(cfg.out_dir / "config.toml")
        assert again.config_hash() == cfg.config_hash()


class TestDeterminism:
    def test_repeated_runs_write_identical_series(self, tmp_path: Path) -> None:
        outputs = []
        for name in ("first", "second"):
            cfg = load_config(
                CONFIGS / "vacuum.toml", SMALL_GAUSSIAN, scenario="fixed_point", out_dir=tmp_path / name
            )
            run_scenario(cfg, stream=io.StringIO())
            outputs.append((cfg.out_dir / "series.csv").read_bytes())
        assert outputs[0] == outputs[1]
        assert any(float(v) > 0 for v in outputs[0].decode().splitlines()[1].split(",")[1:])


class TestFailures:
    def test_non_contraction_writes_error_report(self, tmp_path: Path) -> None:
        cfg = vacuum(tmp_path, "fixed_point", ["solver.max_iters=1", *SMALL_GAUSSIAN])
        with pytest.raises(NonContractionError):
            run_scenario(cfg, stream=io.StringIO())
        report = load_report(cfg.out_dir / "report.json")
        assert report.status == "error"
        assert report.failure_reason == "non_contraction"
        assert report.results["contraction_ratios"] == []

    def test_tolerance_failure_raises_after_report(self, tmp_path: Path) -> None:
        cfg = vacuum(tmp_path, "scaling_law", ["diagnostics.scaling_rtol=1e-12", *SMALL_GAUSSIAN])
        with pytest.raises(ToleranceError):
            run_scenario(cfg, stream=io.StringIO())
        report = load_report(cfg.out_dir / "report.json")
        assert report.status == "fail"
        assert "cubic_scaling" in report.failure_reason
        assert report.results["scaling_ratio"] == pytest.approx(8.0, rel=0.15)

    def test_reason_codes(self) -> None:
        assert failure_reason(ConfigError("decay_window", "short")) == "decay_window"
        assert failure_reason(NonContractionError([1.2])) == "non_contraction"
        assert failure_reason(FileNotFoundError("gone")) == "io_error"
        assert failure_reason(ToleranceError("x")) == "tolerance_error"


class TestIdentitySuite:
    def test_all_identities_hold(self) -> None:
        checks = run_identity_suite(1, SpectralGrid(n_per_axis=32, box_length=16.0))
        failed = [(check.name, check.value) for check in checks if not check.passed]
        assert failed == []
        assert {check.name for check in checks} == {
            "mdfm_factorization",
            "dilation_commutation",
            "fj_zero_modes",
            "retarded_integral",
            "commutator_xP",
            "split_reconstruction",
            "homogeneous_l2_drift",
        }
        dilation = next(check for check in checks if check.name == "dilation_commutation")
        assert "norm m=1" in dilation.detail

    def test_seed_determines_results(self) -> None:
        grid = SpectralGrid(n_per_axis=8, box_length=4.0)
        a = [check.value for check in run_identity_suite(4, grid)]
        b = [check.value for check in run_identity_suite(4, grid)]
        assert a == b

    def test_identities_scenario_report(self, tmp_path: Path) -> None:
        cfg = load_config(CONFIGS / "identities.toml", out_dir=tmp_path / "identities")
        report = run_scenario(cfg, stream=io.StringIO())
        assert report.status == "pass"
        assert len(report.invariant_checks) == 7
        assert report.series_columns == []
        assert np.isfinite([check.value for check in report.invariant_checks]).all()
