"""
Scenario orchestration: each scenario is a linear langgraph workflow of steps
sharing one ScenarioState.
"""

import logging
from datetime import datetime
from typing import Any, Callable, Dict, List, Optional, TypedDict

import numpy as np
from langgraph.graph import END, StateGraph

from backend import __version__
from backend.core.cauchy_solver import (
    B_DIV_TOL,
    SIGMA_CURL_TOL,
    ProgressCallback,
    Trajectory,
    gamma_map,
    solve_at_infinity,
    solve_finite_t0,
    tmax_convergence_check,
    trajectory_distance,
)
from backend.core.errors import ConfigError, NonContractionError, ToleranceError
from backend.core.identity_suite import run_identity_suite
from backend.core.models import DecayFit, InvariantCheck, IterationReport, ReportDocument, RunMetadata
from backend.core.profiles import AsymptoticState, ProfileTrack
from backend.core.report_writer import emit_report
from backend.core.run_config import RunConfig
from backend.core.spectral_core import NormSpec
from backend.core.wave_operator import (
    L2_CONSTANCY_TOL,
    PhysicalSolution,
    asymptotic_series,
    assemble_solution,
    energy_terms,
    maxwell_residuals,
    schrodinger_residual,
    verify_asymptotics,
)
from backend.storage.run_store import RunStore

logger = logging.getLogger(__name__)

SCENARIO_STEPS: Dict[str, List[str]] = {
    "identities": ["identities"],
    "fixed_point": ["prepare", "solve"],
    "decay_suite": ["prepare", "solve", "assemble", "decay_fits"],
    "finite_t0_crosscheck": ["prepare", "solve", "crosscheck"],
    "energy_drift": ["prepare", "solve", "assemble", "energy"],
    "scaling_law": ["prepare", "scaling"],
    "tmax_doubling": ["prepare", "solve", "tmax_doubling"],
}


class ScenarioState(TypedDict):
    """State threaded through the scenario steps."""
    config: RunConfig

    asymptotic_state: Optional[AsymptoticState]
    track: Optional[ProfileTrack]
    trajectory: Optional[Trajectory]
    solution: Optional[PhysicalSolution]

    iterations: List[IterationReport]
    results: Dict[str, Any]
    invariant_checks: List[InvariantCheck]
    decay_fits: List[DecayFit]
    series: Dict[str, List[float]]

    error: Optional[str]
    failure: Optional[BaseException]
    progress_messages: List[str]


def initial_state(cfg: RunConfig) -> ScenarioState:
    return ScenarioState(
        config=cfg,
        asymptotic_state=None,
        track=None,
        trajectory=None,
        solution=None,
        iterations=[],
        results={},
        invariant_checks=[],
        decay_fits=[],
        series={},
        error=None,
        failure=None,
        progress_messages=[],
    )


class ScenarioPipeline:
    """Builds and runs the step graph of one scenario."""

    def __init__(self, scenario: str, store: Optional[RunStore] = None):
        if scenario not in SCENARIO_STEPS:
            raise ConfigError("unknown_scenario", f"no scenario named '{scenario}'")
        self.scenario = scenario
        self.store = store
        self.steps = SCENARIO_STEPS[scenario]
        self.progress_callback: Optional[ProgressCallback] = None
        self.graph = self._build_graph()

    def _build_graph(self):
        """Linear graph: steps in order, then END."""
        workflow = StateGraph(ScenarioState)
        for name in self.steps:
            workflow.add_node(name, self._guarded(name, getattr(self, f"{name}_node")))
        workflow.set_entry_point(self.steps[0])
        for current, following in zip(self.steps, self.steps[1:]):
            workflow.add_edge(current, following)
        workflow.add_edge(self.steps[-1], END)
        return workflow.compile()

    def _guarded(self, name: str, step: Callable[[ScenarioState], None]) -> Callable[[ScenarioState], ScenarioState]:
        position = self.steps.index(name) + 1

        def node(state: ScenarioState) -> ScenarioState:
            if state.get("error"):
                return state
            self._report(state, position, f"Step {position}/{len(self.steps)}: {name}")
            try:
                step(state)
            except Exception as e:
                logger.error(f"Step {name} failed: {type(e).__name__}: {e}")
                state["error"] = f"{type(e).__name__}: {e}"
                state["failure"] = e
            return state

        return node

    def _report(self, state: ScenarioState, current: int, message: str) -> None:
        state["progress_messages"].append(message)
        logger.info(message)
        if self.progress_callback:
            self.progress_callback(current, len(self.steps), message)

    def run(self, cfg: RunConfig, progress_callback: Optional[ProgressCallback] = None) -> ScenarioState:
        self.progress_callback = progress_callback
        return self.graph.invoke(initial_state(cfg))

    # steps

    def identities_node(self, state: ScenarioState) -> None:
        cfg = state["config"]
        state["invariant_checks"].extend(run_identity_suite(cfg.seed, cfg.build_grid(), self.progress_callback))

    def prepare_node(self, state: ScenarioState) -> None:
        cfg = state["config"]
        asym = cfg.build_state()
        state["asymptotic_state"] = asym
        if self.scenario != "scaling_law":
            state["track"] = _track(cfg, asym)
        state["results"]["a_plus"] = asym.a_plus

    def solve_node(self, state: ScenarioState) -> None:
        cfg = state["config"]
        asym = state["asymptotic_state"]
        try:
            traj, reports = solve_at_infinity(
                asym, cfg.time, cfg.solver, cfg.quadrature, cfg.physics.variant, state["track"],
                self.progress_callback,
            )
        except NonContractionError as e:
            state["results"]["contraction_ratios"] = e.ratios
            raise
        state["trajectory"] = traj
        state["iterations"] = reports

        ratios = [r.contraction_ratio for r in reports if r.contraction_ratio is not None]
        state["results"].update(
            {
                "n_iterations": len(reports),
                "final_relative_distance": reports[-1].relative_distance if reports else 0.0,
                "contraction_ratios": ratios,
            }
        )
        # ratios are defined from iterate 2; the first two may still grow
        late = [r.contraction_ratio for r in reports[2:] if r.contraction_ratio is not None]
        state["invariant_checks"].append(
            InvariantCheck.below("contraction_ratio", max(late, default=0.0), 1.0, "largest ratio past iterate 2")
        )
        ops = state["track"].ops
        curl = max(ops.curl_defect(s) for s in traj.sigma)
        div = max(ops.divergence_defect(b) for b in traj.b_b)
        state["invariant_checks"].append(InvariantCheck.below("sigma_curl_free", curl, SIGMA_CURL_TOL))
        state["invariant_checks"].append(InvariantCheck.below("B_b_divergence_free", div, B_DIV_TOL))

        k = asym.k
        state["series"].update(
            {
                "t": list(traj.times),
                "q_L2": [ops.l2(q) for q in traj.q],
                "q_Hk": [ops.sobolev(q, k) for q in traj.q],
                "sigma_Kk": [ops.evaluate_norm(s, NormSpec(kind="K", order=k)) for s in traj.sigma],
                "Bb_Kk1": [ops.evaluate_norm(b, NormSpec(kind="K", order=k + 1.0)) for b in traj.b_b],
            }
        )
        if self.store is not None:
            self.store.save_trajectory(traj)

    def assemble_node(self, state: ScenarioState) -> None:
        cfg = state["config"]
        sol = assemble_solution(state["trajectory"], state["track"], cfg.quadrature, cfg.solver.workers)
        state["solution"] = sol
        state["invariant_checks"].extend(sol.invariant_checks(l2_tol=max(L2_CONSTANCY_TOL, 10.0 * cfg.solver.tol)))
        maxwell = maxwell_residuals(sol, cfg.quadrature, cfg.solver.workers)
        state["series"]["maxwell_residual"] = list(maxwell)
        state["invariant_checks"].append(
            InvariantCheck.below("maxwell_residual", max(maxwell), cfg.diagnostics.maxwell_tol, "largest over nodes")
        )
        if sol.n_nodes >= 5:
            middle = sol.n_nodes // 2
            absolute, scale = schrodinger_residual(sol, middle)
            state["results"]["schrodinger_residual_mid"] = absolute
            state["results"]["schrodinger_relative_mid"] = absolute / scale if scale > 0 else absolute

    def decay_fits_node(self, state: ScenarioState) -> None:
        cfg = state["config"]
        sol = state["solution"]
        series = asymptotic_series(sol)
        fits = verify_asymptotics(sol, cfg.diagnostics.window_start_factor, cfg.diagnostics.slack, series)
        state["decay_fits"] = fits
        for name, values in series.items():
            state["series"][name] = list(values)
        for fit in fits:
            if not fit.zero_series:
                state["invariant_checks"].append(
                    InvariantCheck(
                        name=f"fit_quality_{fit.series_name}",
                        value=fit.r_squared,
                        tolerance=cfg.diagnostics.min_r_squared,
                        passed=fit.r_squared >= cfg.diagnostics.min_r_squared,
                        detail="r^2 must reach the tolerance",
                    )
                )

    def crosscheck_node(self, state: ScenarioState) -> None:
        cfg = state["config"]
        traj = state["trajectory"]
        asym = state["asymptotic_state"]
        t0 = cfg.diagnostics.t0_factor * cfg.time.T
        index = traj.node_index(t0)
        recovered = solve_finite_t0(
            asym, float(traj.times[index]), traj.state(index), cfg.time, cfg.solver, cfg.quadrature,
            cfg.physics.variant, state["track"], self.progress_callback,
        )
        distance, relative = trajectory_distance(recovered, traj, asym)
        ops = state["track"].ops
        state["series"]["q_L2_finite_t0"] = [ops.l2(q) for q in recovered.q]
        state["results"].update({"t0": float(traj.times[index]), "crosscheck_distance": distance})
        threshold = cfg.diagnostics.crosscheck_factor * cfg.solver.tol
        state["invariant_checks"].append(
            InvariantCheck.below("finite_t0_agreement", relative, threshold, "relative weighted distance")
        )

    def energy_node(self, state: ScenarioState) -> None:
        cfg = state["config"]
        sol = state["solution"]
        terms = [energy_terms(sol, i) for i in range(sol.n_nodes)]
        for name in ("electric", "magnetic", "kinetic", "coulomb", "total"):
            state["series"][f"energy_{name}"] = [entry[name] for entry in terms]
        if sol.n_nodes >= 5:
            relative = []
            for i in range(sol.n_nodes):
                absolute, scale = schrodinger_residual(sol, i)
                relative.append(absolute / scale if scale > 0 else absolute)
            state["series"]["schrodinger_relative"] = relative

        total = np.array(state["series"]["energy_total"])
        decades = np.log10(sol.times[-1] / sol.times[0])
        drift = 0.0 if total[0] == 0.0 else float(np.max(np.abs(total - total[0])) / abs(total[0]) / decades)
        state["results"]["energy_initial"] = float(total[0])
        state["invariant_checks"].append(
            InvariantCheck.below("energy_drift", drift, cfg.diagnostics.energy_drift_tol, "relative, per decade")
        )

    def scaling_node(self, state: ScenarioState) -> None:
        cfg = state["config"]
        factor = cfg.diagnostics.scaling_factor
        sizes = []
        for scale in (1.0, factor):
            asym = state["asymptotic_state"] if scale == 1.0 else cfg.build_state(amplitude_factor=scale)
            track = _track(cfg, asym)
            start = Trajectory.zeros(asym.grid, cfg.time.times, b_a=track.b_star.copy())
            image = gamma_map(start, track, cfg.quadrature, cfg.solver)
            sizes.append(max(track.ops.l2(q) for q in image.q))
        expected = factor ** 3
        ratio = sizes[1] / sizes[0] if sizes[0] > 0 else None
        state["results"].update({"first_iterate_sizes": sizes, "scaling_ratio": ratio, "expected_ratio": expected})
        deviation = 0.0 if ratio is None else abs(ratio / expected - 1.0)
        state["invariant_checks"].append(
            InvariantCheck.below("cubic_scaling", deviation, cfg.diagnostics.scaling_rtol, f"ratio vs {expected:g}")
        )

    def tmax_doubling_node(self, state: ScenarioState) -> None:
        cfg = state["config"]
        check = tmax_convergence_check(
            state["asymptotic_state"], cfg.time, cfg.solver, cfg.quadrature, cfg.physics.variant,
            base=state["trajectory"],
        )
        state["results"].update({key: value for key, value in check.items() if key != "passed"})
        state["invariant_checks"].append(
            InvariantCheck.below("tmax_doubling", check["relative_change"], check["threshold"])
        )


def _track(cfg: RunConfig, asym: AsymptoticState) -> ProfileTrack:
    return ProfileTrack(
        asym, cfg.time.times, cfg.physics.variant, cfg.quadrature, cfg.physics.nodes_per_decade, cfg.solver.workers
    )


def failure_reason(exc: BaseException) -> str:
    """Machine-readable reason code of a failed run."""
    if isinstance(exc, ConfigError):
        return exc.reason
    if isinstance(exc, NonContractionError):
        return "non_contraction"
    if isinstance(exc, OSError):
        return "io_error"
    name = type(exc).__name__
    return "".join(f"_{c.lower()}" if c.isupper() else c for c in name).lstrip("_")


def build_report(cfg: RunConfig, final: ScenarioState, started_at: datetime) -> ReportDocument:
    """Collect the final state into a ReportDocument with its status."""
    failure = final.get("failure")
    report = ReportDocument(
        metadata=RunMetadata(
            scenario=cfg.scenario,
            config_hash=cfg.config_hash(),
            seed=cfg.seed,
            package_version=__version__,
            started_at=started_at,
            finished_at=datetime.now(),
            grid={"n": cfg.grid.n, "L": cfg.grid.L},
        ),
        results=_jsonable(final["results"]),
        invariant_checks=final["invariant_checks"],
        decay_fits=final["decay_fits"],
        iterations=final["iterations"],
    )
    if failure is not None:
        report.status = "error"
        report.failure_reason = failure_reason(failure)
        report.results["error"] = final.get("error")
        return report

    failed = [check.name for check in report.failed_checks()]
    failed += [f"decay_{fit.series_name}" for fit in report.decay_fits if not fit.within_envelope]
    if failed:
        report.status = "fail"
        report.failure_reason = "tolerance: " + ", ".join(failed)
    return report


def _jsonable(value: Any) -> Any:
    if isinstance(value, dict):
        return {key: _jsonable(item) for key, item in value.items()}
    if isinstance(value, (list, tuple, np.ndarray)):
        return [_jsonable(item) for item in value]
    if isinstance(value, np.generic):
        return value.item()
    return value


def run_scenario(
    cfg: RunConfig,
    progress_callback: Optional[ProgressCallback] = None,
    stream=None,
) -> ReportDocument:
    """
    Run the configured scenario and write its artifacts into cfg.out_dir.

    Args:
        cfg: Validated run configuration
        progress_callback: Optional callback(current, total, message)
        stream: Where the summary table goes (stdout by default)

    Returns:
        The written report (status "pass")

    Raises:
        NonContractionError, MsScatterError, OSError: Re-raised after the
            report with status "error" is written
        ToleranceError: If any check or decay fit failed its tolerance
    """
    started_at = datetime.now()
    store = RunStore(cfg.out_dir)
    store.save_config(cfg.to_toml())
    logger.info(f"Scenario {cfg.scenario} -> {store.out_dir} (config {cfg.config_hash()[:12]}, seed {cfg.seed})")

    pipeline = ScenarioPipeline(cfg.scenario, store)
    final = pipeline.run(cfg, progress_callback)
    report = build_report(cfg, final, started_at)
    emit_report(report, final["series"], store, stream)

    failure = final.get("failure")
    if failure is not None:
        raise failure
    if report.status == "fail":
        raise ToleranceError(f"{cfg.scenario} failed its tolerances: {report.failure_reason}")
    return report
