"""
Tests for the linearized stepper, the Gamma map and the fixed-point drivers.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from backend.core.cauchy_solver import (
    AuxState,
    FrozenCoefficients,
    LinearizedStepper,
    SolverSettings,
    TimeGridSpec,
    Trajectory,
    assign_Ba,
    assign_Bb,
    aux_residuals,
    fd_weights,
    gamma_map,
    solve_at_infinity,
    solve_finite_t0,
    step_linearized,
    time_derivative,
    tmax_convergence_check,
    trajectory_distance,
    weighted_norms,
)
from backend.core.errors import FieldValidationError, NonContractionError, StencilError, StepSizeError
from backend.core.potentials import TimeKernelQuadrature
from backend.core.profiles import AsymptoticState, ProfileTrack, WPlusSpec, make_w_plus
from backend.core.spectral_core import ComplexScalarField, RealVectorField, SpectralGrid, spectral_ops
from tests.fields import gaussian, random_complex, random_vector, swirl

FAST_QUAD = TimeKernelQuadrature(ratio=1.26, points_per_panel=4)
COARSE_QUAD = TimeKernelQuadrature(ratio=2.0, points_per_panel=4)
SHORT_TIME = TimeGridSpec(T=2.0, T_max=20.0, rho=1.26)
TEST_SETTINGS = SolverSettings(tol=1e-6, step_tol=1e-8)
# fixed-point error well below the integrator tolerance
CONVERGED_SETTINGS = SolverSettings(tol=1e-10, step_tol=1e-8, max_iters=60)


def small_state(grid: SpectralGrid, target_l2: float = 0.1) -> AsymptoticState:
    w_plus = make_w_plus(grid, WPlusSpec(family="gaussian", width=1.5, target_l2=target_l2))
    return AsymptoticState(w_plus=w_plus, alpha=3.0, beta=0.3)


def zero_state(grid: SpectralGrid) -> AsymptoticState:
    return AsymptoticState(w_plus=ComplexScalarField.zeros(grid), alpha=3.0, beta=0.3)


@pytest.fixture(scope="module")
def grid16() -> SpectralGrid:
    return SpectralGrid(n_per_axis=16, box_length=16.0)


@pytest.fixture(scope="module")
def converged(grid16: SpectralGrid):
    state = small_state(grid16)
    time = TimeGridSpec(T=4.0, T_max=40.0, rho=1.26)
    track = ProfileTrack(state, time.times, "full", FAST_QUAD, nodes_per_decade=10)
    traj, reports = solve_at_infinity(state, time, CONVERGED_SETTINGS, FAST_QUAD, track=track)
    return state, time, track, traj, reports


def random_trajectory(grid: SpectralGrid, times: np.ndarray, seed: int) -> Trajectory:
    ops = spectral_ops(grid)
    q = np.array([random_complex(grid, seed + i) for i in range(times.size)])
    sigma = np.array([ops.gradient_part(random_vector(grid, seed + 100 + i)) for i in range(times.size)])
    b_b = np.array([ops.leray(random_vector(grid, seed + 200 + i)) for i in range(times.size)])
    return Trajectory(grid, times, q, sigma, b_b)


class TestTimeGrid:
    def test_geometric_nodes_cover_window(self) -> None:
        times = SHORT_TIME.times
        assert times[0] == 2.0
        assert times[-1] >= 20.0
        assert np.allclose(times[1:] / times[:-1], 1.26)

    def test_rejects_T_below_floor(self) -> None:
        with pytest.raises(ValueError):
            TimeGridSpec(T=1.5, T_max=20.0)

    def test_rejects_empty_window(self) -> None:
        with pytest.raises(ValueError):
            TimeGridSpec(T=10.0, T_max=5.0)

    def test_doubled_grid_contains_original_nodes(self) -> None:
        original = SHORT_TIME.times
        doubled = SHORT_TIME.doubled().times
        assert doubled[-1] >= 2.0 * original[-1] * (1 - 1e-12)
        assert np.allclose(doubled[: original.size], original, rtol=1e-14)


class TestTrajectory:
    def test_zero_states_satisfy_invariants(self) -> None:
        grid = SpectralGrid(n_per_axis=8, box_length=8.0)
        traj = Trajectory.zeros(grid, SHORT_TIME.times)
        states = traj.states
        assert len(states) == SHORT_TIME.node_count
        assert [s.t for s in states] == list(SHORT_TIME.times)

    def test_rejects_mismatched_arrays(self) -> None:
        grid = SpectralGrid(n_per_axis=8, box_length=8.0)
        traj = Trajectory.zeros(grid, SHORT_TIME.times)
        with pytest.raises(FieldValidationError):
            Trajectory(grid, SHORT_TIME.times, traj.q[:-1], traj.sigma, traj.b_b)

    def test_rejects_unordered_times(self) -> None:
        grid = SpectralGrid(n_per_axis=8, box_length=8.0)
        traj = Trajectory.zeros(grid, np.array([2.0, 3.0]))
        with pytest.raises(FieldValidationError):
            Trajectory(grid, np.array([3.0, 2.0]), traj.q, traj.sigma, traj.b_b)

    def test_aux_state_rejects_rotational_sigma(self) -> None:
        grid = SpectralGrid(n_per_axis=16, box_length=12.0)
        with pytest.raises(ValueError):
            AuxState(
                q=ComplexScalarField.zeros(grid),
                sigma=swirl(grid, 1.5),
                B_b=RealVectorField.zeros(grid),
                t=3.0,
            )


class TestStepLinearized:
    @pytest.fixture(scope="class")
    def grid32(self) -> SpectralGrid:
        return SpectralGrid(n_per_axis=32, box_length=16.0)

    @pytest.fixture(scope="class")
    def frozen(self, grid32: SpectralGrid):
        """Zero profiles with a hand-made transport field and magnetic field."""
        times = TimeGridSpec(T=2.0, T_max=20.0, rho=10.0 ** 0.25).times
        track = ProfileTrack(zero_state(grid32), times, "simplified", COARSE_QUAD, nodes_per_decade=4)
        ops = spectral_ops(grid32)
        chi = 0.3 * gaussian(grid32, 1.5).values.real
        sigma = np.repeat(ops.gradient(chi)[None], times.size, axis=0)
        b_b = np.repeat(0.2 * ops.leray(swirl(grid32, 1.5).components)[None], times.size, axis=0)
        b_a = np.repeat(0.1 * ops.leray(swirl(grid32, 2.0).components)[None], times.size, axis=0)
        traj = Trajectory(grid32, times, np.zeros((times.size,) + grid32.shape, dtype=complex), sigma, b_b, b_a)
        return traj, track

    def test_zero_coefficients_leave_state_unchanged(self) -> None:
        grid = SpectralGrid(n_per_axis=8, box_length=8.0)
        times = SHORT_TIME.times
        track = ProfileTrack(zero_state(grid), times, "simplified", COARSE_QUAD, nodes_per_decade=4)
        traj = Trajectory.zeros(grid, times, b_a=track.b_star.copy())
        out = step_linearized(traj, track, traj.state(0), 1, TEST_SETTINGS, COARSE_QUAD)
        assert np.max(np.abs(out.q.values)) == 0.0
        assert np.max(np.abs(out.sigma.components)) == 0.0
        assert out.t == times[1]

    def test_free_part_is_exact(self) -> None:
        grid = SpectralGrid(n_per_axis=16, box_length=12.0)
        times = SHORT_TIME.times
        track = ProfileTrack(zero_state(grid), times, "simplified", COARSE_QUAD, nodes_per_decade=4)
        traj = Trajectory.zeros(grid, times, b_a=track.b_star.copy())
        ops = spectral_ops(grid)
        q0 = gaussian(grid, 1.0, amplitude=1.0 + 0.5j).values
        start = AuxState(q=ComplexScalarField(grid=grid, values=q0), sigma=RealVectorField.zeros(grid),
                         B_b=RealVectorField.zeros(grid), t=times[0])
        out = step_linearized(traj, track, start, 3, TEST_SETTINGS, COARSE_QUAD)
        expected = ops.free_propagator(ops.free_propagator(q0, 1.0 / times[0]), -1.0 / times[3])
        assert np.max(np.abs(out.q.values - expected)) <= 1e-13 * np.max(np.abs(q0))

    def test_homogeneous_evolution_preserves_l2(self, frozen) -> None:
        traj, track = frozen
        grid = traj.grid
        ops = spectral_ops(grid)
        q0 = gaussian(grid, 1.5, amplitude=0.5).values.astype(complex)
        start = AuxState(q=ComplexScalarField(grid=grid, values=q0), sigma=RealVectorField.zeros(grid),
                         B_b=RealVectorField.zeros(grid), t=traj.times[0])
        out = step_linearized(
            traj, track, start, traj.n_nodes - 1, SolverSettings(step_tol=1e-10), COARSE_QUAD, homogeneous=True
        )
        decades = np.log10(traj.times[-1] / traj.times[0])
        drift = abs(ops.l2(out.q.values) - ops.l2(q0)) / ops.l2(q0)
        assert drift <= 1e-8 * decades
        # the coefficients really act on the state
        assert np.max(np.abs(out.q.values - ops.free_propagator(ops.free_propagator(q0, 0.5), -1.0 / traj.times[-1]))) > 1e-6

    def test_homogeneous_sigma_stays_curl_free(self, frozen) -> None:
        traj, track = frozen
        grid = traj.grid
        ops = spectral_ops(grid)
        sigma0 = ops.gradient(gaussian(grid, 1.2).values.real)
        start = AuxState(q=ComplexScalarField.zeros(grid), sigma=RealVectorField(grid=grid, components=sigma0),
                         B_b=RealVectorField.zeros(grid), t=traj.times[0])
        out = step_linearized(traj, track, start, 2, TEST_SETTINGS, COARSE_QUAD, homogeneous=True)
        assert ops.curl_defect(out.sigma.components) <= 1e-8

    def test_minimum_step_is_enforced(self, grid16: SpectralGrid) -> None:
        state = small_state(grid16)
        times = SHORT_TIME.times[:4]
        track = ProfileTrack(state, times, "simplified", COARSE_QUAD, nodes_per_decade=4)
        traj = Trajectory.zeros(grid16, times, b_a=track.b_star.copy())
        with pytest.raises(StepSizeError):
            gamma_map(traj, track, COARSE_QUAD, SolverSettings(min_step=1.0))

    def test_source_driven_step_from_tiny_data(self, grid16: SpectralGrid) -> None:
        times = TimeGridSpec(T=4.0, T_max=40.0, rho=1.26).times
        track = ProfileTrack(small_state(grid16), times, "full", FAST_QUAD, nodes_per_decade=10)
        coeffs = FrozenCoefficients(Trajectory.zeros(grid16, times, b_a=track.b_star.copy()), track, FAST_QUAD)
        ops = track.ops
        q0 = 1e-14 * gaussian(grid16, 1.5).values.astype(complex)
        sigma0 = np.zeros((3,) + grid16.shape)
        stepper = LinearizedStepper(coeffs, TEST_SETTINGS)
        q, _ = stepper.advance(times[-1], times[-2], q0, sigma0)
        assert stepper.accepted < 200
        reference = LinearizedStepper(coeffs, SolverSettings(step_tol=1e-11))
        q_ref, _ = reference.advance(times[-1], times[-2], q0, sigma0)
        assert ops.l2(q_ref) > 1e3 * ops.l2(q0)
        assert ops.l2(q - q_ref) <= 1e-6 * ops.l2(q_ref)

    def test_zero_terminal_data_is_integrated(self, grid16: SpectralGrid) -> None:
        time = TimeGridSpec(T=4.0, T_max=40.0, rho=1.26)
        track = ProfileTrack(small_state(grid16), time.times, "full", FAST_QUAD, nodes_per_decade=10)
        traj = Trajectory.zeros(grid16, time.times, b_a=track.b_star.copy())
        out = gamma_map(traj, track, FAST_QUAD, TEST_SETTINGS.model_copy(update={"terminal_closure": False}))
        ops = track.ops
        assert np.max(np.abs(out.q[-1])) == 0.0
        assert out.tail == "zero"
        assert all(ops.l2(q) > 0.0 for q in out.q[:-1])

    def test_roundoff_level_tolerance_completes(self, frozen) -> None:
        traj, track = frozen
        grid = traj.grid
        ops = spectral_ops(grid)
        q0 = gaussian(grid, 1.5, amplitude=0.5).values.astype(complex)
        start = AuxState(q=ComplexScalarField(grid=grid, values=q0), sigma=RealVectorField.zeros(grid),
                         B_b=RealVectorField.zeros(grid), t=traj.times[0])
        out = step_linearized(traj, track, start, 1, SolverSettings(step_tol=1e-15), COARSE_QUAD, homogeneous=True)
        assert out.t == traj.times[1]
        assert abs(ops.l2(out.q.values) - ops.l2(q0)) <= 1e-9 * ops.l2(q0)


class TestGammaMap:
    def test_zero_profiles_map_to_zero(self) -> None:
        grid = SpectralGrid(n_per_axis=8, box_length=8.0)
        times = SHORT_TIME.times
        track = ProfileTrack(zero_state(grid), times, "full", COARSE_QUAD, nodes_per_decade=4)
        traj = Trajectory.zeros(grid, times, b_a=track.b_star.copy())
        out = gamma_map(traj, track, COARSE_QUAD, TEST_SETTINGS)
        assert np.max(np.abs(out.q)) == 0.0
        assert np.max(np.abs(out.sigma)) == 0.0
        assert np.max(np.abs(out.b_b)) == 0.0

    def test_first_iterate_is_cubic_in_amplitude(self, grid16: SpectralGrid) -> None:
        times = SHORT_TIME.times
        sizes = []
        for target in (0.05, 0.1):
            state = small_state(grid16, target)
            track = ProfileTrack(state, times, "full", FAST_QUAD, nodes_per_decade=10)
            traj = Trajectory.zeros(grid16, times, b_a=track.b_star.copy())
            out = gamma_map(traj, track, FAST_QUAD, TEST_SETTINGS)
            ops = spectral_ops(grid16)
            sizes.append(max(ops.l2(q) for q in out.q))
        assert sizes[1] / sizes[0] == pytest.approx(8.0, rel=0.15)

    def test_current_is_assigned_from_incoming_iterate(self, grid16: SpectralGrid) -> None:
        times = SHORT_TIME.times
        track = ProfileTrack(small_state(grid16), times, "full", FAST_QUAD, nodes_per_decade=10)
        traj = Trajectory.zeros(grid16, times, b_a=track.b_star.copy())
        out = gamma_map(traj, track, FAST_QUAD, TEST_SETTINGS)
        expected = assign_Bb(
            traj.amplitude(track), track.S + traj.sigma, track.b_star + traj.b_b, times, grid16, FAST_QUAD,
            closure=track.current_b_closure,
        )
        assert np.array_equal(out.b_b, expected)
        # on the zero iterate that is the profile remainder R3
        for i in (0, times.size - 1):
            r3 = track.remainders_at(i)[2]
            assert np.allclose(out.b_b[i], r3, rtol=0.0, atol=1e-12 * np.max(np.abs(r3)))

        image = gamma_map(traj, track, FAST_QUAD, TEST_SETTINGS.model_copy(update={"current_source": "image"}))
        assert np.array_equal(image.q, out.q)
        assert np.array_equal(image.b_a, out.b_a)
        assert not np.allclose(image.b_b, out.b_b)

    def test_zero_amplitude_gives_profile_field(self, grid16: SpectralGrid) -> None:
        times = SHORT_TIME.times
        track = ProfileTrack(small_state(grid16), times, "full", FAST_QUAD, nodes_per_decade=10)
        b_a = assign_Ba(np.zeros((times.size,) + grid16.shape, dtype=complex), track, FAST_QUAD)
        assert np.array_equal(b_a, track.b_star)
        assert b_a is not track.b_star

    def test_amplitude_field_is_quadratic_in_q(self, grid16: SpectralGrid) -> None:
        times = SHORT_TIME.times
        track = ProfileTrack(small_state(grid16), times, "full", FAST_QUAD, nodes_per_decade=10)
        q = np.array([1e-3 * gaussian(grid16, 1.2, amplitude=1j).values for _ in times])
        ops = track.ops
        once = assign_Ba(q, track, FAST_QUAD) - track.b_star
        twice = assign_Ba(2.0 * q, track, FAST_QUAD) - track.b_star
        minus = assign_Ba(-q, track, FAST_QUAD) - track.b_star
        # linear part from 2 Re(conj(W) q), quadratic part from |q|^2
        linear = 0.5 * (once - minus)
        quadratic = 0.5 * (once + minus)
        assert ops.l2(twice - 2.0 * linear - 4.0 * quadratic) <= 1e-10 * ops.l2(once)

    def test_output_respects_constraints(self, converged) -> None:
        _, _, track, traj, _ = converged
        ops = track.ops
        for i in range(traj.n_nodes):
            assert ops.curl_defect(traj.sigma[i]) <= 1e-8
            assert ops.divergence_defect(traj.b_b[i]) <= 1e-10


class TestFixedPoint:
    def test_zero_state_converges_in_one_iterate(self) -> None:
        grid = SpectralGrid(n_per_axis=8, box_length=8.0)
        traj, reports = solve_at_infinity(zero_state(grid), SHORT_TIME, TEST_SETTINGS, COARSE_QUAD)
        assert len(reports) == 1
        assert reports[0].distance == 0.0
        assert np.max(np.abs(traj.q)) == 0.0

    def test_small_gaussian_contracts(self, converged) -> None:
        _, _, _, _, reports = converged
        assert reports[-1].relative_distance < CONVERGED_SETTINGS.tol
        ratios = [r.contraction_ratio for r in reports[2:] if r.contraction_ratio is not None]
        assert all(ratio < 1.0 for ratio in ratios)
        assert reports[-1].weighted_norms.Y > 0.0

    def test_fixed_point_is_idempotent(self, converged) -> None:
        state, _, track, traj, _ = converged
        again = gamma_map(traj, track, FAST_QUAD, TEST_SETTINGS)
        _, relative = trajectory_distance(again, traj, state)
        assert relative < 10 * TEST_SETTINGS.tol

    def test_progress_callback_sees_each_iterate(self) -> None:
        grid = SpectralGrid(n_per_axis=8, box_length=8.0)
        seen = []
        solve_at_infinity(
            zero_state(grid), SHORT_TIME, TEST_SETTINGS, COARSE_QUAD,
            progress_callback=lambda current, total, message: seen.append((current, total)),
        )
        assert seen == [(1, TEST_SETTINGS.max_iters)]

    def test_non_convergence_carries_ratio_history(self, grid16: SpectralGrid) -> None:
        state = small_state(grid16)
        times = SHORT_TIME.times[:5]
        track = ProfileTrack(state, times, "simplified", COARSE_QUAD, nodes_per_decade=4)
        time = TimeGridSpec(T=2.0, T_max=float(times[-1]), rho=1.26)
        with pytest.raises(NonContractionError) as info:
            solve_at_infinity(state, time, SolverSettings(max_iters=1), COARSE_QUAD, "simplified", track=track)
        assert info.value.ratios == []


class TestFiniteT0:
    def test_zero_data_zero_profile(self) -> None:
        grid = SpectralGrid(n_per_axis=8, box_length=8.0)
        state = zero_state(grid)
        data = Trajectory.zeros(grid, SHORT_TIME.times).state(3)
        traj = solve_finite_t0(state, SHORT_TIME.times[3], data, SHORT_TIME, TEST_SETTINGS, COARSE_QUAD)
        assert np.max(np.abs(traj.q)) == 0.0

    def test_reproduces_infinity_run(self, converged) -> None:
        state, time, track, traj, _ = converged
        index = 3
        recovered = solve_finite_t0(
            state, traj.times[index], traj.state(index), time, CONVERGED_SETTINGS, FAST_QUAD, track=track
        )
        _, relative = trajectory_distance(recovered, traj, state)
        assert relative < 10 * CONVERGED_SETTINGS.step_tol

    def test_continuous_in_data(self, converged) -> None:
        state, time, track, traj, _ = converged
        index = 3
        ops = track.ops
        data = traj.state(index)
        noise = 1e-6 * np.max(np.abs(data.q.values)) * random_complex(traj.grid, 5)
        perturbed = data.model_copy(update={"q": data.q.with_values(data.q.values + noise)})
        base = solve_finite_t0(state, traj.times[index], data, time, TEST_SETTINGS, FAST_QUAD, track=track)
        moved = solve_finite_t0(state, traj.times[index], perturbed, time, TEST_SETTINGS, FAST_QUAD, track=track)
        gap = max(ops.l2(a - b) for a, b in zip(base.q, moved.q))
        assert gap <= 100.0 * ops.l2(noise)

    def test_off_node_t0_snaps_with_warning(self, caplog: pytest.LogCaptureFixture) -> None:
        grid = SpectralGrid(n_per_axis=8, box_length=8.0)
        data = Trajectory.zeros(grid, SHORT_TIME.times).state(2)
        with caplog.at_level("WARNING", logger="backend.core.cauchy_solver"):
            solve_finite_t0(zero_state(grid), SHORT_TIME.times[2] * 1.05, data, SHORT_TIME, TEST_SETTINGS, COARSE_QUAD)
        assert "nearest node" in caplog.text


class TestWeightedNorms:
    def test_zero_trajectory(self) -> None:
        grid = SpectralGrid(n_per_axis=8, box_length=8.0)
        norms = weighted_norms(Trajectory.zeros(grid, SHORT_TIME.times))
        assert all(value == 0.0 for value in norms.as_dict().values())

    def test_weight_cancels_for_log_decay(self) -> None:
        grid = SpectralGrid(n_per_axis=16, box_length=12.0)
        ops = spectral_ops(grid)
        field = gaussian(grid, 1.0).values.astype(complex)
        expected = max(ops.sobolev(field, 2.0), ops.sobolev(ops.x * field[None], 2.0))
        for t in (3.0, 30.0, 300.0):
            times = np.array([t])
            q = (np.log(t) / t * field)[None]
            zeros = np.zeros((1, 3) + grid.shape)
            norms = weighted_norms(Trajectory(grid, times, q, zeros, zeros.copy()), k=2.0)
            assert norms.Y == pytest.approx(expected, rel=1e-10)

    @settings(max_examples=10, deadline=None)
    @given(seed=st.integers(min_value=0, max_value=10_000), drop=st.integers(min_value=1, max_value=4))
    def test_truncation_never_increases(self, seed: int, drop: int) -> None:
        grid = SpectralGrid(n_per_axis=8, box_length=8.0)
        traj = random_trajectory(grid, SHORT_TIME.times[:6], seed)
        full = weighted_norms(traj)
        assert weighted_norms(traj.truncated(drop)).dominated_by(full)


class TestDiagnostics:
    def test_fd_weights_exact_for_quartics(self) -> None:
        nodes = 2.0 * 1.26 ** np.arange(5)
        for index in range(5):
            weights = fd_weights(nodes, nodes[index])
            assert np.dot(weights, nodes ** 4) == pytest.approx(4.0 * nodes[index] ** 3, rel=1e-9)
            assert np.dot(weights, np.ones(5)) == pytest.approx(0.0, abs=1e-10)

    def test_time_derivative_of_power_law(self) -> None:
        times = 4.0 * 1.02 ** np.arange(9)
        samples = times ** -1.0
        for index in (0, 4, 8):
            exact = -times[index] ** -2.0
            assert time_derivative(times, samples, index) == pytest.approx(exact, rel=1e-4)

    def test_short_trajectory_rejected(self) -> None:
        with pytest.raises(StencilError):
            time_derivative(np.array([2.0, 3.0, 4.0, 5.0]), np.zeros(4), 1)

    def test_zero_residuals(self) -> None:
        grid = SpectralGrid(n_per_axis=8, box_length=8.0)
        track = ProfileTrack(zero_state(grid), SHORT_TIME.times, "full", COARSE_QUAD, nodes_per_decade=4)
        traj = Trajectory.zeros(grid, SHORT_TIME.times, b_a=track.b_star.copy())
        residuals = aux_residuals(traj, track, COARSE_QUAD)
        assert set(residuals) == {"q", "sigma", "B_b"}
        assert all(value == 0.0 for series in residuals.values() for value in series)

    def test_converged_run_satisfies_field_equation(self, converged) -> None:
        _, _, track, traj, _ = converged
        residuals = aux_residuals(traj, track, FAST_QUAD)
        assert len(residuals["q"]) == traj.n_nodes
        assert max(residuals["B_b"]) < 1e-3

    def test_tmax_doubling_of_zero_state(self) -> None:
        grid = SpectralGrid(n_per_axis=8, box_length=8.0)
        report = tmax_convergence_check(zero_state(grid), SHORT_TIME, TEST_SETTINGS, COARSE_QUAD)
        assert report["relative_change"] == 0.0
        assert report["passed"] is True
