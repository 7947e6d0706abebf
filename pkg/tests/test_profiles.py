"""
Tests for asymptotic profiles, B_*, remainders and the leading phase.
"""

import numpy as np
import pytest

from backend.core.potentials import TimeKernelQuadrature, moment_array
from backend.core.profiles import (
    BSTAR_HORIZON_DECADES,
    AsymptoticState,
    ProfileTrack,
    WPlusSpec,
    boundary_mass,
    build_phi,
    build_S,
    build_W,
    closed_form_multiplier,
    compute_Bstar,
    compute_remainders,
    make_w_plus,
    profile_norm_series,
    quadrature_S,
    single_time_nodes,
)
from backend.core.spectral_core import ComplexScalarField, NormSpec, SpectralGrid, norm, spectral_ops
from backend.core.wave_operator import fit_decay

FAST_QUAD = TimeKernelQuadrature(ratio=1.26, points_per_panel=4)


@pytest.fixture
def grid() -> SpectralGrid:
    return SpectralGrid(n_per_axis=16, box_length=16.0)


@pytest.fixture
def state(grid: SpectralGrid) -> AsymptoticState:
    w_plus = make_w_plus(grid, WPlusSpec(family="gaussian_plane_wave", amplitude=0.2, width=1.5, momentum=(0.3927, 0.0, 0.0)))
    return AsymptoticState(w_plus=w_plus, alpha=3.0, beta=0.3)


@pytest.fixture
def zero_state(grid: SpectralGrid) -> AsymptoticState:
    return AsymptoticState(w_plus=ComplexScalarField.zeros(grid), alpha=3.0, beta=0.3)


class TestAsymptoticState:
    def test_rejects_beta_alpha_violation(self, grid: SpectralGrid) -> None:
        w_plus = make_w_plus(grid, WPlusSpec())
        with pytest.raises(ValueError):
            AsymptoticState(w_plus=w_plus, alpha=1.5, beta=0.2)

    def test_a_plus_recorded(self, state: AsymptoticState) -> None:
        expected = norm(state.w_plus, NormSpec(kind="H", order=state.k + state.alpha + 1.0))
        assert state.a_plus >= expected > 0.0

    def test_zero_state_has_zero_size(self, zero_state: AsymptoticState) -> None:
        assert zero_state.a_plus == 0.0
        assert boundary_mass(zero_state.w_plus) == 0.0


class TestInitialFamilies:
    def test_target_l2_rescales(self, grid: SpectralGrid) -> None:
        w_plus = make_w_plus(grid, WPlusSpec(family="two_gaussians", target_l2=0.7))
        assert norm(w_plus, NormSpec(kind="H", order=0)) == pytest.approx(0.7)

    def test_plane_wave_modulus_is_gaussian(self, grid: SpectralGrid) -> None:
        plain = make_w_plus(grid, WPlusSpec(family="gaussian"))
        waved = make_w_plus(grid, WPlusSpec(family="gaussian_plane_wave", momentum=(0.5, 0.0, 0.0)))
        assert np.allclose(np.abs(waved.values), np.abs(plain.values))

    def test_dump_family_requires_path(self) -> None:
        with pytest.raises(ValueError):
            WPlusSpec(family="dump")

    def test_wide_state_logs_boundary_warning(self, caplog: pytest.LogCaptureFixture) -> None:
        grid = SpectralGrid(n_per_axis=16, box_length=6.0)
        w_plus = make_w_plus(grid, WPlusSpec(width=3.0))
        with caplog.at_level("WARNING", logger="backend.core.profiles"):
            AsymptoticState(w_plus=w_plus, alpha=3.0, beta=0.3)
        assert "outer box layer" in caplog.text


class TestBuildW:
    def test_unitary(self, state: AsymptoticState) -> None:
        for t in (1.0, 7.0, 300.0):
            assert norm(build_W(state, t), NormSpec(kind="H", order=0)) == pytest.approx(
                norm(state.w_plus, NormSpec(kind="H", order=0)), rel=1e-12
            )

    def test_approaches_w_plus(self, state: AsymptoticState) -> None:
        t = 100.0
        diff = build_W(state, t).values - state.w_plus.values
        gap = norm(state.w_plus.with_values(diff), NormSpec(kind="H", order=state.k))
        bound = t ** -0.5 * norm(state.w_plus, NormSpec(kind="H", order=state.k + 1.0))
        assert gap <= bound

    def test_moment_commutation(self) -> None:
        grid = SpectralGrid(n_per_axis=32, box_length=16.0)
        w_plus = make_w_plus(grid, WPlusSpec(width=1.2))
        st = AsymptoticState(w_plus=w_plus, alpha=3.0, beta=0.3)
        ops = spectral_ops(grid)
        t = 10.0
        W = build_W(st, t).values
        lhs = np.array([ops.free_propagator(ops.x[i] * W, 1.0 / t) for i in range(3)])
        rhs = ops.x * w_plus.values[None] + 1j / t * ops.gradient(w_plus.values)
        assert np.max(np.abs(lhs - rhs)) / np.max(np.abs(rhs)) < 1e-8

    def test_simplified_variant_is_static(self, state: AsymptoticState) -> None:
        assert np.array_equal(build_W(state, 9.0, "simplified").values, state.w_plus.values)

    def test_rejects_early_time(self, state: AsymptoticState) -> None:
        with pytest.raises(ValueError):
            build_W(state, 0.5)


class TestPhaseProfiles:
    @pytest.mark.parametrize("variant", ["full", "simplified", "closed_form"])
    def test_vanishes_at_unit_time(self, state: AsymptoticState, variant: str) -> None:
        S = build_S(state, 1.0, variant, quad=FAST_QUAD, nodes_per_decade=10)
        assert np.max(np.abs(S.components)) < 1e-14

    def test_closed_form_multiplier_on_low_modes(self, grid: SpectralGrid) -> None:
        ops = spectral_ops(grid)
        mult = closed_form_multiplier(ops, 50.0, 0.3)
        low = ops.kmag <= 1.0
        assert np.allclose(mult[low], np.log(50.0))
        assert np.all(mult >= 0.0)

    def test_closed_form_multiplier_nonincreasing(self, grid: SpectralGrid) -> None:
        ops = spectral_ops(grid)
        mult = closed_form_multiplier(ops, 50.0, 0.3).ravel()
        order = np.argsort(ops.kmag.ravel())
        assert np.all(np.diff(mult[order]) <= 1e-15)

    def test_simplified_matches_closed_form(self, state: AsymptoticState) -> None:
        times = np.array([4.0, 6.0, 9.0])
        closed = ProfileTrack(state, times, "closed_form", FAST_QUAD, nodes_per_decade=20)
        simplified = ProfileTrack(state, times, "simplified", FAST_QUAD, nodes_per_decade=20)
        scale = np.max(np.abs(closed.S))
        assert np.max(np.abs(closed.S - simplified.S)) / scale < 1e-10

    def test_closed_form_matches_node_quadrature(self, state: AsymptoticState) -> None:
        t = 50.0
        track = ProfileTrack(state, np.array([t]), "closed_form", FAST_QUAD)
        reference = quadrature_S(state, t, track.b_star[0], nodes=200)
        ops = track.ops
        assert ops.l2(track.S[0] - reference) / ops.l2(track.S[0]) < 1e-4

    @pytest.mark.parametrize("variant", ["full", "closed_form"])
    def test_S_is_curl_free(self, state: AsymptoticState, variant: str) -> None:
        track = ProfileTrack(state, np.array([2.0, 2.5, 3.2]), variant, FAST_QUAD, nodes_per_decade=10)
        for S in track.S:
            assert track.ops.curl_defect(S) <= 1e-10

    def test_phi_gradient_is_S(self, state: AsymptoticState) -> None:
        track = ProfileTrack(state, np.array([2.0, 3.0]), "full", FAST_QUAD, nodes_per_decade=10)
        for phi, S in zip(track.phi, track.S):
            assert abs(phi.mean()) < 1e-14
            assert track.ops.l2(track.ops.gradient(phi) - S) <= 1e-6 * track.ops.l2(S)

    def test_phi_zero_at_unit_time(self, state: AsymptoticState) -> None:
        phi = build_phi(state, 1.0, quad=FAST_QUAD)
        assert np.max(np.abs(phi.values)) < 1e-14


class TestFrozenField:
    def test_zero_state_gives_zero(self, zero_state: AsymptoticState) -> None:
        assert np.max(np.abs(compute_Bstar(zero_state, 2.0, quad=FAST_QUAD).components)) == 0.0

    def test_divergence_free(self, state: AsymptoticState) -> None:
        field = compute_Bstar(state, 2.0, t_max=6.0, quad=FAST_QUAD)
        assert field.div_free

    def test_nodes_match_single_time_evaluation(self, state: AsymptoticState) -> None:
        times = np.array([2.0, 2.5, 3.1, 4.0])
        track = ProfileTrack(state, times, "full", FAST_QUAD, nodes_per_decade=10)
        for i, t in enumerate(times):
            direct = compute_Bstar(state, t, t_max=times[-1], quad=FAST_QUAD).components
            scale = np.max(np.abs(track.b_star[i]))
            assert np.allclose(direct, track.b_star[i], rtol=0.0, atol=1e-12 * scale)

    def test_single_time_horizon_is_converged(self, state: AsymptoticState) -> None:
        ops = spectral_ops(state.grid)
        default = compute_Bstar(state, 2.0, quad=FAST_QUAD).components
        distant = compute_Bstar(state, 2.0, t_max=200.0, quad=FAST_QUAD).components
        assert ops.l2(default - distant) <= 1e-2 * ops.l2(distant)

    def test_single_time_nodes_span_closure_horizon(self) -> None:
        nodes = single_time_nodes(3.0)
        assert nodes[0] == 3.0
        assert nodes[-1] == pytest.approx(3.0 * 10.0 ** BSTAR_HORIZON_DECADES)
        assert np.all(np.diff(nodes) > 0)

    @pytest.mark.parametrize("family", ["gaussian", "gaussian_plane_wave", "two_gaussians"])
    def test_bounded_over_two_decades(self, grid: SpectralGrid, family: str) -> None:
        spec = WPlusSpec(family=family, amplitude=0.2, width=1.5, momentum=(0.3927, 0.0, 0.0))
        state = AsymptoticState(w_plus=make_w_plus(grid, spec), alpha=3.0, beta=0.3)
        times = 10.0 ** np.linspace(0.0, 2.0, 9)
        track = ProfileTrack(state, times, "full", FAST_QUAD, nodes_per_decade=10)
        sizes = np.array(profile_norm_series(track, state.k))
        assert np.all(np.isfinite(sizes)) and np.all(sizes > 0.0)
        assert sizes.max() / sizes.min() <= 2.0

    def test_moment_history_matches_pointwise(self, state: AsymptoticState) -> None:
        track = ProfileTrack(state, np.array([2.0, 3.0]), "full", FAST_QUAD, nodes_per_decade=10)
        history = track.moment_history()
        expected = moment_array(track.ops, track.W(3.0), track.W(3.0))
        assert np.allclose(history.samples[1], expected)


class TestRemainders:
    def test_zero_state_gives_zero(self, zero_state: AsymptoticState) -> None:
        r1, r2, r3 = compute_remainders(zero_state, 3.0, quad=FAST_QUAD, nodes_per_decade=10)
        assert np.max(np.abs(r1.values)) == 0.0
        assert np.max(np.abs(r2.components)) == 0.0
        assert np.max(np.abs(r3.components)) == 0.0

    def test_decay_over_two_decades(self, state: AsymptoticState) -> None:
        times = 10.0 * 10.0 ** np.linspace(0.0, 2.0, 9)
        track = ProfileTrack(state, times, "full", FAST_QUAD, nodes_per_decade=10)
        ops = track.ops
        sizes = np.array([
            [ops.sobolev(r, state.k) for r in track.remainders_at(i)[:2]] for i in range(times.size)
        ])
        r1 = fit_decay(times, sizes[:, 0], "R1", log_power=1, target_exponent=-2.0, slack=0.25)
        r2 = fit_decay(times, sizes[:, 1], "R2", log_power=2, target_exponent=-2.0, slack=0.25)
        assert abs(r1.exponent + 2.0) <= 0.25
        assert abs(r2.exponent + 2.0) <= 0.25

    def test_shapes_and_divergence(self, state: AsymptoticState) -> None:
        r1, r2, r3 = compute_remainders(state, 3.0, quad=FAST_QUAD, nodes_per_decade=10)
        assert r1.values.shape == state.grid.shape
        assert r2.components.shape == (3,) + state.grid.shape
        assert r3.div_free
