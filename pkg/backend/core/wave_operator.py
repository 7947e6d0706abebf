"""
Physical solution (u, A) assembled from a converged auxiliary trajectory, with
the residual, energy and decay diagnostics used by the scenarios.

All diagnostics are evaluated in the pseudo-conformal frame v = exp(-i Phi) w,
B on the base grid; u = M(t) D(t) v and A = t^-1 D0(t) B only differ from it by
unitary relabelling onto the grid (n, t L).
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Optional, Tuple

import numpy as np

from backend.core.cauchy_solver import FrozenCoefficients, Trajectory, assign_Ba, assign_Bb, time_derivative
from backend.core.errors import CoverageError, WindowError
from backend.core.models import DecayFit, InvariantCheck
from backend.core.potentials import TimeKernelQuadrature, hartree_array
from backend.core.profiles import AsymptoticState, ProfileTrack
from backend.core.spectral_core import (
    ComplexScalarField,
    NormSpec,
    RealVectorField,
    SpectralOps,
    mdfm_apply,
    norm,
    spectral_ops,
)

logger = logging.getLogger(__name__)

WINDOW_START_FACTOR = 10 ** 0.5
MIN_FIT_NODES = 8
MIN_FIT_DECADES = 1.0
L2_CONSTANCY_TOL = 1e-8
PSI_GRADIENT_TOL = 1e-4
PSI_CHECK_FACTOR = 2.0
PSI_GAUSS_POINTS = 6


# the correction phase psi


def build_psi(
    traj: Trajectory,
    track: ProfileTrack,
    quad: Optional[TimeKernelQuadrature] = None,
    coeffs: Optional[FrozenCoefficients] = None,
    points: int = PSI_GAUSS_POINTS,
) -> np.ndarray:
    """psi = -int_t^inf d(psi)/dt' dt' at every node.

    The rate comes from the coefficients the trajectory freezes, so its
    gradient is the sigma rate the stepper integrates; it is summed with
    Gauss-Legendre points in ln t on every node interval. Beyond T_max psi
    takes the value whose gradient is the terminal sigma.
    """
    ops = spectral_ops(traj.grid)
    terminal = ops.potential(traj.sigma[-1])
    psi = np.empty((traj.n_nodes,) + traj.grid.shape)
    psi[-1] = terminal
    if traj.n_nodes == 1:
        return psi
    if coeffs is None:
        coeffs = FrozenCoefficients(traj, track, quad or TimeKernelQuadrature())
    gl_x, gl_w = np.polynomial.legendre.leggauss(points)
    u = np.log(traj.times)
    for i in range(traj.n_nodes - 2, -1, -1):
        half = 0.5 * (u[i + 1] - u[i])
        increment = np.zeros(traj.grid.shape)
        for x, weight in zip(gl_x, gl_w):
            t = float(np.exp(u[i] + half * (x + 1.0)))
            increment += half * weight * t * coeffs.psi_rate(t)
        psi[i] = psi[i + 1] - increment
    return psi


# the physical solution


class PhysicalSolution:
    """(u, A) at the trajectory nodes, plus the pseudo-conformal data they came from.

    u[i] and A[i] live on the grid scaled by t_i; v, B, phi and psi live on the
    base grid.
    """

    def __init__(self, traj: Trajectory, track: ProfileTrack, psi: np.ndarray, b_a: np.ndarray, workers: int = 1):
        self.traj = traj
        self.track = track
        self.grid = traj.grid
        self.ops = spectral_ops(traj.grid)
        self.times = traj.times
        self.k = track.state.k
        self.phi = track.phi
        self.psi = psi
        self.b_a = b_a
        self.w = traj.amplitude(track)
        self.s = track.S + traj.sigma
        self.B = b_a + traj.b_b
        self.v = np.exp(-1j * (self.phi + psi)) * self.w
        self._maxwell: Optional[List[float]] = None
        if workers <= 1:
            pairs = [self._physical(i) for i in range(self.n_nodes)]
        else:
            with ThreadPoolExecutor(max_workers=workers) as executor:
                pairs = list(executor.map(self._physical, range(self.n_nodes)))
        self.u: List[ComplexScalarField] = [p[0] for p in pairs]
        self.A: List[RealVectorField] = [p[1] for p in pairs]

    @property
    def n_nodes(self) -> int:
        return self.times.size

    def _physical(self, index: int) -> Tuple[ComplexScalarField, RealVectorField]:
        t = float(self.times[index])
        v = ComplexScalarField(grid=self.grid, values=self.v[index])
        u = mdfm_apply(mdfm_apply(v, t, "D"), t, "M")
        A = RealVectorField(grid=self.grid.scaled(t), components=self.B[index] / t)
        return u, A

    def free_part(self, index: int) -> ComplexScalarField:
        """M(t) D(t) W(t) on the grid of u[index]."""
        t = float(self.times[index])
        W = ComplexScalarField(grid=self.grid, values=self.track.W(t))
        return mdfm_apply(mdfm_apply(W, t, "D"), t, "M")

    def modulated(self, index: int) -> ComplexScalarField:
        """exp(i phi(t, x/t)) u(t)."""
        u = self.u[index]
        return u.with_values(np.exp(1j * self.phi[index]) * u.values)

    def invariant_checks(self, l2_tol: float = L2_CONSTANCY_TOL) -> List[InvariantCheck]:
        ops = self.ops
        masses = np.array([norm(u, NormSpec(kind="H", order=0)) for u in self.u])
        drift = float(np.max(np.abs(masses - masses[0])) / masses[0]) if masses[0] > 0 else float(np.max(masses))
        div = max(spectral_ops(a.grid).divergence_defect(a.components) for a in self.A)
        return [
            InvariantCheck.below("u_l2_constant", drift, l2_tol, "max relative deviation of |u(t)|_2"),
            InvariantCheck.below("A_divergence_free", div, 1e-10, "max|div A| / max|A| over nodes"),
            InvariantCheck.below(
                "grad_psi_is_sigma", self.psi_gradient_gap(), PSI_GRADIENT_TOL,
                f"max |grad psi - sigma| / |sigma| over t >= {PSI_CHECK_FACTOR:g} T",
            ),
        ]

    def psi_gradient_gap(self, start_factor: float = PSI_CHECK_FACTOR) -> float:
        """Largest relative L2 gap between grad psi and sigma on nodes t >= start_factor T."""
        ops = self.ops
        gap = 0.0
        for i, t in enumerate(self.times):
            if t < start_factor * self.times[0] * (1 - 1e-12):
                continue
            sigma = self.traj.sigma[i]
            size = ops.l2(sigma)
            if size > 0:
                gap = max(gap, ops.l2(ops.gradient(self.psi[i]) - sigma) / size)
        return gap


def assemble_solution(
    traj: Trajectory,
    track: ProfileTrack,
    quad: Optional[TimeKernelQuadrature] = None,
    workers: int = 1,
) -> PhysicalSolution:
    """u = M D exp(-i(phi + psi)) w and A = t^-1 D0(t) (B_a + B_b) at every node."""
    if not np.allclose(traj.times, track.times, rtol=1e-12):
        raise CoverageError("trajectory and profiles use different node grids")
    quad = quad or TimeKernelQuadrature()
    if traj.b_a is None:
        traj.b_a = assign_Ba(traj.q, track, quad, workers)
    b_a = traj.b_a
    psi = build_psi(traj, track, quad, FrozenCoefficients(traj, track, quad, workers))
    logger.info(f"Assembling (u, A) on {traj.n_nodes} nodes")
    return PhysicalSolution(traj, track, psi, b_a, workers)


# residuals


def _gauge_free(residual: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Remove the real multiple of v that a constant shift of A_0 would absorb."""
    mass = np.vdot(v, v).real
    if mass == 0:
        return residual
    return residual - (np.vdot(v, residual).real / mass) * v


def schrodinger_residual(sol: PhysicalSolution, index: int) -> Tuple[float, float]:
    """(|r|_2, |(2t^2)^-1 Delta v|_2) for the Schrodinger residual at a node.

    r = i dv/dt + (2t^2)^-1 Delta v + t^-1 (x.B) v - i t^-2 B.grad v
        - (2t^2)^-1 |B|^2 v - t^-1 g(v) v,
    which is D(t)* M(t)* of i du/dt + (1/2)(grad - iA)^2 u - A_0 u.
    """
    ops = sol.ops
    t = float(sol.times[index])
    v = sol.v[index]
    B = sol.B[index]
    free = ops.laplacian(v) / (2.0 * t ** 2)
    residual = (
        1j * time_derivative(sol.times, sol.v, index)
        + free
        + np.sum(ops.x * B, axis=0) * v / t
        - 1j / t ** 2 * np.sum(B * ops.gradient(v), axis=0)
        - np.sum(B * B, axis=0) * v / (2.0 * t ** 2)
        - hartree_array(ops, v, v) * v / t
    )
    return ops.l2(_gauge_free(residual, v)), ops.l2(free)


def maxwell_residuals(sol: PhysicalSolution, quad: Optional[TimeKernelQuadrature] = None, workers: int = 1) -> List[float]:
    """Relative K^{k+1} distance of B to B_a(w) + t^-1 F_1(M_b(w, s, B)) at every node."""
    if sol._maxwell is None:
        quad = quad or TimeKernelQuadrature()
        ops = sol.ops
        b_a = assign_Ba(sol.traj.q, sol.track, quad, workers)
        b_b = assign_Bb(sol.w, sol.s, sol.B, sol.times, sol.grid, quad, workers, sol.track.current_b_closure)
        order = sol.k + 1.0
        out = []
        for i in range(sol.n_nodes):
            target = b_a[i] + b_b[i]
            gap = ops.evaluate_norm(sol.B[i] - target, NormSpec(kind="K", order=order))
            size = ops.evaluate_norm(target, NormSpec(kind="K", order=order))
            out.append(0.0 if gap == 0 else gap / size if size > 0 else float("inf"))
        sol._maxwell = out
    return sol._maxwell


def ms_residual(
    sol: PhysicalSolution,
    index: int,
    quad: Optional[TimeKernelQuadrature] = None,
) -> Dict[str, float]:
    """Schrodinger and Maxwell residuals of the assembled solution at one node."""
    absolute, scale = schrodinger_residual(sol, index)
    return {
        "schrodinger": absolute,
        "schrodinger_relative": absolute / scale if scale > 0 else absolute,
        "maxwell": maxwell_residuals(sol, quad)[index],
    }


# energy


def coulomb_gauge_energy(ops: SpectralOps, u: np.ndarray, A: np.ndarray, dA_dt: np.ndarray) -> Dict[str, float]:
    """Halved energy integrals of (u, A) in Coulomb gauge with A_0 = g(u).

    electric 1/2|dA/dt|^2, magnetic 1/2|curl A|^2, kinetic 1/2|(grad - iA)u|^2
    and Coulomb 1/2 int A_0 |u|^2.
    """
    covariant = ops.gradient(u) - 1j * A * u[None]
    return {
        "electric": 0.5 * ops.l2(dA_dt) ** 2,
        "magnetic": 0.5 * ops.l2(ops.curl(A)) ** 2,
        "kinetic": 0.5 * ops.l2(covariant) ** 2,
        "coulomb": 0.5 * float(np.sum(hartree_array(ops, u, u) * np.abs(u) ** 2) * ops.dv),
    }


def energy_terms(sol: PhysicalSolution, index: int) -> Dict[str, float]:
    """Energy terms of (u, A) at a node, evaluated on (v, B).

    With y = x/t: (grad - iA)u pulls back to t^-1 (grad - i(B - t y)) v and
    dA/dt to t^-2 (t dB/dt - B - (y.grad) B), so each term is a power of t
    times the same integral of the pulled-back fields.
    """
    ops = sol.ops
    t = float(sol.times[index])
    B = sol.B[index]
    dB = time_derivative(sol.times, sol.B, index)
    pulled_e = t * dB - B - np.array([np.sum(ops.x * ops.gradient(B[j]), axis=0) for j in range(3)])
    raw = coulomb_gauge_energy(ops, sol.v[index], B - t * ops.x, pulled_e)
    terms = {
        "electric": raw["electric"] / t,
        "magnetic": raw["magnetic"] / t,
        "kinetic": raw["kinetic"] / t ** 2,
        "coulomb": raw["coulomb"] / t,
    }
    terms["total"] = sum(terms.values())
    return terms


def compute_energy(sol: PhysicalSolution, index: int) -> float:
    return energy_terms(sol, index)["total"]


# decay fits


def fit_decay(
    times: np.ndarray,
    values: np.ndarray,
    series_name: str,
    log_power: int = 0,
    target_exponent: Optional[float] = None,
    slack: float = 0.2,
    window: Optional[Tuple[float, float]] = None,
    min_nodes: int = MIN_FIT_NODES,
    min_decades: float = MIN_FIT_DECADES,
) -> DecayFit:
    """Least-squares fit of ln(value / (ln t)^log_power) against ln t on a window."""
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    lo, hi = window if window is not None else (float(times[0]), float(times[-1]))
    inside = (times >= lo * (1 - 1e-12)) & (times <= hi * (1 + 1e-12))
    count = int(inside.sum())
    if count < min_nodes:
        raise WindowError(f"{series_name}: {count} nodes in [{lo:.4g}, {hi:.4g}], need {min_nodes}")
    span = np.log10(times[inside][-1] / times[inside][0])
    if span < min_decades - 1e-9:
        raise WindowError(f"{series_name}: fit window spans {span:.2f} < {min_decades} decades")
    common = dict(
        series_name=series_name,
        log_power=log_power,
        window=(float(lo), float(hi)),
        n_nodes=count,
        target_exponent=target_exponent,
        slack=slack,
    )
    positive = inside & (values > 0)
    if not positive.any():
        return DecayFit(zero_series=True, r_squared=1.0, **common)
    x = np.log(times[positive])
    y = np.log(values[positive]) - log_power * np.log(x)
    if x.size < 2:
        return DecayFit(exponent=0.0, r_squared=0.0, **common)
    slope, intercept = np.polyfit(x, y, 1)
    ss_res = float(np.sum((y - (slope * x + intercept)) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r_squared = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return DecayFit(exponent=float(slope), r_squared=r_squared, **common)


def envelopes(state: AsymptoticState) -> Dict[str, Tuple[int, float]]:
    """(log_power, target exponent) of the a priori decay of every tracked series.

    The targets are upper bounds: a fit passes when its exponent is at most
    target + slack, and faster decay is never a failure. w - w_+ for instance
    decays like t^-1 on Gaussian data, well inside its t^-beta bound.
    The L^r series decay like t^(-1 - delta(r)) (ln t)^2 with delta(r) = 3/2 - 3/r.
    """
    alpha_beta = state.alpha * state.beta
    galilei_upper = (0, -alpha_beta) if alpha_beta < 1.0 else (2, -1.0)
    return {
        "q_Hk": (1, -1.0),
        "sigma_Kk": (2, -1.0),
        "Bb_Kk1": (1, -1.0),
        "w_minus_wplus_Hk": (0, -state.beta),
        "B_minus_Bstar_Kk1": (1, -1.0),
        "grad_xB_L2": (1, -1.0),
        "galilei_Hk": (2, -1.0),
        "galilei_Hk1": galilei_upper,
        "lebesgue_2": (2, -1.0),
        "lebesgue_inf": (2, -2.5),
    }


def asymptotic_series(sol: PhysicalSolution) -> Dict[str, np.ndarray]:
    """Norm series at every node for the decay fits and series.csv."""
    ops = sol.ops
    state = sol.track.state
    k = state.k
    w_plus = state.w_plus.values
    series: Dict[str, List[float]] = {name: [] for name in envelopes(state)}
    for i, t in enumerate(sol.times):
        t = float(t)
        gap_B = sol.B[i] - sol.track.b_star[i]
        series["q_Hk"].append(ops.sobolev(sol.traj.q[i], k))
        series["sigma_Kk"].append(ops.evaluate_norm(sol.traj.sigma[i], NormSpec(kind="K", order=k)))
        series["Bb_Kk1"].append(ops.evaluate_norm(sol.traj.b_b[i], NormSpec(kind="K", order=k + 1.0)))
        series["w_minus_wplus_Hk"].append(ops.sobolev(sol.w[i] - w_plus, k))
        series["B_minus_Bstar_Kk1"].append(ops.evaluate_norm(gap_B, NormSpec(kind="K", order=k + 1.0)))
        series["grad_xB_L2"].append(ops.l2(ops.gradient(np.sum(ops.x * gap_B, axis=0))))

        gap_u = sol.modulated(i).values - sol.free_part(i).values
        physical = sol.u[i].grid
        weight = np.sqrt(1.0 + np.sum(physical.coordinates ** 2, axis=0) / t ** 2)
        weighted = ComplexScalarField(grid=physical, values=weight * gap_u)
        series["galilei_Hk"].append(norm(weighted, NormSpec(kind="H", order=k, galilei_time=t)))
        series["galilei_Hk1"].append(norm(weighted, NormSpec(kind="H", order=k + 1.0, galilei_time=t)))
        plain = weighted.with_values(gap_u)
        series["lebesgue_2"].append(norm(plain, NormSpec(kind="L", order=2.0)))
        # grid maximum stands in for the supremum
        series["lebesgue_inf"].append(norm(plain, NormSpec(kind="L", order=np.inf)))
    return {name: np.array(values) for name, values in series.items()}


def verify_asymptotics(
    sol: PhysicalSolution,
    window_start_factor: float = WINDOW_START_FACTOR,
    slack: float = 0.2,
    series: Optional[Dict[str, np.ndarray]] = None,
) -> List[DecayFit]:
    """Fit every tracked series on [window_start_factor T, T_max] against its envelope."""
    state = sol.track.state
    series = series if series is not None else asymptotic_series(sol)
    window = (float(sol.times[0]) * window_start_factor, float(sol.times[-1]))
    fits = []
    for name, (log_power, target) in envelopes(state).items():
        fit = fit_decay(sol.times, series[name], name, log_power, target, slack, window)
        level = logging.INFO if fit.within_envelope else logging.WARNING
        logger.log(level, f"Decay fit {name}: exponent {fit.exponent:.3f} (target {target:.3f}, r^2 {fit.r_squared:.3f})")
        fits.append(fit)
    return fits
