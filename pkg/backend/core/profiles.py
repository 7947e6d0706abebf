"""
Asymptotic profiles W, S built from the asymptotic state w_+, the frozen field
B_* = B_a(W), the remainders R1-R3 and the leading phase phi.
"""

import logging
from pathlib import Path
from typing import List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.integrate import cumulative_simpson, cumulative_trapezoid

from backend.core.errors import ConfigError, FieldValidationError
from backend.core.field_io import read_field
from backend.core.potentials import (
    AnalyticHistory,
    FieldHistory,
    TimeKernelQuadrature,
    current_b_array,
    hartree_array,
    kernel_integral,
    kernel_sweep,
    moment_array,
    transport_array,
)
from backend.core.spectral_core import (
    ComplexScalarField,
    NormSpec,
    RealVectorField,
    SpectralGrid,
    SpectralOps,
    norm,
    spectral_ops,
)

logger = logging.getLogger(__name__)

ProfileVariant = Literal["full", "simplified", "closed_form"]

BOUNDARY_MASS_WARN = 1e-8
BSTAR_HORIZON_DECADES = 1.0
SINGLE_TIME_NODES_PER_DECADE = 10


class WPlusSpec(BaseModel):
    """Analytic family (or dump file) for the asymptotic amplitude w_+."""

    model_config = ConfigDict(extra="forbid")

    family: Literal["gaussian", "gaussian_plane_wave", "two_gaussians", "dump"] = Field(
        "gaussian", description="Named analytic family, or 'dump' to read a binary field file"
    )
    amplitude: float = Field(0.1, ge=0.0, description="Peak amplitude of the (first) Gaussian")
    target_l2: Optional[float] = Field(
        None, ge=0.0, description="If set, rescale w_+ to this L2 norm (overrides amplitude)"
    )
    width: float = Field(1.0, gt=0.0, description="Gaussian width")
    center: Tuple[float, float, float] = Field((0.0, 0.0, 0.0), description="Gaussian centre")
    momentum: Tuple[float, float, float] = Field(
        (0.0, 0.0, 0.0), description="Plane-wave wavevector for gaussian_plane_wave"
    )
    second_center: Tuple[float, float, float] = Field(
        (1.5, 0.0, 0.0), description="Centre of the second Gaussian for two_gaussians"
    )
    second_amplitude: float = Field(0.05, ge=0.0, description="Amplitude of the second Gaussian")
    dump_path: Optional[Path] = Field(None, description="Binary field dump for family='dump'")

    @model_validator(mode="after")
    def _check_dump(self) -> "WPlusSpec":
        if self.family == "dump" and self.dump_path is None:
            raise ValueError("family 'dump' requires dump_path")
        return self


def _gaussian(grid: SpectralGrid, amplitude: float, width: float, center) -> np.ndarray:
    x = grid.coordinates
    r2 = sum((x[i] - center[i]) ** 2 for i in range(3))
    return amplitude * np.exp(-0.5 * r2 / width ** 2)


def make_w_plus(grid: SpectralGrid, spec: WPlusSpec) -> ComplexScalarField:
    """Sample the requested w_+ family on the grid."""
    if spec.family == "dump":
        field = read_field(spec.dump_path)
        if not isinstance(field, ComplexScalarField):
            raise FieldValidationError(f"{spec.dump_path} holds a vector field, expected complex scalar")
        if not field.grid.compatible(grid):
            raise FieldValidationError(
                f"{spec.dump_path} has grid (n={field.grid.n_per_axis}, L={field.grid.box_length}), "
                f"config asks for (n={grid.n_per_axis}, L={grid.box_length})"
            )
        values = field.values
    else:
        values = _gaussian(grid, spec.amplitude, spec.width, spec.center).astype(np.complex128)
        if spec.family == "gaussian_plane_wave":
            phase = sum(spec.momentum[i] * grid.coordinates[i] for i in range(3))
            values = values * np.exp(1j * phase)
        elif spec.family == "two_gaussians":
            values = values + _gaussian(grid, spec.second_amplitude, spec.width, spec.second_center)
    if spec.target_l2 is not None:
        current = spectral_ops(grid).l2(values)
        if current > 0:
            values = values * (spec.target_l2 / current)
    return ComplexScalarField(grid=grid, values=values)


def boundary_mass(w: ComplexScalarField) -> float:
    """Fraction of |w|^2 carried by the outermost layer of grid cells."""
    density = np.abs(w.values) ** 2
    total = density.sum()
    if total == 0:
        return 0.0
    interior = density[1:-1, 1:-1, 1:-1].sum()
    return float((total - interior) / total)


class AsymptoticState(BaseModel):
    """w_+ with the regularity parameters alpha, beta and the recorded size a_+."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    w_plus: ComplexScalarField
    alpha: float = Field(gt=1.0, description="Extra regularity parameter")
    beta: float = Field(gt=0.0, lt=0.5, description="Cutoff exponent of the short/long split")
    k: float = Field(2.0, ge=0.0, description="Base Sobolev order")
    a_plus: float = Field(0.0, ge=0.0, description="max(|w+|_{k+alpha+1}, |x w+|_{k+alpha}), set at build time")

    @model_validator(mode="after")
    def _check_and_measure(self) -> "AsymptoticState":
        if self.beta * (self.alpha + 1.0) < 1.0:
            raise ConfigError(
                "beta_alpha_constraint",
                f"beta * (alpha + 1) = {self.beta * (self.alpha + 1.0):.4g} must be >= 1",
            )
        grid = self.w_plus.grid
        ops = spectral_ops(grid)
        moment = ops.x * self.w_plus.values[None]
        self.a_plus = max(
            norm(self.w_plus, NormSpec(kind="H", order=self.k + self.alpha + 1.0)),
            ops.sobolev(moment, self.k + self.alpha),
        )
        fraction = boundary_mass(self.w_plus)
        if fraction > BOUNDARY_MASS_WARN:
            logger.warning(f"w_+ puts {fraction:.2e} of its mass on the outer box layer")
        return self

    @property
    def grid(self) -> SpectralGrid:
        return self.w_plus.grid


# pointwise profile formulas

def profile_amplitude(ops: SpectralOps, w_plus: np.ndarray, t: float, variant: ProfileVariant) -> np.ndarray:
    """W(t) = U*(1/t) w_+ for the full variant, w_+ otherwise."""
    if variant != "full":
        return w_plus
    return ops.free_propagator(w_plus, -1.0 / t)


def profile_amplitude_rate(ops: SpectralOps, w_plus: np.ndarray, t: float, variant: ProfileVariant) -> np.ndarray:
    """dW/dt = i (2 t^2)^{-1} Delta W for the full variant, 0 otherwise."""
    if variant != "full":
        return np.zeros_like(w_plus)
    amplitude = profile_amplitude(ops, w_plus, t, variant)
    return ops.ifft(-0.5j * ops.k2 / t ** 2 * ops.fft(amplitude))


def long_part(ops: SpectralOps, arr: np.ndarray, t: float, beta: float) -> np.ndarray:
    return ops.split_short_long(arr, t ** beta)[1]


def short_part(ops: SpectralOps, arr: np.ndarray, t: float, beta: float) -> np.ndarray:
    return ops.split_short_long(arr, t ** beta)[0]


def _onset_log_time(ops: SpectralOps, beta: float) -> np.ndarray:
    """u_xi = (1/beta) ln|xi|: a mode is long once ln t >= u_xi."""
    safe = np.where(ops.kmag > 0, ops.kmag, 1.0)
    return np.where(ops.kmag > 0, np.log(safe) / beta, -np.inf)


def closed_form_multiplier(ops: SpectralOps, t: float, beta: float) -> np.ndarray:
    """max(0, ln t - (1/beta) max(0, ln|xi|))."""
    return np.maximum(0.0, np.log(t) - np.maximum(0.0, _onset_log_time(ops, beta)))


def _mean_zero(arr: np.ndarray) -> np.ndarray:
    return arr - arr.mean()


class ProfileTrack:
    """W, dW/dt, S, dS/dt, B_* and phi on a set of trajectory nodes.

    The S and phi integrals run over a log lattice on [1, times[0]] followed by
    the nodes themselves. B_* is evaluated with W on the fly, exactly on
    [t, times[-1]] and through the closure decades of the quadrature beyond;
    nothing is interpolated from stored samples.
    """

    def __init__(
        self,
        state: AsymptoticState,
        times: np.ndarray,
        variant: ProfileVariant = "full",
        quad: Optional[TimeKernelQuadrature] = None,
        nodes_per_decade: int = 40,
        workers: int = 1,
        progress_callback=None,
    ):
        times = np.asarray(times, dtype=float)
        if times.size == 0 or times[0] < 1.0:
            raise ValueError("profile nodes must start at t >= 1")
        self.state = state
        self.variant = variant
        self.times = times
        self.quad = quad or TimeKernelQuadrature()
        self.workers = workers
        self.grid = state.grid
        self.ops = spectral_ops(self.grid)
        self.beta = state.beta
        self._w_plus = state.w_plus.values
        self._progress = progress_callback
        self._current_b_history: Optional[FieldHistory] = None

        self.lattice = self._lower_lattice(times[0], nodes_per_decade)
        logger.info(
            f"Building {variant} profiles on {times.size} nodes "
            f"(+{self.lattice.size} lattice nodes below T = {times[0]:.4g})"
        )
        self.b_star = self._bstar_at_nodes()
        self._build_phase()

    @staticmethod
    def _lower_lattice(t_first: float, nodes_per_decade: int) -> np.ndarray:
        if t_first <= 1.0:
            return np.empty(0)
        count = max(2, int(np.ceil(nodes_per_decade * np.log10(t_first))) + 1)
        return np.exp(np.linspace(0.0, np.log(t_first), count))[:-1]

    def _notify(self, current: int, total: int, message: str) -> None:
        if self._progress:
            self._progress(current, total, message)

    # amplitude

    def W(self, t: float) -> np.ndarray:
        return profile_amplitude(self.ops, self._w_plus, t, self.variant)

    def dW(self, t: float) -> np.ndarray:
        return profile_amplitude_rate(self.ops, self._w_plus, t, self.variant)

    def W_at(self, index: int) -> np.ndarray:
        return self.W(self.times[index])

    # B_*

    def moment_at(self, tau: float) -> np.ndarray:
        w = self.W(tau)
        return moment_array(self.ops, w, w)

    def moment_history(self) -> FieldHistory:
        """x |W|^2 on the nodes, continued exactly past the last node."""
        samples = np.array([self.moment_at(t) for t in self.times])
        return FieldHistory(self.grid, self.times, samples, closure=self.moment_at)

    def bstar_history(self) -> FieldHistory:
        """Exact x |W|^2 history covering the lattice and the nodes."""
        t_min = self.lattice[0] if self.lattice.size else self.times[0]
        return AnalyticHistory(self.grid, self.moment_at, t_min, self.times[-1])

    def _bstar_at_nodes(self) -> np.ndarray:
        if self.variant != "full":
            frozen = FieldHistory(self.grid, self.times[-1:], self.moment_at(self.times[-1])[None])
            value = kernel_integral(frozen, 0, self.times[-1], self.quad)
            return np.repeat(value[None], self.times.size, axis=0)
        return kernel_sweep(self.bstar_history(), 0, self.quad, times=self.times, workers=self.workers)

    def _bstar_on_lattice(self) -> np.ndarray:
        if self.lattice.size == 0:
            return np.empty((0, 3) + self.grid.shape)
        if self.variant != "full":
            return np.repeat(self.b_star[:1], self.lattice.size, axis=0)
        return kernel_sweep(self.bstar_history(), 0, self.quad, times=self.lattice, workers=self.workers)

    # S and phi

    def _build_phase(self) -> None:
        ops = self.ops
        n_nodes = self.times.size
        if self.variant == "closed_form":
            g_hat = ops.fft(hartree_array(ops, self._w_plus, self._w_plus))
            xb_hat = ops.fft(np.sum(ops.x * self.b_star[0], axis=0))
            phis = []
            for t in self.times:
                phi_hat = np.log(t) * g_hat - closed_form_multiplier(ops, t, self.beta) * xb_hat
                phis.append(_mean_zero(ops.ifft(phi_hat).real))
            self.phi = np.array(phis)
        else:
            b_lattice = self._bstar_on_lattice()
            all_times = np.concatenate([self.lattice, self.times])
            all_b = np.concatenate([b_lattice, self.b_star]) if b_lattice.size else self.b_star
            u = np.log(all_times)
            g_hat = np.empty((all_times.size,) + self.grid.shape, dtype=np.complex128)
            xb_hat = np.empty_like(g_hat)
            for i, t in enumerate(all_times):
                w = self.W(t)
                g_hat[i] = ops.fft(hartree_array(ops, w, w))
                xb_hat[i] = ops.fft(np.sum(ops.x * all_b[i], axis=0))
                self._notify(i + 1, all_times.size, f"profile integrand at t = {t:.4g}")
            g_cum = running_integral(g_hat, u)
            xb_cum = running_integral(xb_hat, u)
            onset = _onset_log_time(ops, self.beta)
            offset = self.lattice.size
            phis = []
            for i in range(n_nodes):
                node = offset + i
                cut = np.clip(onset, 0.0, u[node])
                before_cut = _cumulative_at(u, xb_cum, xb_hat, cut)
                phi_hat = g_cum[node] - (xb_cum[node] - before_cut)
                phis.append(_mean_zero(ops.ifft(phi_hat).real))
            self.phi = np.array(phis)
        self.S = np.array([ops.gradient(p) for p in self.phi])
        self.phi_rate = np.array([self.phase_rate(i) for i in range(n_nodes)])
        self.dS = np.array([ops.gradient(r) for r in self.phi_rate])

    def phase_rate(self, index: int) -> np.ndarray:
        """d(phi)/dt = t^{-1}(g(W) - (x.B_*)_L) at a node."""
        ops = self.ops
        t = self.times[index]
        w = self.W(t)
        xb = np.sum(ops.x * self.b_star[index], axis=0)
        if self.variant == "closed_form":
            # derivative of the closed-form multiplier is 1/t on modes that are already long
            active = (closed_form_multiplier(ops, t, self.beta) > 0).astype(float)
            xb_long = ops.apply_multiplier(xb, active)
        else:
            xb_long = long_part(ops, xb, t, self.beta)
        return (hartree_array(ops, w, w) - xb_long) / t

    # histories for the solver

    def history(self, name: str) -> FieldHistory:
        data = {
            "S": self.S, "dS": self.dS, "B_star": self.b_star, "phi": self.phi, "phi_rate": self.phi_rate
        }[name]
        return FieldHistory(self.grid, self.times, data)

    def index_of(self, t: float) -> int:
        idx = int(np.argmin(np.abs(self.times - t)))
        if not np.isclose(self.times[idx], t, rtol=1e-12):
            raise ValueError(f"t = {t} is not a profile node")
        return idx

    # remainders

    def S_beyond(self, tau: float) -> np.ndarray:
        """S continued past the last node with its rate frozen in ln t."""
        t_last = self.times[-1]
        return self.S[-1] + t_last * self.dS[-1] * np.log(tau / t_last)

    def current_b_closure(self, tau: float) -> np.ndarray:
        """M_b(W, S, B_*) past the last node: exact W, log-linear S, B_* held at its last value."""
        return current_b_array(self.ops, self.W(tau), self.S_beyond(tau), self.b_star[-1])

    def current_b_history(self) -> FieldHistory:
        if self._current_b_history is None:
            samples = np.array([
                current_b_array(self.ops, self.W(t), self.S[i], self.b_star[i])
                for i, t in enumerate(self.times)
            ])
            self._current_b_history = FieldHistory(self.grid, self.times, samples, closure=self.current_b_closure)
        return self._current_b_history

    def remainders_at(self, index: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(R1, R2, R3) at one node."""
        ops = self.ops
        t = self.times[index]
        w = self.W(t)
        s = self.S[index]
        b = self.b_star[index]
        xb_short = short_part(ops, np.sum(ops.x * b, axis=0), t, self.beta)
        r1 = (
            transport_array(ops, s + b, w) / t ** 2
            - 0.5j / t ** 2 * (2.0 * np.sum(b * s, axis=0) + np.sum(b * b, axis=0)) * w
            + 1j / t * xb_short * w
        )
        jacobian = np.array([ops.gradient(s[j]) for j in range(3)])
        r2 = np.einsum("i...,ji...->j...", s, jacobian) / t ** 2
        r3 = kernel_integral(self.current_b_history(), 1, t, self.quad) / t
        return r1, r2, r3


# single-time operations

def single_time_nodes(t: float) -> np.ndarray:
    """Nodes on [t, t * 10^BSTAR_HORIZON_DECADES]; the track is read at the first one."""
    count = max(2, int(round(SINGLE_TIME_NODES_PER_DECADE * BSTAR_HORIZON_DECADES)) + 1)
    return t * 10.0 ** np.linspace(0.0, BSTAR_HORIZON_DECADES, count)


def _single_node_track(
    state: AsymptoticState,
    t: float,
    variant: ProfileVariant,
    quad: Optional[TimeKernelQuadrature],
    nodes_per_decade: int,
) -> ProfileTrack:
    return ProfileTrack(state, single_time_nodes(t), variant, quad, nodes_per_decade)


def build_W(state: AsymptoticState, t: float, variant: ProfileVariant = "full") -> ComplexScalarField:
    if t < 1.0:
        raise ValueError(f"profiles are defined for t >= 1, got {t}")
    ops = spectral_ops(state.grid)
    return state.w_plus.with_values(profile_amplitude(ops, state.w_plus.values, t, variant))


def build_S(
    state: AsymptoticState,
    t: float,
    variant: ProfileVariant = "full",
    quad: Optional[TimeKernelQuadrature] = None,
    nodes_per_decade: int = 40,
) -> RealVectorField:
    if t < 1.0:
        raise ValueError(f"profiles are defined for t >= 1, got {t}")
    track = _single_node_track(state, t, variant, quad, nodes_per_decade)
    return RealVectorField(grid=state.grid, components=track.S[0])


def compute_Bstar(
    state: AsymptoticState,
    t: float,
    t_max: Optional[float] = None,
    quad: Optional[TimeKernelQuadrature] = None,
) -> RealVectorField:
    """B_*(t) = B_a(W)(t) with W evaluated on the fly.

    W is exact on [t, t_max] and through the closure decades past t_max;
    t_max defaults to t * 10^BSTAR_HORIZON_DECADES. For t_max equal to the
    last node this is the value ProfileTrack stores at t.
    """
    if t < 1.0:
        raise ValueError(f"profiles are defined for t >= 1, got {t}")
    ops = spectral_ops(state.grid)
    w_plus = state.w_plus.values
    horizon = t * 10.0 ** BSTAR_HORIZON_DECADES if t_max is None else max(t, t_max)

    def moment(tau: float) -> np.ndarray:
        w = profile_amplitude(ops, w_plus, tau, "full")
        return moment_array(ops, w, w)

    history = AnalyticHistory(state.grid, moment, t, horizon)
    return RealVectorField(
        grid=state.grid, components=kernel_integral(history, 0, t, quad or TimeKernelQuadrature()), div_free=True
    )


def compute_remainders(
    state: AsymptoticState,
    t: float,
    variant: ProfileVariant = "full",
    quad: Optional[TimeKernelQuadrature] = None,
    nodes_per_decade: int = 40,
) -> Tuple[ComplexScalarField, RealVectorField, RealVectorField]:
    track = _single_node_track(state, t, variant, quad, nodes_per_decade)
    r1, r2, r3 = track.remainders_at(0)
    return (
        state.w_plus.with_values(r1),
        RealVectorField(grid=state.grid, components=r2),
        RealVectorField(grid=state.grid, components=r3, div_free=True),
    )


def build_phi(
    state: AsymptoticState,
    t: float,
    variant: ProfileVariant = "full",
    quad: Optional[TimeKernelQuadrature] = None,
    nodes_per_decade: int = 40,
) -> ComplexScalarField:
    """Leading phase with S = grad phi, pinned to mean zero."""
    if t < 1.0:
        raise ValueError(f"profiles are defined for t >= 1, got {t}")
    track = _single_node_track(state, t, variant, quad, nodes_per_decade)
    return state.w_plus.with_values(track.phi[0])


def quadrature_S(
    state: AsymptoticState,
    t: float,
    b_field: np.ndarray,
    nodes: int = 200,
) -> np.ndarray:
    """Direct log-time quadrature of the simplified-variant integrand for a fixed B field.

    Reference for the closed-form multiplier. The long-part cutoff is applied
    at the cell midpoints of a uniform ln t grid refined at every onset time
    ln|xi| / beta inside (0, ln t), so no cell straddles a cutoff step.
    """
    ops = spectral_ops(state.grid)
    w = state.w_plus.values
    grad_g = ops.gradient(hartree_array(ops, w, w))
    xb = np.sum(ops.x * b_field, axis=0)
    end = np.log(t)
    if end <= 0.0:
        return np.zeros_like(grad_g)
    onset = np.unique(_onset_log_time(ops, state.beta))
    inner = onset[(onset > 0.0) & (onset < end)]
    edges = np.unique(np.concatenate([np.linspace(0.0, end, nodes), inner]))
    mids = 0.5 * (edges[:-1] + edges[1:])
    widths = np.diff(edges)
    integrand = np.array([grad_g - ops.gradient(long_part(ops, xb, np.exp(m), state.beta)) for m in mids])
    return np.tensordot(widths, integrand, axes=1)


def _cumulative_at(u: np.ndarray, cumulative: np.ndarray, integrand: np.ndarray, where: np.ndarray) -> np.ndarray:
    """Per-mode value of the running integral at log time where[mode].

    Uses the stored running integral at the bracketing node plus a
    linear-integrand correction on the partial interval.
    """
    n_nodes = u.size
    flat_where = where.ravel()
    idx = np.clip(np.searchsorted(u, flat_where, side="right") - 1, 0, n_nodes - 1)
    nxt = np.minimum(idx + 1, n_nodes - 1)
    span = np.where(nxt > idx, u[nxt] - u[idx], 1.0)
    delta = flat_where - u[idx]
    modes = np.arange(flat_where.size)
    cum = cumulative.reshape(n_nodes, -1)
    vals = integrand.reshape(n_nodes, -1)
    h0 = vals[idx, modes]
    h1 = vals[nxt, modes]
    partial = delta * h0 + 0.5 * delta ** 2 / span * (h1 - h0)
    return (cum[idx, modes] + partial).reshape(where.shape)


def profile_norm_series(track: ProfileTrack, k: float) -> List[float]:
    """|B_*|_{K^{k+1}} at every node, used for the boundedness diagnostic."""
    return [track.ops.evaluate_norm(b, NormSpec(kind="K", order=k + 1.0)) for b in track.b_star]


def running_integral(values: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Cumulative integral along axis 0 on the (non-uniform) nodes u, starting at 0."""
    if u.size == 1:
        return np.zeros_like(values)
    rule = cumulative_simpson if u.size >= 3 else cumulative_trapezoid
    real = rule(values.real, x=u, axis=0, initial=0.0)
    if not np.iscomplexobj(values):
        return real
    return real + 1j * rule(values.imag, x=u, axis=0, initial=0.0)
