"""
Interaction quantities: Hartree potential, currents, the time kernels I_m and
F_j over geometric time grids, the fields B_a and B_b, and the short/long
frequency splitting.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Literal, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.interpolate import PchipInterpolator

from backend.core.errors import CoverageError, FieldValidationError
from backend.core.spectral_core import (
    ComplexScalarField,
    RealVectorField,
    SpectralGrid,
    SpectralOps,
    spectral_ops,
)

logger = logging.getLogger(__name__)

BOUNDARY_MASS_TOL = 1e-8


class TimeKernelQuadrature(BaseModel):
    """Composite Gauss-Legendre rule in ln(nu) on panels [rho^k, rho^(k+1)]."""

    ratio: float = Field(1.05, gt=1.0, description="Panel ratio rho in nu")
    points_per_panel: int = Field(8, ge=1, le=64, description="Gauss-Legendre points per panel")
    tail_exponent: float = Field(0.0, description="Assumed power decay of the integrand beyond the last node")
    tail_decades: float = Field(1.0, ge=0.0, description="Decades of closure quadrature beyond T_max")

    def panel_edges(self, lo: float, hi: float) -> np.ndarray:
        """Edges lo * rho^k clipped at hi; first edge is lo."""
        if hi <= lo:
            return np.array([lo])
        count = int(np.floor(np.log(hi / lo) / np.log(self.ratio) + 1e-9))
        edges = lo * self.ratio ** np.arange(count + 1)
        if hi / edges[-1] - 1.0 > 1e-9:
            edges = np.append(edges, hi)
        else:
            edges[-1] = hi
        return edges

    def rule(self, lo: float, hi: float) -> Tuple[np.ndarray, np.ndarray]:
        """Nodes and weights for int_lo^hi f(nu) dnu."""
        edges = self.panel_edges(lo, hi)
        if edges.size < 2:
            return np.empty(0), np.empty(0)
        gl_x, gl_w = np.polynomial.legendre.leggauss(self.points_per_panel)
        u_lo = np.log(edges[:-1])[:, None]
        du = np.diff(np.log(edges))[:, None]
        u = u_lo + 0.5 * du * (gl_x[None, :] + 1.0)
        nodes = np.exp(u)
        weights = 0.5 * du * gl_w[None, :] * nodes
        return nodes.ravel(), weights.ravel()

    def nu_nodes(self, nu_end: float) -> np.ndarray:
        return self.rule(1.0, nu_end)[0]


class SplitSpec(BaseModel):
    """Sharp Fourier cutoff at radius t^beta."""

    beta: float = Field(gt=0.0, lt=0.5)
    t: float = Field(gt=0.0)

    @property
    def radius(self) -> float:
        return self.t ** self.beta


class ScalarSeries(BaseModel):
    """Scalar samples on a time grid, interpolated by monotone cubics in ln t."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    times: np.ndarray
    values: np.ndarray

    @model_validator(mode="after")
    def _check(self) -> "ScalarSeries":
        if self.times.ndim != 1 or self.times.shape != self.values.shape:
            raise ValueError("times and values must be 1-d arrays of equal length")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be strictly increasing")
        return self

    @property
    def t_max(self) -> float:
        return float(self.times[-1])

    def __call__(self, t: np.ndarray) -> np.ndarray:
        if self.times.size == 1:
            return np.full(np.shape(t), self.values[0])
        return PchipInterpolator(np.log(self.times), self.values)(np.log(t))


class FieldHistory:
    """Field samples on a geometric time grid with a closure beyond the last sample.

    Interpolation between samples is monotone cubic in ln t. Beyond T_max the
    history continues with closure(tau) when one is given (the profile tail),
    otherwise as last_sample * (tau / T_max)^(-tail_exponent).
    """

    def __init__(
        self,
        grid: SpectralGrid,
        times: np.ndarray,
        samples: np.ndarray,
        tail_exponent: float = 0.0,
        closure: Optional[Callable[[float], np.ndarray]] = None,
    ):
        times = np.asarray(times, dtype=float)
        if samples.shape[0] != times.size:
            raise FieldValidationError(
                f"{samples.shape[0]} samples for {times.size} times"
            )
        if times.size > 1 and np.any(np.diff(times) <= 0):
            raise FieldValidationError("history times must be strictly increasing")
        if not np.all(np.isfinite(samples)):
            raise FieldValidationError("history contains non-finite samples")
        self.grid = grid
        self.times = times
        self.samples = samples
        self.tail_exponent = tail_exponent
        self.closure = closure
        self._interp = None

    @property
    def t_min(self) -> float:
        return float(self.times[0])

    @property
    def t_max(self) -> float:
        return float(self.times[-1])

    @property
    def last(self) -> np.ndarray:
        return self.samples[-1]

    def _interpolator(self) -> PchipInterpolator:
        if self._interp is None:
            flat = self.samples.reshape(self.times.size, -1)
            if np.iscomplexobj(flat):
                flat = np.concatenate([flat.real, flat.imag], axis=1)
            self._interp = PchipInterpolator(np.log(self.times), flat, axis=0)
        return self._interp

    def at(self, taus: np.ndarray) -> np.ndarray:
        """Samples at times inside [t_min, t_max], shape (len(taus),) + sample shape."""
        taus = np.atleast_1d(np.asarray(taus, dtype=float))
        if taus.size == 0:
            return np.empty((0,) + self.samples.shape[1:], dtype=self.samples.dtype)
        if self.times.size == 1:
            return np.repeat(self.samples, taus.size, axis=0)
        u = np.clip(np.log(taus), np.log(self.t_min), np.log(self.t_max))
        flat = self._interpolator()(u)
        if np.iscomplexobj(self.samples):
            half = flat.shape[1] // 2
            flat = flat[:, :half] + 1j * flat[:, half:]
        return flat.reshape((taus.size,) + self.samples.shape[1:])

    def beyond(self, tau: float) -> np.ndarray:
        if self.closure is not None:
            return self.closure(tau)
        return self.last * (tau / self.t_max) ** (-self.tail_exponent)


class AnalyticHistory(FieldHistory):
    """History given by a callable tau -> samples, exact inside and beyond [t_min, t_max].

    t_max only separates the body of the F_j quadrature from its closure
    decades; both evaluate func. tail_exponent still drives the analytic
    zero-mode remainder past the closure decades.
    """

    def __init__(
        self,
        grid: SpectralGrid,
        func: Callable[[float], np.ndarray],
        t_min: float,
        t_max: float,
        tail_exponent: float = 0.0,
    ):
        self.func = func
        times = np.array([t_min, t_max]) if t_max > t_min else np.array([t_min])
        samples = np.array([func(t) for t in times])
        super().__init__(grid, times, samples, tail_exponent, closure=func)

    def at(self, taus: np.ndarray) -> np.ndarray:
        taus = np.atleast_1d(np.asarray(taus, dtype=float))
        return np.array([self.func(tau) for tau in taus]).reshape((taus.size,) + self.samples.shape[1:])


SeriesLike = Union[ScalarSeries, Callable[[np.ndarray], np.ndarray]]


# pointwise interaction quantities

def density_potential(ops: SpectralOps, rho: np.ndarray) -> np.ndarray:
    """(-Delta)^{-1} rho with the mean removed."""
    return -ops.inverse_laplacian(rho)


def hartree_array(ops: SpectralOps, w1: np.ndarray, w2: np.ndarray) -> np.ndarray:
    return density_potential(ops, np.real(np.conj(w1) * w2))


def moment_array(ops: SpectralOps, w1: np.ndarray, w2: np.ndarray) -> np.ndarray:
    """x Re(conj(w1) w2), the integrand of B_a."""
    return ops.x * np.real(np.conj(w1) * w2)[None]


def current_b_array(ops: SpectralOps, w: np.ndarray, s: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Im(conj(w) grad w) - (s + B)|w|^2."""
    grad_w = ops.gradient(w)
    return np.imag(np.conj(w)[None] * grad_w) - (s + b) * (np.abs(w) ** 2)[None]


def transport_array(ops: SpectralOps, s: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Q(s, w) = s.grad w + (1/2)(div s) w."""
    return np.sum(s * ops.gradient(w), axis=0) + 0.5 * ops.divergence(s) * w


def boundary_mass_fraction(ops: SpectralOps, w: np.ndarray) -> float:
    """Largest |w| on the outer faces of the box relative to max |w|."""
    peak = np.max(np.abs(w))
    if peak == 0:
        return 0.0
    faces = max(
        np.max(np.abs(w[0])), np.max(np.abs(w[:, 0])), np.max(np.abs(w[:, :, 0]))
    )
    return float(faces / peak)


def hartree_g(w1: ComplexScalarField, w2: Optional[ComplexScalarField] = None) -> ComplexScalarField:
    """g(w1, w2) = (-Delta)^{-1} Re(conj(w1) w2); g(w) = g(w, w)."""
    w2 = w1 if w2 is None else w2
    if not w1.grid.compatible(w2.grid):
        raise FieldValidationError("hartree_g needs compatible grids")
    ops = spectral_ops(w1.grid)
    return w1.with_values(hartree_array(ops, w1.values, w2.values))


def current_Ma(w: ComplexScalarField) -> RealVectorField:
    ops = spectral_ops(w.grid)
    fraction = boundary_mass_fraction(ops, w.values)
    if fraction > BOUNDARY_MASS_TOL:
        logger.warning(
            f"Field does not decay at the box boundary (|w| ratio {fraction:.2e}); "
            f"x|w|^2 carries periodization error"
        )
    return RealVectorField(grid=w.grid, components=moment_array(ops, w.values, w.values))


def current_Mb(w: ComplexScalarField, s: RealVectorField, B: RealVectorField) -> RealVectorField:
    if not (w.grid.compatible(s.grid) and w.grid.compatible(B.grid)):
        raise FieldValidationError("current_Mb needs compatible grids")
    ops = spectral_ops(w.grid)
    return RealVectorField(
        grid=w.grid, components=current_b_array(ops, w.values, s.components, B.components)
    )


def split_short_long(f: ComplexScalarField, spec: SplitSpec) -> Tuple[ComplexScalarField, ComplexScalarField]:
    short, long = spectral_ops(f.grid).split_short_long(f.values, spec.radius)
    return f.with_values(short), f.with_values(long)


# time kernels

def _as_callable(f: SeriesLike) -> Callable[[np.ndarray], np.ndarray]:
    return f if not isinstance(f, ScalarSeries) else f.__call__


def apply_Im(
    f: SeriesLike,
    m: float,
    t: float,
    quad: TimeKernelQuadrature,
    t_max: Optional[float] = None,
    form: Literal["nu", "time"] = "nu",
) -> float:
    """I_m(f)(t) = int_1^inf nu^{-m-3/2} f(nu t) dnu with a power-law tail beyond T_max.

    form="time" evaluates the equivalent t^{m+1/2} int_t^inf t'^{-m-3/2} f(t') dt'
    on panels anchored at T_max.
    """
    if isinstance(f, ScalarSeries):
        t_max = f.t_max if t_max is None else t_max
        if t < f.times[0] * (1 - 1e-12):
            raise CoverageError(f"t = {t} precedes the series start {f.times[0]}")
    if t_max is None:
        raise ValueError("t_max is required for callable integrands")
    if t > t_max * (1 + 1e-12):
        raise CoverageError(f"t = {t} exceeds T_max = {t_max}")
    p = quad.tail_exponent
    if m + p + 0.5 <= 0:
        raise ValueError(f"tail integral diverges for m + p + 1/2 = {m + p + 0.5}")
    func = _as_callable(f)
    f_end = float(func(np.array([t_max]))[0])
    a = t_max / t
    tail = f_end * a ** (-m - 0.5) / (m + p + 0.5)
    if form == "nu":
        nodes, weights = quad.rule(1.0, a)
        body = float(np.sum(weights * nodes ** (-m - 1.5) * func(nodes * t))) if nodes.size else 0.0
        return body + tail
    # panels anchored at T_max, walking down to t
    edges = t_max / quad.panel_edges(1.0, a)[::-1]
    gl_x, gl_w = np.polynomial.legendre.leggauss(quad.points_per_panel)
    body = 0.0
    for lo, hi in zip(edges[:-1], edges[1:]):
        u = np.log(lo) + 0.5 * np.log(hi / lo) * (gl_x + 1.0)
        tp = np.exp(u)
        body += float(np.sum(0.5 * np.log(hi / lo) * gl_w * tp * tp ** (-m - 1.5) * func(tp)))
    return t ** (m + 0.5) * body + tail


def _kernel_multiplier(ops: SpectralOps, nu: float) -> np.ndarray:
    """sin(|xi| (nu - 1)) / |xi|, equal to nu - 1 at xi = 0."""
    kmag = ops.kmag
    safe = np.where(kmag > 0, kmag, 1.0)
    return np.where(kmag > 0, np.sin(kmag * (nu - 1.0)) / safe, nu - 1.0)


def _zero_mode_tail(j: int, p: float, nu_end: float, nu_max: float) -> float:
    """int_{nu_end}^inf (nu - 1) nu^{-3-j} (nu / nu_max)^{-p} dnu."""
    a = nu_end
    return nu_max ** p * (a ** (-1 - j - p) / (1 + j + p) - a ** (-2 - j - p) / (2 + j + p))


def kernel_integral(history: FieldHistory, j: int, t: float, quad: TimeKernelQuadrature) -> np.ndarray:
    """F_j(M)(t) as a raw (3, n, n, n) array, Leray-projected."""
    if j not in (0, 1):
        raise ValueError(f"kernel index j must be 0 or 1, got {j}")
    if t > history.t_max * (1 + 1e-12) or t < history.t_min * (1 - 1e-12):
        raise CoverageError(
            f"t = {t:.6g} outside the stored window [{history.t_min:.6g}, {history.t_max:.6g}]"
        )
    ops = spectral_ops(history.grid)
    p = history.tail_exponent
    nu_max = max(history.t_max / t, 1.0)
    nu_end = nu_max * 10.0 ** quad.tail_decades
    acc_hat = np.zeros((3,) + history.grid.shape, dtype=np.complex128)

    nodes, weights = quad.rule(1.0, nu_max)
    if nodes.size:
        for nu, wt in zip(nodes, weights):
            sample = history.at(np.array([nu * t]))[0]
            acc_hat += (wt * nu ** (-3 - j)) * _kernel_multiplier(ops, nu) * ops.fft(ops.dilate(sample, nu))

    nodes, weights = quad.rule(nu_max, nu_end)
    for nu, wt in zip(nodes, weights):
        closure = history.beyond(nu * t)
        acc_hat += (wt * nu ** (-3 - j)) * _kernel_multiplier(ops, nu) * ops.fft(ops.dilate(closure, nu))

    far = ops.fft(ops.dilate(history.beyond(nu_end * t), nu_end))[:, 0, 0, 0]
    acc_hat[:, 0, 0, 0] += _zero_mode_tail(j, p, nu_end, nu_max) * far * (nu_end / nu_max) ** p
    return ops.leray(ops.ifft(acc_hat).real)


def kernel_sweep(
    history: FieldHistory,
    j: int,
    quad: TimeKernelQuadrature,
    times: Optional[np.ndarray] = None,
    workers: int = 1,
) -> np.ndarray:
    """F_j at every requested time (default: every history node), node-parallel."""
    times = history.times if times is None else np.asarray(times)
    if workers <= 1 or times.size <= 1:
        return np.array([kernel_integral(history, j, t, quad) for t in times])
    with ThreadPoolExecutor(max_workers=workers) as executor:
        return np.array(list(executor.map(lambda t: kernel_integral(history, j, t, quad), times)))


def apply_Fj(M: FieldHistory, j: int, t: float, quad: TimeKernelQuadrature) -> RealVectorField:
    return RealVectorField(grid=M.grid, components=kernel_integral(M, j, t, quad), div_free=True)


def moment_history(w1: FieldHistory, w2: Optional[FieldHistory] = None) -> FieldHistory:
    """x Re(conj(w1) w2) on the shared nodes; closures carry over when both inputs have one."""
    w2 = w1 if w2 is None else w2
    if not np.allclose(w1.times, w2.times, rtol=1e-12):
        raise FieldValidationError("histories must share their time grid")
    ops = spectral_ops(w1.grid)
    samples = np.array([moment_array(ops, a, b) for a, b in zip(w1.samples, w2.samples)])
    closure = None
    if w1.closure is not None and w2.closure is not None:
        closure = lambda tau: moment_array(ops, w1.closure(tau), w2.closure(tau))
    return FieldHistory(w1.grid, w1.times, samples, tail_exponent=0.0, closure=closure)


def compute_Ba(
    w1: FieldHistory,
    w2: Optional[FieldHistory],
    t: float,
    quad: TimeKernelQuadrature,
) -> RealVectorField:
    """B_a(w1, w2)(t) = F_0(x Re(conj(w1) w2)); B_a(w) = B_a(w, w)."""
    return apply_Fj(moment_history(w1, w2), 0, t, quad)


def current_b_history(w: FieldHistory, s: FieldHistory, b: FieldHistory) -> FieldHistory:
    ops = spectral_ops(w.grid)
    samples = np.array([
        current_b_array(ops, wn, sn, bn) for wn, sn, bn in zip(w.samples, s.samples, b.samples)
    ])
    closure = None
    if all(h.closure is not None for h in (w, s, b)):
        closure = lambda tau: current_b_array(ops, w.closure(tau), s.closure(tau), b.closure(tau))
    return FieldHistory(w.grid, w.times, samples, tail_exponent=0.0, closure=closure)


def compute_Bb(
    w: FieldHistory,
    s: FieldHistory,
    B: FieldHistory,
    t: float,
    quad: TimeKernelQuadrature,
) -> RealVectorField:
    """B_b(t) = t^{-1} F_1(Im(conj(w) grad w) - (s + B)|w|^2)."""
    field = apply_Fj(current_b_history(w, s, B), 1, t, quad)
    return RealVectorField(grid=field.grid, components=field.components / t, div_free=True)


def retarded_integral(
    history: FieldHistory,
    j: int,
    t: float,
    quad: TimeKernelQuadrature,
    horizon_decades: float = 2.0,
) -> np.ndarray:
    """-int_t^inf K(t - t') t'^{-3-j} D0(t') P M(t') dt' by direct quadrature in t'.

    K(t) = omega^{-1} sin(omega t). Used to cross-check F_j.
    """
    ops = spectral_ops(history.grid)
    nodes, weights = quad.rule(1.0, 10.0 ** horizon_decades)
    acc_hat = np.zeros((3,) + history.grid.shape, dtype=np.complex128)
    for nu, wt in zip(nodes, weights):
        tp = nu * t
        sample = history.at(np.array([tp]))[0] if tp <= history.t_max else history.beyond(tp)
        projected = ops.leray(sample)
        mult = _kernel_multiplier(ops, 1.0 + (tp - t))
        acc_hat += (wt * t * tp ** (-3 - j)) * mult * ops.fft(ops.dilate(projected, tp))
    return ops.ifft(acc_hat).real


def commutator_xP(v: RealVectorField) -> Tuple[np.ndarray, np.ndarray]:
    """Return (x.(Pv) - sum_i (P(x_i v))_i, (n-1) Delta^{-1} div v) for n = 3.

    The second entry is the Fourier-derivative closed form; the two agree for
    smooth, centrally supported v.
    """
    ops = spectral_ops(v.grid)
    vec = v.components
    direct = np.sum(ops.x * ops.leray(vec), axis=0)
    for i in range(3):
        direct = direct - ops.leray(ops.x[i][None] * vec)[i]
    closed = 2.0 * ops.inverse_laplacian(ops.divergence(vec))
    return direct, closed


def transport_Q(s: RealVectorField, w: ComplexScalarField) -> ComplexScalarField:
    """Transport operator Q(s, w) = s.grad w + (1/2)(div s) w."""
    if not s.grid.compatible(w.grid):
        raise FieldValidationError("transport_Q needs compatible grids")
    return w.with_values(transport_array(spectral_ops(w.grid), s.components, w.values))
