"""
Linearized time stepping, the Gamma map and the fixed-point drivers for the
auxiliary system in the variables (q, sigma, B_b) = (w, s, B_b) - (W, S, 0).

Every Gamma application freezes the coefficients (w, s, B) of the incoming
trajectory, integrates the linear (q', sigma') equations node to node and then
assigns B_b' from the kernel F_1 on the incoming (w, s, B).
"""

import logging
from typing import Any, Callable, Dict, List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from backend.core.errors import (
    ConfigError,
    CoverageError,
    FieldValidationError,
    NonContractionError,
    StencilError,
    StepSizeError,
)
from backend.core.models import IterationReport, WeightedNorms
from backend.core.potentials import (
    FieldHistory,
    TimeKernelQuadrature,
    current_b_array,
    hartree_array,
    kernel_sweep,
    moment_array,
)
from backend.core.profiles import AsymptoticState, ProfileTrack, ProfileVariant
from backend.core.spectral_core import (
    ComplexScalarField,
    RealVectorField,
    SpectralGrid,
    SpectralOps,
    spectral_ops,
)

logger = logging.getLogger(__name__)

SIGMA_CURL_TOL = 1e-8
B_DIV_TOL = 1e-10
CLOSURE_EXPONENT_RANGE = (1.5, 4.0)
NON_CONTRACTION_PATIENCE = 3
ROUNDOFF_FLOOR = 100.0 * np.finfo(float).eps
Q_TAIL_EXPONENT = 1.0

ProgressCallback = Callable[[int, int, str], None]
TailMarker = Literal["profile_closure", "zero"]
CurrentSource = Literal["input", "image"]


class TimeGridSpec(BaseModel):
    """Geometric node grid T * rho^n, n = 0..N, with T * rho^N >= T_max."""

    model_config = ConfigDict(extra="forbid")

    T: float = Field(20.0, description="First node")
    T_max: float = Field(200.0, description="Requested last node")
    rho: float = Field(10.0 ** 0.1, gt=1.0, description="Node ratio")
    floor: float = Field(2.0, gt=1.0, description="Smallest admissible T")

    @model_validator(mode="after")
    def _check(self) -> "TimeGridSpec":
        if self.T < self.floor:
            raise ConfigError("time_floor", f"T = {self.T} is below the configured floor {self.floor}")
        if self.T_max <= self.T:
            raise ConfigError("time_window", f"T_max = {self.T_max} must exceed T = {self.T}")
        return self

    @property
    def node_count(self) -> int:
        return int(np.ceil(np.log(self.T_max / self.T) / np.log(self.rho) - 1e-9)) + 1

    @property
    def times(self) -> np.ndarray:
        return self.T * self.rho ** np.arange(self.node_count)

    @property
    def decades(self) -> float:
        return float(np.log10(self.times[-1] / self.T))

    def doubled(self) -> "TimeGridSpec":
        return self.model_copy(update={"T_max": 2.0 * float(self.times[-1])})


class SolverSettings(BaseModel):
    """Fixed-point and integrator controls."""

    model_config = ConfigDict(extra="forbid")

    tol: float = Field(1e-8, gt=0.0, description="Relative weighted distance that ends the iteration")
    max_iters: int = Field(30, ge=1)
    under_relaxation: float = Field(1.0, gt=0.0, le=1.0, description="next = (1 - l) old + l Gamma(old)")
    step_tol: float = Field(1e-9, gt=0.0, description="Local error per unit interval in ln t, relative")
    step_atol: float = Field(1e-14, ge=0.0, description="Absolute local error per unit interval in ln t")
    min_step: float = Field(1e-7, gt=0.0, description="Smallest sub-step in ln t before failing")
    terminal_closure: bool = Field(True, description="Power-law tail data at T_max instead of zero data")
    workers: int = Field(1, ge=1, description="Threads for node-parallel kernel sweeps")
    current_source: CurrentSource = Field(
        "input", description="Iterate M_b is evaluated on when Gamma assigns B_b': the incoming one or its image"
    )


class AuxState(BaseModel):
    """(q, sigma, B_b) at one node."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    q: ComplexScalarField
    sigma: RealVectorField
    B_b: RealVectorField
    t: float = Field(gt=0.0)

    @model_validator(mode="after")
    def _check(self) -> "AuxState":
        grid = self.q.grid
        if not (grid.compatible(self.sigma.grid) and grid.compatible(self.B_b.grid)):
            raise FieldValidationError("AuxState components live on different grids")
        ops = spectral_ops(grid)
        if ops.curl_defect(self.sigma.components) > SIGMA_CURL_TOL:
            raise FieldValidationError(f"sigma is not curl-free at t = {self.t:.6g}")
        if ops.divergence_defect(self.B_b.components) > B_DIV_TOL:
            raise FieldValidationError(f"B_b is not divergence-free at t = {self.t:.6g}")
        return self


class Trajectory:
    """Node samples of (q, sigma, B_b) on a geometric time grid.

    b_a caches B_a(W + q) at the nodes when it is known; Gamma needs it as a
    frozen coefficient of the next application.
    """

    def __init__(
        self,
        grid: SpectralGrid,
        times: np.ndarray,
        q: np.ndarray,
        sigma: np.ndarray,
        b_b: np.ndarray,
        b_a: Optional[np.ndarray] = None,
        tail: TailMarker = "profile_closure",
        meta: Optional[Dict[str, float]] = None,
    ):
        times = np.asarray(times, dtype=float)
        if times.size > 1 and np.any(np.diff(times) <= 0):
            raise FieldValidationError("trajectory times must be strictly increasing")
        shape = (times.size,) + grid.shape
        if q.shape != shape or sigma.shape[:1] + sigma.shape[2:] != shape or b_b.shape != sigma.shape:
            raise FieldValidationError("trajectory arrays do not match the node grid")
        if b_a is not None and b_a.shape != b_b.shape:
            raise FieldValidationError("cached B_a does not match the node grid")
        self.grid = grid
        self.times = times
        self.q = np.asarray(q, dtype=np.complex128)
        self.sigma = np.asarray(sigma, dtype=float)
        self.b_b = np.asarray(b_b, dtype=float)
        self.b_a = b_a
        self.tail = tail
        self.meta = dict(meta or {})

    @classmethod
    def zeros(
        cls,
        grid: SpectralGrid,
        times: np.ndarray,
        b_a: Optional[np.ndarray] = None,
        tail: TailMarker = "profile_closure",
    ) -> "Trajectory":
        times = np.asarray(times, dtype=float)
        vec = np.zeros((times.size, 3) + grid.shape)
        return cls(grid, times, np.zeros((times.size,) + grid.shape, dtype=np.complex128), vec, vec.copy(), b_a, tail)

    @property
    def n_nodes(self) -> int:
        return self.times.size

    @property
    def T(self) -> float:
        return float(self.times[0])

    @property
    def T_max(self) -> float:
        return float(self.times[-1])

    @property
    def rho(self) -> float:
        if self.n_nodes < 2:
            return 1.0
        return float(self.times[1] / self.times[0])

    def state(self, index: int) -> AuxState:
        return AuxState(
            q=ComplexScalarField(grid=self.grid, values=self.q[index]),
            sigma=RealVectorField(grid=self.grid, components=self.sigma[index]),
            B_b=RealVectorField(grid=self.grid, components=self.b_b[index]),
            t=float(self.times[index]),
        )

    @property
    def states(self) -> List[AuxState]:
        return [self.state(i) for i in range(self.n_nodes)]

    def truncated(self, start: int) -> "Trajectory":
        """Drop the first start nodes."""
        b_a = None if self.b_a is None else self.b_a[start:]
        return Trajectory(
            self.grid, self.times[start:], self.q[start:], self.sigma[start:], self.b_b[start:], b_a, self.tail, self.meta
        )

    def node_index(self, t: float) -> int:
        """Node closest to t in ln t."""
        return int(np.argmin(np.abs(np.log(self.times / t))))

    def blended(self, other: "Trajectory", weight: float) -> "Trajectory":
        """(1 - weight) self + weight other; the cached B_a is dropped unless weight == 1."""
        if weight == 1.0:
            return other
        mix = lambda a, b: (1.0 - weight) * a + weight * b
        return Trajectory(
            self.grid, self.times, mix(self.q, other.q), mix(self.sigma, other.sigma), mix(self.b_b, other.b_b),
            None, other.tail, other.meta,
        )

    def difference(self, other: "Trajectory") -> "Trajectory":
        return Trajectory(
            self.grid, self.times, self.q - other.q, self.sigma - other.sigma, self.b_b - other.b_b, None, self.tail
        )

    def amplitude(self, track: ProfileTrack) -> np.ndarray:
        """w = W + q at every node."""
        return np.array([track.W(t) for t in self.times]) + self.q


# coefficients frozen from an incoming trajectory


def advect(ops: SpectralOps, s: np.ndarray, v: np.ndarray) -> np.ndarray:
    """(s . grad) v for vector fields s, v."""
    jacobian = np.array([ops.gradient(v[j]) for j in range(3)])
    return np.einsum("i...,ji...->j...", s, jacobian)


class _Coefficients:
    __slots__ = (
        "t", "drift", "half_div", "potential", "source_q", "s", "source_sigma", "hartree", "xba_long", "phase_rate"
    )


class FrozenCoefficients:
    """Coefficients of the linearized system built from (W, S) and a trajectory.

    Between nodes the trajectory is interpolated monotonically in ln t; the
    profile amplitude W is evaluated exactly. Gradient fields (s, S, dS/dt)
    are interpolated through their scalar potentials, so they stay gradients
    between nodes and the psi rate differentiates to the sigma rate.
    """

    def __init__(self, traj: Trajectory, track: ProfileTrack, quad: TimeKernelQuadrature, workers: int = 1):
        if not np.allclose(traj.times, track.times, rtol=1e-12):
            raise CoverageError("trajectory and profiles use different node grids")
        self.track = track
        self.ops = track.ops
        self.beta = track.beta
        grid = traj.grid
        b_a = traj.b_a
        if b_a is None:
            b_a = assign_Ba(traj.q, track, quad, workers)
        self.b_a_nodes = b_a
        sigma_potential = np.array([self.ops.potential(sigma) for sigma in traj.sigma])
        self._q = FieldHistory(grid, traj.times, traj.q)
        self._s_potential = FieldHistory(grid, traj.times, track.phi + sigma_potential)
        self._b_a = FieldHistory(grid, traj.times, b_a)
        self._b_b = FieldHistory(grid, traj.times, traj.b_b)
        self._phi = track.history("phi")
        self._phi_rate = track.history("phi_rate")
        self._cache: Dict[float, _Coefficients] = {}

    def at(self, t: float) -> _Coefficients:
        key = round(float(np.log(t)), 13)
        found = self._cache.get(key)
        if found is not None:
            return found
        if len(self._cache) > 64:
            self._cache.clear()
        coeffs = self._evaluate(t)
        self._cache[key] = coeffs
        return coeffs

    def _evaluate(self, t: float) -> _Coefficients:
        ops = self.ops
        tau = np.array([t])
        W = self.track.W(t)
        w = W + self._q.at(tau)[0]
        s = ops.gradient(self._s_potential.at(tau)[0])
        b_a = self._b_a.at(tau)[0]
        b_b = self._b_b.at(tau)[0]
        B = b_a + b_b
        xba_short, xba_long = ops.split_short_long(np.sum(ops.x * b_a, axis=0), t ** self.beta)
        xbb = np.sum(ops.x * b_b, axis=0)

        c = _Coefficients()
        c.t = t
        c.s = s
        c.drift = (s + B) / t ** 2
        c.half_div = 0.5 * ops.divergence(s + B) / t ** 2
        c.potential = (
            -(2.0 * np.sum(B * s, axis=0) + np.sum(B * B, axis=0)) / (2.0 * t ** 2)
            + (xba_short + xbb) / t
        )
        free_defect = 0.5j / t ** 2 * ops.laplacian(W) - self.track.dW(t)
        c.source_q = self._interaction(c, W) + free_defect
        S = ops.gradient(self._phi.at(tau)[0])
        c.hartree = hartree_array(ops, w, w)
        c.xba_long = xba_long
        c.phase_rate = self._phi_rate.at(tau)[0]
        c.source_sigma = (
            advect(ops, s, S) / t ** 2
            + ops.gradient(c.hartree) / t
            - ops.gradient(xba_long) / t
            - ops.gradient(c.phase_rate)
        )
        return c

    def _interaction(self, c: _Coefficients, v: np.ndarray) -> np.ndarray:
        """t^-2 Q(s + B, v) + i V v, i.e. L minus its free part."""
        ops = self.ops
        return np.sum(c.drift * ops.gradient(v), axis=0) + c.half_div * v + 1j * c.potential * v

    def q_rate(self, t: float, q: np.ndarray, homogeneous: bool = False) -> np.ndarray:
        """dq'/dt without the free part i (2 t^2)^-1 Delta q'."""
        c = self.at(t)
        rate = self._interaction(c, q)
        return rate if homogeneous else rate + c.source_q

    def sigma_rate(self, t: float, sigma: np.ndarray, homogeneous: bool = False) -> np.ndarray:
        c = self.at(t)
        rate = advect(self.ops, c.s, sigma) / t ** 2
        if not homogeneous:
            rate = rate + c.source_sigma
        return self.ops.gradient_part(rate)

    def psi_rate(self, t: float) -> np.ndarray:
        """d(psi)/dt = (2t^2)^-1 |s|^2 + t^-1 (g(w) - (x.B_a)_L) - d(phi)/dt."""
        c = self.at(t)
        return np.sum(c.s * c.s, axis=0) / (2.0 * t ** 2) + (c.hartree - c.xba_long) / t - c.phase_rate


# time integration


class _Packer:
    """(z, sigma) <-> one flat complex vector."""

    def __init__(self, grid: SpectralGrid):
        self.shape = grid.shape
        self.size = int(np.prod(grid.shape))

    def pack(self, z: np.ndarray, sigma: np.ndarray) -> np.ndarray:
        return np.concatenate([z.ravel(), sigma.ravel().astype(np.complex128)])

    def unpack(self, y: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        z = y[: self.size].reshape(self.shape)
        sigma = y[self.size:].real.reshape((3,) + self.shape)
        return z, sigma


def _rk4(
    rhs: Callable[[float, np.ndarray], np.ndarray], u: float, y: np.ndarray, h: float, k1: Optional[np.ndarray] = None
) -> np.ndarray:
    k1 = rhs(u, y) if k1 is None else k1
    k2 = rhs(u + 0.5 * h, y + 0.5 * h * k1)
    k3 = rhs(u + 0.5 * h, y + 0.5 * h * k2)
    k4 = rhs(u + h, y + h * k3)
    return y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


class LinearizedStepper:
    """Advances (q', sigma') between nodes.

    q' is carried in the interaction picture z = U(1/t) q', so the free
    Schrodinger part is exact; everything else goes through classical RK4 in
    u = ln t with step-doubling error control. The local error allowed per
    step is max(step_tol h scale, step_atol h, ROUNDOFF_FLOOR scale) with
    scale = max(|y|, |y_new|, h |y'|).
    """

    def __init__(self, coeffs: FrozenCoefficients, settings: SolverSettings, homogeneous: bool = False):
        self.coeffs = coeffs
        self.ops = coeffs.ops
        self.settings = settings
        self.homogeneous = homogeneous
        self.packer = _Packer(coeffs.ops.grid)
        self.h: Optional[float] = None
        self.rejections = 0
        self.accepted = 0

    def _rhs(self, u: float, y: np.ndarray) -> np.ndarray:
        t = float(np.exp(u))
        z, sigma = self.packer.unpack(y)
        q = self.ops.free_propagator(z, -1.0 / t)
        dz = self.ops.free_propagator(self.coeffs.q_rate(t, q, self.homogeneous), 1.0 / t)
        dsigma = self.coeffs.sigma_rate(t, sigma, self.homogeneous)
        return t * self.packer.pack(dz, dsigma)

    def to_interaction(self, t: float, q: np.ndarray, sigma: np.ndarray) -> np.ndarray:
        return self.packer.pack(self.ops.free_propagator(q, 1.0 / t), sigma)

    def from_interaction(self, t: float, y: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        z, sigma = self.packer.unpack(y)
        return self.ops.free_propagator(z, -1.0 / t), sigma.copy()

    def advance(self, t_from: float, t_to: float, q: np.ndarray, sigma: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        y = self.to_interaction(t_from, q, sigma)
        y = self.integrate(y, float(np.log(t_from)), float(np.log(t_to)))
        return self.from_interaction(t_to, y)

    def integrate(self, y: np.ndarray, u0: float, u1: float) -> np.ndarray:
        span = u1 - u0
        if span == 0.0:
            return y
        direction = np.sign(span)
        h = min(abs(self.h), abs(span)) if self.h else abs(span)
        u = u0
        tol = self.settings.step_tol
        atol = self.settings.step_atol
        k1 = None
        while direction * (u1 - u) > 1e-14 * max(1.0, abs(u1)):
            remaining = abs(u1 - u)
            # no sliver steps at the end of an interval
            h = remaining if remaining - h < self.settings.min_step else h
            if h < self.settings.min_step:
                raise StepSizeError(
                    f"sub-step {h:.3e} in ln t fell below the minimum {self.settings.min_step:.1e} "
                    f"at t = {np.exp(u):.6g}"
                )
            step = direction * h
            if k1 is None:
                k1 = self._rhs(u, y)
            big = _rk4(self._rhs, u, y, step, k1)
            half = _rk4(self._rhs, u, y, 0.5 * step, k1)
            small = _rk4(self._rhs, u + 0.5 * step, half, 0.5 * step)
            err = np.linalg.norm(small - big) / 15.0
            scale = max(np.linalg.norm(small), np.linalg.norm(y), h * np.linalg.norm(k1), 1e-300)
            allowed = max(tol * h * scale, atol * h, ROUNDOFF_FLOOR * scale)
            if err <= allowed:
                y = small + (small - big) / 15.0
                u += step
                k1 = None
                self.accepted += 1
                growth = 4.0 if err == 0 else min(4.0, 0.9 * (allowed / err) ** 0.25)
                h *= max(growth, 1.0)
            else:
                self.rejections += 1
                logger.debug(f"Rejected sub-step {h:.3e} at t = {np.exp(u):.6g} (error {err:.2e} > {allowed:.2e})")
                h *= max(0.2, 0.9 * (allowed / err) ** 0.25)
        self.h = h
        return y


def step_linearized(
    traj_in: Trajectory,
    track: ProfileTrack,
    start: AuxState,
    target: int,
    settings: Optional[SolverSettings] = None,
    quad: Optional[TimeKernelQuadrature] = None,
    homogeneous: bool = False,
) -> AuxState:
    """Advance (q', sigma') from start.t to the node traj_in.times[target].

    B_b is not stepped; the result carries traj_in's B_b at the target node
    until the sweep assigns the new one.
    """
    settings = settings or SolverSettings()
    coeffs = FrozenCoefficients(traj_in, track, quad or TimeKernelQuadrature(), settings.workers)
    stepper = LinearizedStepper(coeffs, settings, homogeneous)
    t_to = float(traj_in.times[target])
    q, sigma = stepper.advance(start.t, t_to, start.q.values, start.sigma.components)
    return AuxState(
        q=ComplexScalarField(grid=traj_in.grid, values=q),
        sigma=RealVectorField(grid=traj_in.grid, components=sigma),
        B_b=RealVectorField(grid=traj_in.grid, components=traj_in.b_b[target]),
        t=t_to,
    )


# kernel assignments


def assign_Ba(
    q: np.ndarray,
    track: ProfileTrack,
    quad: TimeKernelQuadrature,
    workers: int = 1,
) -> np.ndarray:
    """B_a(W + q) = B_* + F_0(x (2 Re(conj(W) q) + |q|^2)) at every node.

    B_* comes from the track, where W is evaluated on the fly. Only the
    q-dependent part goes through a node history, continued past T_max as
    t^-Q_TAIL_EXPONENT.
    """
    if q.shape[0] != track.times.size:
        raise CoverageError(f"{q.shape[0]} amplitude samples for {track.times.size} profile nodes")
    if not np.any(q):
        return track.b_star.copy()
    ops = track.ops
    samples = np.array([
        2.0 * moment_array(ops, track.W(t), qn) + moment_array(ops, qn, qn) for t, qn in zip(track.times, q)
    ])
    history = FieldHistory(track.grid, track.times, samples, tail_exponent=Q_TAIL_EXPONENT)
    return track.b_star + kernel_sweep(history, 0, quad, workers=workers)


def assign_Bb(
    w: np.ndarray,
    s: np.ndarray,
    B: np.ndarray,
    times: np.ndarray,
    grid: SpectralGrid,
    quad: TimeKernelQuadrature,
    workers: int = 1,
    closure: Optional[Callable[[float], np.ndarray]] = None,
) -> np.ndarray:
    """B_b = t^-1 F_1(Im(conj(w) grad w) - (s + B)|w|^2) at every node.

    closure continues the current past the last node; without one the last
    sample is held.
    """
    ops = spectral_ops(grid)
    samples = np.array([current_b_array(ops, wn, sn, bn) for wn, sn, bn in zip(w, s, B)])
    history = FieldHistory(grid, times, samples, closure=closure)
    return kernel_sweep(history, 1, quad, workers=workers) / times[:, None, None, None, None]


# the Gamma map


def _closure_exponent(norms: Tuple[float, float], times: Tuple[float, float]) -> float:
    lo, hi = CLOSURE_EXPONENT_RANGE
    if norms[0] <= 0.0 or norms[1] <= 0.0:
        return hi
    p = -np.log(norms[1] / norms[0]) / np.log(times[1] / times[0])
    return float(np.clip(p, lo, hi))


def terminal_data(coeffs: FrozenCoefficients, times: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """-int_{T_max}^inf source dt' for a source decaying like t'^-p beyond T_max."""
    ops = coeffs.ops
    t_prev, t_last = float(times[-2]), float(times[-1])
    src_q = [coeffs.at(t).source_q for t in (t_prev, t_last)]
    src_s = [ops.gradient_part(coeffs.at(t).source_sigma) for t in (t_prev, t_last)]
    p_q = _closure_exponent((ops.l2(src_q[0]), ops.l2(src_q[1])), (t_prev, t_last))
    p_s = _closure_exponent((ops.l2(src_s[0]), ops.l2(src_s[1])), (t_prev, t_last))
    logger.debug(f"Terminal closure exponents: q {p_q:.3f}, sigma {p_s:.3f}")
    return -t_last * src_q[1] / (p_q - 1.0), -t_last * src_s[1] / (p_s - 1.0)


def gamma_map(
    traj_in: Trajectory,
    track: ProfileTrack,
    quad: TimeKernelQuadrature,
    settings: Optional[SolverSettings] = None,
    mode: Literal["infinity", "finite_t0"] = "infinity",
    t0_index: Optional[int] = None,
    data: Optional[AuxState] = None,
) -> Trajectory:
    """One application of Gamma.

    infinity: integrate backward from the last node with terminal data from
    the closure (or zero); finite_t0: integrate both ways from the node
    t0_index with the supplied (q, sigma). B_b' is t^-1 F_1(M_b) on the
    incoming iterate, or on the new (q', sigma') when settings.current_source
    is "image".
    """
    settings = settings or SolverSettings()
    if traj_in.n_nodes < 2:
        raise CoverageError("Gamma needs at least two nodes")
    coeffs = FrozenCoefficients(traj_in, track, quad, settings.workers)
    stepper = LinearizedStepper(coeffs, settings)
    times = traj_in.times
    shape = traj_in.grid.shape
    q_new = np.zeros((times.size,) + shape, dtype=np.complex128)
    sigma_new = np.zeros((times.size, 3) + shape)

    if mode == "infinity":
        start = times.size - 1
        if settings.terminal_closure:
            q_new[start], sigma_new[start] = terminal_data(coeffs, times)
        tail: TailMarker = "profile_closure" if settings.terminal_closure else "zero"
    else:
        if t0_index is None or data is None:
            raise ValueError("finite_t0 mode needs t0_index and data")
        start = t0_index
        q_new[start] = data.q.values
        sigma_new[start] = data.sigma.components
        tail = traj_in.tail

    for i in range(start, 0, -1):
        q_new[i - 1], sigma_new[i - 1] = stepper.advance(times[i], times[i - 1], q_new[i], sigma_new[i])
    stepper.h = None
    for i in range(start, times.size - 1):
        q_new[i + 1], sigma_new[i + 1] = stepper.advance(times[i], times[i + 1], q_new[i], sigma_new[i])
    if stepper.rejections:
        logger.debug(f"Gamma sweep: {stepper.accepted} sub-steps accepted, {stepper.rejections} rejected")

    b_a_new = assign_Ba(q_new, track, quad, settings.workers)
    if settings.current_source == "input":
        w, s, B = traj_in.amplitude(track), track.S + traj_in.sigma, coeffs.b_a_nodes + traj_in.b_b
    else:
        w, s, B = np.array([track.W(t) for t in times]) + q_new, track.S + sigma_new, b_a_new + traj_in.b_b
    b_b_new = assign_Bb(w, s, B, times, traj_in.grid, quad, settings.workers, closure=track.current_b_closure)
    return Trajectory(traj_in.grid, times, q_new, sigma_new, b_b_new, b_a_new, tail, traj_in.meta)


# weighted norms


def _k_norm(ops: SpectralOps, arr: np.ndarray, order: float) -> float:
    return max(ops.sobolev(arr, 1.0, homogeneous=True), ops.sobolev(arr, order, homogeneous=True))


def weighted_norms(traj: Trajectory, k: float = 2.0, alpha: float = 3.0, beta: float = 0.3) -> WeightedNorms:
    """Suprema over the nodes of the weighted solution norms."""
    if traj.n_nodes == 0:
        return WeightedNorms()
    if traj.T <= 1.0:
        raise CoverageError("weighted norms need every node above t = 1")
    ops = spectral_ops(traj.grid)
    sup = dict.fromkeys(("Y", "Y1", "Z0", "Z1", "Z2", "N"), 0.0)
    for i, t in enumerate(traj.times):
        lt = np.log(t)
        q = traj.q[i]
        sigma = traj.sigma[i]
        b_b = traj.b_b[i]
        q_size = max(ops.sobolev(q, k), ops.sobolev(ops.x * q[None], k))
        b_size = max(_k_norm(ops, b_b, k + 1.0), _k_norm(ops, np.sum(ops.x * b_b, axis=0), k + 1.0))
        current = {
            "Y": t / lt * q_size,
            "Y1": ops.sobolev(q, k + 1.0) / (lt / t + t ** (-alpha * beta)),
            "N": t / lt * b_size,
        }
        for j in range(3):
            current[f"Z{j}"] = ops.sobolev(sigma, k + j, homogeneous=True) / (lt / t * (lt + t ** (j * beta)))
        for key, value in current.items():
            sup[key] = max(sup[key], float(value))
    return WeightedNorms(**sup)


def _largest(norms: WeightedNorms) -> float:
    return max(norms.as_dict().values())


def trajectory_distance(a: Trajectory, b: Trajectory, state: AsymptoticState) -> Tuple[float, float]:
    """(weighted distance, distance relative to the weighted size of a)."""
    distance = _largest(weighted_norms(a.difference(b), state.k, state.alpha, state.beta))
    size = _largest(weighted_norms(a, state.k, state.alpha, state.beta))
    if distance == 0.0:
        return 0.0, 0.0
    return distance, distance / size if size > 0 else np.inf


# fixed-point drivers


def _iterate(
    state: AsymptoticState,
    track: ProfileTrack,
    quad: TimeKernelQuadrature,
    settings: SolverSettings,
    gamma: Callable[[Trajectory], Trajectory],
    start: Trajectory,
    progress_callback: Optional[ProgressCallback],
) -> Tuple[Trajectory, List[IterationReport]]:
    reports: List[IterationReport] = []
    ratios: List[float] = []
    current = start
    previous_distance: Optional[float] = None
    expanding = 0
    for n in range(1, settings.max_iters + 1):
        image = gamma(current)
        nxt = current.blended(image, settings.under_relaxation)
        distance, relative = trajectory_distance(nxt, current, state)
        ratio = None if previous_distance in (None, 0.0) else distance / previous_distance
        report = IterationReport(
            iterate_index=n,
            weighted_norms=weighted_norms(nxt, state.k, state.alpha, state.beta),
            distance=distance,
            relative_distance=relative,
            contraction_ratio=ratio,
        )
        reports.append(report)
        ratio_text = "n/a" if ratio is None else f"{ratio:.3f}"
        logger.info(f"Gamma iterate {n}: distance {distance:.3e} (relative {relative:.3e}), ratio {ratio_text}")
        if progress_callback:
            progress_callback(n, settings.max_iters, f"Gamma iterate {n}: relative distance {relative:.2e}")
        current = nxt
        if relative < settings.tol:
            if current.b_a is None:
                current.b_a = assign_Ba(current.q, track, quad, settings.workers)
            return current, reports
        if ratio is not None:
            ratios.append(ratio)
            expanding = expanding + 1 if ratio >= 1.0 else 0
            if expanding >= NON_CONTRACTION_PATIENCE:
                raise NonContractionError(ratios)
        previous_distance = distance
    raise NonContractionError(
        ratios, f"no convergence to {settings.tol:.1e} within {settings.max_iters} iterates; increase T"
    )


def solve_at_infinity(
    state: AsymptoticState,
    time: TimeGridSpec,
    settings: Optional[SolverSettings] = None,
    quad: Optional[TimeKernelQuadrature] = None,
    variant: ProfileVariant = "full",
    track: Optional[ProfileTrack] = None,
    progress_callback: Optional[ProgressCallback] = None,
) -> Tuple[Trajectory, List[IterationReport]]:
    """Fixed point of Gamma with data at infinity, started from the zero trajectory."""
    settings = settings or SolverSettings()
    quad = quad or TimeKernelQuadrature()
    times = time.times
    if track is None:
        track = ProfileTrack(state, times, variant, quad, workers=settings.workers)
    logger.info(
        f"Solving at infinity on {times.size} nodes, t in [{times[0]:.4g}, {times[-1]:.4g}] "
        f"({time.decades:.2f} decades)"
    )
    if time.decades < 1.0 - 1e-9:
        logger.warning(f"Time window spans {time.decades:.2f} < 1 decade")
    start = Trajectory.zeros(state.grid, times, b_a=track.b_star.copy())
    start.meta = _meta(state, time)
    return _iterate(
        state, track, quad, settings, lambda traj: gamma_map(traj, track, quad, settings), start, progress_callback
    )


def solve_finite_t0(
    state: AsymptoticState,
    t0: float,
    data: AuxState,
    time: TimeGridSpec,
    settings: Optional[SolverSettings] = None,
    quad: Optional[TimeKernelQuadrature] = None,
    variant: ProfileVariant = "full",
    track: Optional[ProfileTrack] = None,
    progress_callback: Optional[ProgressCallback] = None,
) -> Trajectory:
    """Fixed point of Gamma with (q, sigma) pinned at the node nearest t0."""
    settings = settings or SolverSettings()
    quad = quad or TimeKernelQuadrature()
    times = time.times
    if not times[0] * (1 - 1e-12) <= t0 <= times[-1] * (1 + 1e-12):
        raise CoverageError(f"t0 = {t0:.6g} outside [{times[0]:.6g}, {times[-1]:.6g}]")
    index = int(np.argmin(np.abs(np.log(times / t0))))
    if not np.isclose(times[index], t0, rtol=1e-10):
        logger.warning(f"t0 = {t0:.6g} is not a node; using the nearest node {times[index]:.6g}")
    if track is None:
        track = ProfileTrack(state, times, variant, quad, workers=settings.workers)
    start = Trajectory.zeros(state.grid, times, b_a=track.b_star.copy(), tail="zero")
    start.meta = _meta(state, time)

    def gamma(traj: Trajectory) -> Trajectory:
        return gamma_map(traj, track, quad, settings, mode="finite_t0", t0_index=index, data=data)

    trajectory, _ = _iterate(state, track, quad, settings, gamma, start, progress_callback)
    return trajectory


def _meta(state: AsymptoticState, time: TimeGridSpec) -> Dict[str, float]:
    return {"rho": time.rho, "T": float(time.times[0]), "T_max": float(time.times[-1]), "beta": state.beta, "alpha": state.alpha}


# diagnostics


def fd_weights(nodes: np.ndarray, x0: float, order: int = 1) -> np.ndarray:
    """Finite-difference weights for the derivative of the given order at x0 (Fornberg)."""
    nodes = np.asarray(nodes, dtype=float)
    count = nodes.size
    if count <= order:
        raise StencilError(f"{count} nodes cannot resolve a derivative of order {order}")
    c = np.zeros((count, order + 1))
    c[0, 0] = 1.0
    c1 = 1.0
    c4 = nodes[0] - x0
    for i in range(1, count):
        mn = min(i, order)
        c2 = 1.0
        c5 = c4
        c4 = nodes[i] - x0
        for j in range(i):
            c3 = nodes[i] - nodes[j]
            c2 *= c3
            if j == i - 1:
                for m in range(mn, 0, -1):
                    c[i, m] = c1 * (m * c[i - 1, m - 1] - c5 * c[i - 1, m]) / c2
                c[i, 0] = -c1 * c5 * c[i - 1, 0] / c2
            for m in range(mn, 0, -1):
                c[j, m] = (c4 * c[j, m] - m * c[j, m - 1]) / c3
            c[j, 0] = c4 * c[j, 0] / c3
        c1 = c2
    return c[:, order]


def stencil_indices(n_nodes: int, index: int, width: int = 5) -> np.ndarray:
    """Indices of a width-point stencil around index, shifted inward at the ends."""
    if n_nodes < width:
        raise StencilError(f"{width}-point stencil needs {width} nodes, trajectory has {n_nodes}")
    lo = min(max(index - width // 2, 0), n_nodes - width)
    return np.arange(lo, lo + width)


def time_derivative(times: np.ndarray, samples: np.ndarray, index: int) -> np.ndarray:
    """Fourth-order derivative of node samples at times[index]."""
    idx = stencil_indices(times.size, index)
    weights = fd_weights(times[idx], times[index])
    return np.tensordot(weights, samples[idx], axes=1)


def aux_residuals(
    traj: Trajectory,
    track: ProfileTrack,
    quad: Optional[TimeKernelQuadrature] = None,
    workers: int = 1,
) -> Dict[str, List[float]]:
    """Relative residuals of the auxiliary system at the nodes.

    q and sigma: finite-difference time derivative against the right-hand side
    with coefficients taken from the trajectory itself. B_b: distance to
    t^-1 F_1(M_b) re-evaluated on the trajectory.
    """
    quad = quad or TimeKernelQuadrature()
    coeffs = FrozenCoefficients(traj, track, quad, workers)
    ops = coeffs.ops
    times = traj.times
    out: Dict[str, List[float]] = {"q": [], "sigma": [], "B_b": []}
    for i, t in enumerate(times):
        rhs_q = 0.5j / t ** 2 * ops.laplacian(traj.q[i]) + coeffs.q_rate(t, traj.q[i])
        rhs_s = coeffs.sigma_rate(t, traj.sigma[i])
        fd_q = time_derivative(times, traj.q, i)
        fd_s = time_derivative(times, traj.sigma, i)
        out["q"].append(_relative(ops, fd_q - rhs_q, rhs_q))
        out["sigma"].append(_relative(ops, fd_s - rhs_s, rhs_s))
    w = traj.amplitude(track)
    b_b = assign_Bb(
        w, track.S + traj.sigma, coeffs.b_a_nodes + traj.b_b, times, traj.grid, quad, workers, track.current_b_closure
    )
    out["B_b"] = [_relative(ops, traj.b_b[i] - b_b[i], b_b[i]) for i in range(times.size)]
    return out


def _relative(ops: SpectralOps, diff: np.ndarray, reference: np.ndarray) -> float:
    size = ops.l2(reference)
    gap = ops.l2(diff)
    if gap == 0.0:
        return 0.0
    return gap / size if size > 0 else float("inf")


def tmax_convergence_check(
    state: AsymptoticState,
    time: TimeGridSpec,
    settings: Optional[SolverSettings] = None,
    quad: Optional[TimeKernelQuadrature] = None,
    variant: ProfileVariant = "full",
    base: Optional[Trajectory] = None,
) -> Dict[str, Any]:
    """Re-solve with doubled T_max and measure the change on the original nodes."""
    settings = settings or SolverSettings()
    quad = quad or TimeKernelQuadrature()
    if base is None:
        base, _ = solve_at_infinity(state, time, settings, quad, variant)
    longer, _ = solve_at_infinity(state, time.doubled(), settings, quad, variant)
    n = base.n_nodes
    if not np.allclose(longer.times[:n], base.times, rtol=1e-12):
        raise CoverageError("doubled run does not contain the original nodes")
    overlap = Trajectory(base.grid, base.times, longer.q[:n], longer.sigma[:n], longer.b_b[:n])
    distance, relative = trajectory_distance(base, overlap, state)
    logger.info(f"T_max doubling moved the solution by {relative:.3e} (relative weighted distance)")
    return {
        "T_max": base.T_max,
        "T_max_doubled": longer.T_max,
        "distance": distance,
        "relative_change": relative,
        "threshold": 5.0 * settings.tol,
        "passed": bool(relative <= 5.0 * settings.tol),
    }
