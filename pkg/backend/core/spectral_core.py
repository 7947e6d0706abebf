"""
Periodic pseudospectral field algebra on the box [-L/2, L/2)^3.

Samples are stored in natural index order: index j on an axis sits at
x_j = -L/2 + j*L/n. Forward transforms are unnormalized, inverse transforms
carry 1/n^3, so Parseval reads sum|f|^2 dV = (dV/n^3) sum|f_hat|^2.
"""

import logging
from functools import lru_cache
from typing import Literal, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from backend.core.errors import DilationAliasingError, FieldValidationError

logger = logging.getLogger(__name__)

DIV_FREE_TOL = 1e-10
ALIASING_TOL = 1e-8

MdfmPiece = Literal["M", "D", "D0", "F", "Finv", "MDFM"]


class SpectralGrid(BaseModel):
    """Periodic box descriptor: resolution, period and wavenumber lattice."""

    model_config = ConfigDict(frozen=True)

    n_per_axis: int = Field(gt=1, description="Grid points per axis (power of two)")
    box_length: float = Field(gt=0, description="Period L of the box")

    @field_validator("n_per_axis")
    @classmethod
    def _power_of_two(cls, value: int) -> int:
        if value & (value - 1):
            raise ValueError(f"n_per_axis must be a power of two, got {value}")
        return value

    @property
    def spacing(self) -> float:
        return self.box_length / self.n_per_axis

    @property
    def cell_volume(self) -> float:
        return self.spacing ** 3

    @property
    def shape(self) -> Tuple[int, int, int]:
        return (self.n_per_axis,) * 3

    @property
    def axis_coordinates(self) -> np.ndarray:
        return _axis_coordinates(self.n_per_axis, self.box_length)

    @property
    def axis_wavenumbers(self) -> np.ndarray:
        return _axis_wavenumbers(self.n_per_axis, self.box_length)

    @property
    def coordinates(self) -> np.ndarray:
        """Centered coordinate chart, shape (3, n, n, n)."""
        return _coordinates(self.n_per_axis, self.box_length)

    @property
    def wavevectors(self) -> np.ndarray:
        """Wavevector lattice 2*pi*m/L, shape (3, n, n, n)."""
        return _wavevectors(self.n_per_axis, self.box_length)

    @property
    def k_squared(self) -> np.ndarray:
        return _k_squared(self.n_per_axis, self.box_length)

    @property
    def k_magnitude(self) -> np.ndarray:
        return np.sqrt(self.k_squared)

    @property
    def nyquist_radius(self) -> float:
        return np.pi * self.n_per_axis / self.box_length

    def compatible(self, other: "SpectralGrid") -> bool:
        """Two grids are compatible for binary ops iff n and L both match."""
        return self.n_per_axis == other.n_per_axis and bool(
            np.isclose(self.box_length, other.box_length, rtol=1e-12, atol=0.0)
        )

    def scaled(self, factor: float) -> "SpectralGrid":
        return SpectralGrid(n_per_axis=self.n_per_axis, box_length=self.box_length * abs(factor))

    def dual(self) -> "SpectralGrid":
        """Grid carrying the sampled Fourier transform: spacing 2*pi/L."""
        return SpectralGrid(
            n_per_axis=self.n_per_axis,
            box_length=2.0 * np.pi * self.n_per_axis / self.box_length,
        )


@lru_cache(maxsize=32)
def _axis_coordinates(n: int, length: float) -> np.ndarray:
    axis = -0.5 * length + np.arange(n) * (length / n)
    axis.setflags(write=False)
    return axis


@lru_cache(maxsize=32)
def _axis_wavenumbers(n: int, length: float) -> np.ndarray:
    k = 2.0 * np.pi * np.fft.fftfreq(n, d=length / n)
    k.setflags(write=False)
    return k


@lru_cache(maxsize=16)
def _coordinates(n: int, length: float) -> np.ndarray:
    axis = _axis_coordinates(n, length)
    coords = np.array(np.meshgrid(axis, axis, axis, indexing="ij"))
    coords.setflags(write=False)
    return coords


@lru_cache(maxsize=16)
def _wavevectors(n: int, length: float) -> np.ndarray:
    k = _axis_wavenumbers(n, length)
    kvec = np.array(np.meshgrid(k, k, k, indexing="ij"))
    kvec.setflags(write=False)
    return kvec


@lru_cache(maxsize=16)
def _k_squared(n: int, length: float) -> np.ndarray:
    k2 = np.sum(_wavevectors(n, length) ** 2, axis=0)
    k2.setflags(write=False)
    return k2


class ComplexScalarField(BaseModel):
    """Grid samples of a w-type quantity (u, w, q, W, phases)."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    grid: SpectralGrid
    values: np.ndarray = Field(description="Complex samples, shape (n, n, n)")

    @field_validator("values", mode="before")
    @classmethod
    def _as_complex(cls, value) -> np.ndarray:
        return np.asarray(value, dtype=np.complex128)

    @model_validator(mode="after")
    def _check_samples(self) -> "ComplexScalarField":
        if self.values.shape != self.grid.shape:
            raise FieldValidationError(
                f"values shape {self.values.shape} does not match grid {self.grid.shape}"
            )
        if not np.all(np.isfinite(self.values)):
            raise FieldValidationError("field contains non-finite samples")
        return self

    @classmethod
    def zeros(cls, grid: SpectralGrid) -> "ComplexScalarField":
        return cls(grid=grid, values=np.zeros(grid.shape, dtype=np.complex128))

    def with_values(self, values: np.ndarray) -> "ComplexScalarField":
        return ComplexScalarField(grid=self.grid, values=values)

    @property
    def real_part(self) -> np.ndarray:
        return self.values.real


class RealVectorField(BaseModel):
    """Grid samples of a B-type quantity (A, B, s, S, sigma, currents)."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    grid: SpectralGrid
    components: np.ndarray = Field(description="Real samples, shape (3, n, n, n)")
    div_free: bool = Field(False, description="Claim that the field is divergence free")

    @field_validator("components", mode="before")
    @classmethod
    def _as_real(cls, value) -> np.ndarray:
        arr = np.asarray(value)
        if np.iscomplexobj(arr):
            arr = arr.real
        return np.asarray(arr, dtype=np.float64)

    @model_validator(mode="after")
    def _check_samples(self) -> "RealVectorField":
        if self.components.shape != (3,) + self.grid.shape:
            raise FieldValidationError(
                f"components shape {self.components.shape} does not match grid {(3,) + self.grid.shape}"
            )
        if not np.all(np.isfinite(self.components)):
            raise FieldValidationError("vector field contains non-finite samples")
        if self.div_free:
            defect = spectral_ops(self.grid).divergence_defect(self.components)
            if defect > DIV_FREE_TOL:
                raise FieldValidationError(
                    f"div_free claimed but max|div v|/max|v| = {defect:.3e} exceeds {DIV_FREE_TOL:.0e}"
                )
        return self

    @classmethod
    def zeros(cls, grid: SpectralGrid, div_free: bool = False) -> "RealVectorField":
        return cls(grid=grid, components=np.zeros((3,) + grid.shape), div_free=div_free)


Field3 = Union[ComplexScalarField, RealVectorField]


class NormSpec(BaseModel):
    """Which norm to evaluate: H^k, homogeneous H^k, K^k = H^1 cap H^k, or L^r."""

    kind: Literal["H", "Hdot", "K", "L"] = Field(description="Norm family")
    order: float = Field(description="Sobolev order k, or Lebesgue exponent r (inf allowed)")
    galilei_time: Optional[float] = Field(
        None, description="If set, evaluate the Galilei variant <J(t)>^m via D*M*"
    )

    @model_validator(mode="after")
    def _check_order(self) -> "NormSpec":
        if self.kind == "L" and not self.order >= 1:
            raise ValueError(f"L^r needs r >= 1, got {self.order}")
        if self.galilei_time is not None and self.galilei_time == 0:
            raise ValueError("galilei_time must be nonzero")
        return self


class SpectralOps:
    """Fourier-multiplier operators bound to one grid, acting on raw sample arrays.

    Arrays carry the three spatial axes last; vector arrays have a leading
    component axis of length 3.
    """

    def __init__(self, grid: SpectralGrid):
        self.grid = grid
        # first derivatives drop the Nyquist wavenumber so real in gives real out
        k = np.array(grid.wavevectors)
        nyq = grid.n_per_axis // 2
        k[0, nyq, :, :] = 0.0
        k[1, :, nyq, :] = 0.0
        k[2, :, :, nyq] = 0.0
        self.k = k
        self.k2 = grid.k_squared
        self.kmag = np.sqrt(self.k2)
        self.x = grid.coordinates
        self.dv = grid.cell_volume
        k2_safe = self.k2.copy()
        k2_safe[0, 0, 0] = 1.0
        self._k2_safe = k2_safe
        kd2 = np.sum(k ** 2, axis=0)
        self._kd2_safe = np.where(kd2 > 0, kd2, 1.0)
        self._dilation_cache = {}

    # transforms

    @staticmethod
    def fft(arr: np.ndarray) -> np.ndarray:
        return np.fft.fftn(arr, axes=(-3, -2, -1))

    @staticmethod
    def ifft(arr_hat: np.ndarray) -> np.ndarray:
        return np.fft.ifftn(arr_hat, axes=(-3, -2, -1))

    def apply_multiplier(self, arr: np.ndarray, multiplier: np.ndarray) -> np.ndarray:
        out = self.ifft(self.fft(arr) * multiplier)
        return out.real if np.isrealobj(arr) and np.isrealobj(multiplier) else out

    # differential operators

    def gradient(self, arr: np.ndarray) -> np.ndarray:
        """Spectral gradient of a scalar array -> (3, n, n, n)."""
        arr_hat = self.fft(arr)
        grad = self.ifft(1j * self.k * arr_hat[None])
        return grad.real if np.isrealobj(arr) else grad

    def divergence(self, vec: np.ndarray) -> np.ndarray:
        div = self.ifft(np.sum(1j * self.k * self.fft(vec), axis=0))
        return div.real if np.isrealobj(vec) else div

    def curl(self, vec: np.ndarray) -> np.ndarray:
        v_hat = self.fft(vec)
        ik = 1j * self.k
        c_hat = np.array([
            ik[1] * v_hat[2] - ik[2] * v_hat[1],
            ik[2] * v_hat[0] - ik[0] * v_hat[2],
            ik[0] * v_hat[1] - ik[1] * v_hat[0],
        ])
        c = self.ifft(c_hat)
        return c.real if np.isrealobj(vec) else c

    def laplacian(self, arr: np.ndarray) -> np.ndarray:
        return self.apply_multiplier(arr, -self.k2)

    def omega_pow(self, arr: np.ndarray, s: float) -> np.ndarray:
        """|xi|^s multiplier; zero mode killed unless s == 0."""
        if s == 0:
            return arr.copy()
        mult = np.zeros_like(self.k2)
        nz = self.k2 > 0
        mult[nz] = self.kmag[nz] ** s
        return self.apply_multiplier(arr, mult)

    def inverse_laplacian(self, arr: np.ndarray) -> np.ndarray:
        mult = -1.0 / self._k2_safe
        mult[0, 0, 0] = 0.0
        return self.apply_multiplier(arr, mult)

    def leray(self, vec: np.ndarray) -> np.ndarray:
        """Projection 1 - xi xi^T/|xi|^2; the mean passes through."""
        v_hat = self.fft(vec)
        k_dot_v = np.sum(self.k * v_hat, axis=0)
        p_hat = v_hat - self.k * (k_dot_v / self._kd2_safe)[None]
        out = self.ifft(p_hat)
        return out.real if np.isrealobj(vec) else out

    def gradient_part(self, vec: np.ndarray) -> np.ndarray:
        """Complementary projection xi xi^T/|xi|^2 onto gradients; the mean is removed."""
        v_hat = self.fft(vec)
        k_dot_v = np.sum(self.k * v_hat, axis=0)
        q_hat = self.k * (k_dot_v / self._kd2_safe)[None]
        out = self.ifft(q_hat)
        return out.real if np.isrealobj(vec) else out

    def potential(self, vec: np.ndarray) -> np.ndarray:
        """Mean-zero scalar whose gradient is gradient_part(vec)."""
        k_dot_v = np.sum(self.k * self.fft(vec), axis=0)
        out = self.ifft(-1j * k_dot_v / self._kd2_safe)
        return out.real if np.isrealobj(vec) else out

    def free_propagator(self, arr: np.ndarray, t: float) -> np.ndarray:
        """U(t) = exp(i t Delta / 2)."""
        return self.ifft(self.fft(arr) * np.exp(-0.5j * t * self.k2))

    def split_short_long(self, arr: np.ndarray, radius: float) -> Tuple[np.ndarray, np.ndarray]:
        """Sharp cutoff: |xi| > radius goes to the short part."""
        arr_hat = self.fft(arr)
        short_mask = self.kmag > radius
        short = self.ifft(np.where(short_mask, arr_hat, 0.0))
        long = self.ifft(np.where(short_mask, 0.0, arr_hat))
        if np.isrealobj(arr):
            return short.real, long.real
        return short, long

    # dilations

    def _dilation_matrix(self, nu: float) -> np.ndarray:
        key = float(nu)
        mat = self._dilation_cache.get(key)
        if mat is None:
            n = self.grid.n_per_axis
            length = self.grid.box_length
            k = self.grid.axis_wavenumbers
            y = self.grid.axis_coordinates / nu + 0.5 * length
            mat = np.exp(1j * np.outer(y, k)) / n
            nyq = n // 2
            mat[:, nyq] = np.cos(k[nyq] * y) / n
            if len(self._dilation_cache) > 512:
                self._dilation_cache.clear()
            self._dilation_cache[key] = mat
        return mat

    def dilate(self, arr: np.ndarray, nu: float, aliasing_tol: float = ALIASING_TOL) -> np.ndarray:
        """D0(nu) f(x) = f(x/nu) via the trigonometric interpolant at x/nu.

        For nu < 1 the points x/nu leave the box; the mass that would wrap
        around is measured and the call rejected above aliasing_tol.
        """
        if nu <= 0:
            raise DilationAliasingError(f"dilation ratio must be positive, got {nu}")
        if nu == 1.0:
            return arr.copy()
        if nu < 1.0:
            self._check_wrap(arr, nu, aliasing_tol)
        mat = self._dilation_matrix(nu)
        out = self.fft(arr)
        for axis in (-3, -2, -1):
            out = np.moveaxis(np.tensordot(mat, out, axes=([1], [axis])), 0, axis)
        return out.real if np.isrealobj(arr) else out

    def _check_wrap(self, arr: np.ndarray, nu: float, tol: float) -> None:
        half = 0.5 * self.grid.box_length * nu
        inside = np.all(np.abs(self.x) < half, axis=0)
        density = np.abs(arr) ** 2
        if density.ndim == 4:
            density = density.sum(axis=0)
        total = density.sum()
        if total == 0:
            return
        outside = density[~inside].sum() / total
        if outside > tol:
            raise DilationAliasingError(
                f"D0({nu:.4g}) would alias {outside:.3e} of the mass (tolerance {tol:.0e})"
            )

    # norms

    def l2(self, arr: np.ndarray) -> float:
        return float(np.sqrt(np.sum(np.abs(arr) ** 2) * self.dv))

    def sobolev(self, arr: np.ndarray, order: float, homogeneous: bool = False) -> float:
        arr_hat = self.fft(arr)
        power = np.abs(arr_hat) ** 2
        if power.ndim == 4:
            power = power.sum(axis=0)
        if homogeneous:
            weight = np.zeros_like(self.k2)
            nz = self.k2 > 0
            weight[nz] = self.k2[nz] ** order
            if order == 0:
                weight[0, 0, 0] = 1.0
        else:
            weight = (1.0 + self.k2) ** order
        n3 = self.grid.n_per_axis ** 3
        return float(np.sqrt(np.sum(weight * power) * self.dv / n3))

    def lebesgue(self, arr: np.ndarray, r: float) -> float:
        mag = np.abs(arr)
        if mag.ndim == 4:
            mag = np.sqrt(np.sum(mag ** 2, axis=0))
        if np.isinf(r):
            return float(mag.max())
        return float((np.sum(mag ** r) * self.dv) ** (1.0 / r))

    def evaluate_norm(self, arr: np.ndarray, spec: NormSpec) -> float:
        if spec.kind == "H":
            return self.sobolev(arr, spec.order)
        if spec.kind == "Hdot":
            return self.sobolev(arr, spec.order, homogeneous=True)
        if spec.kind == "K":
            return max(
                self.sobolev(arr, 1.0, homogeneous=True),
                self.sobolev(arr, spec.order, homogeneous=True),
            )
        return self.lebesgue(arr, spec.order)

    # invariant checks

    def divergence_defect(self, vec: np.ndarray) -> float:
        scale = np.max(np.abs(vec))
        if scale == 0:
            return 0.0
        return float(np.max(np.abs(self.divergence(vec))) / scale)

    def curl_defect(self, vec: np.ndarray) -> float:
        scale = np.max(np.abs(vec))
        if scale == 0:
            return 0.0
        return float(np.max(np.abs(self.curl(vec))) / scale)


@lru_cache(maxsize=16)
def spectral_ops(grid: SpectralGrid) -> SpectralOps:
    """Shared operator bundle per grid."""
    return SpectralOps(grid)


def _require_finite(f: Field3) -> None:
    data = f.values if isinstance(f, ComplexScalarField) else f.components
    if not np.all(np.isfinite(data)):
        raise FieldValidationError("non-finite input field")


def _require_compatible(a: Field3, b: Field3) -> None:
    if not a.grid.compatible(b.grid):
        raise FieldValidationError(
            f"incompatible grids: (n={a.grid.n_per_axis}, L={a.grid.box_length}) vs "
            f"(n={b.grid.n_per_axis}, L={b.grid.box_length})"
        )


def omega_pow(f: ComplexScalarField, s: float) -> ComplexScalarField:
    """Multiply Fourier coefficients by |xi|^s (zero mode -> 0 for s != 0)."""
    _require_finite(f)
    return f.with_values(spectral_ops(f.grid).omega_pow(f.values, s))


def inverse_laplacian(f: ComplexScalarField) -> ComplexScalarField:
    _require_finite(f)
    return f.with_values(spectral_ops(f.grid).inverse_laplacian(f.values))


def leray_project(v: RealVectorField) -> RealVectorField:
    return RealVectorField(
        grid=v.grid,
        components=spectral_ops(v.grid).leray(v.components),
        div_free=True,
    )


def free_propagator(f: ComplexScalarField, t: float) -> ComplexScalarField:
    return f.with_values(spectral_ops(f.grid).free_propagator(f.values, t))


def dilate(f: Field3, nu: float, aliasing_tol: float = ALIASING_TOL) -> Field3:
    """Same-grid dilation D0(nu)."""
    ops = spectral_ops(f.grid)
    if isinstance(f, ComplexScalarField):
        return f.with_values(ops.dilate(f.values, nu, aliasing_tol))
    return RealVectorField(grid=f.grid, components=ops.dilate(f.components, nu, aliasing_tol))


def gradient(f: ComplexScalarField) -> RealVectorField:
    """Gradient of a real-valued scalar field (imaginary part discarded)."""
    return RealVectorField(grid=f.grid, components=spectral_ops(f.grid).gradient(f.values.real))


def unitary_fourier(f: ComplexScalarField) -> ComplexScalarField:
    """Continuous transform (2 pi)^{-3/2} int exp(-i xi.x) f dx sampled on the dual grid."""
    grid = f.grid
    n = grid.n_per_axis
    shifted = np.fft.fftshift(np.fft.fftn(f.values))
    sign = (-1.0) ** (np.arange(n) - n // 2)
    phase = sign[:, None, None] * sign[None, :, None] * sign[None, None, :]
    values = (2.0 * np.pi) ** -1.5 * grid.cell_volume * phase * shifted
    return ComplexScalarField(grid=grid.dual(), values=values)


def inverse_unitary_fourier(g: ComplexScalarField) -> ComplexScalarField:
    forward = unitary_fourier(g.with_values(np.conj(g.values)))
    return forward.with_values(np.conj(forward.values))


def _quadratic_phase(grid: SpectralGrid, t: float) -> np.ndarray:
    r2 = np.sum(grid.coordinates ** 2, axis=0)
    return np.exp(0.5j * r2 / t)


def _flip_axes(values: np.ndarray) -> np.ndarray:
    # x -> -x on the chart x_j = -L/2 + j dx maps index j to (n - j) mod n
    return np.roll(values[::-1, ::-1, ::-1], 1, axis=(0, 1, 2))


def _exact_dilation(f: ComplexScalarField, t: float) -> ComplexScalarField:
    """(D(t) f)(x) = (it)^{-3/2} f(x/t) on the scaled grid (n, |t| L)."""
    values = f.values if t > 0 else _flip_axes(f.values)
    prefactor = np.power(1j * t, -1.5)
    return ComplexScalarField(grid=f.grid.scaled(t), values=prefactor * values)


def mdfm_apply(f: ComplexScalarField, t: float, piece: MdfmPiece) -> ComplexScalarField:
    """Pieces of the factorization U(t) = M(t) D(t) F M(t).

    M and D0 stay on the input grid. D relabels samples onto (n, |t| L)
    exactly. MDFM returns its output on (n, 2 pi n |t| / L), which equals the
    input grid when L^2 = 2 pi n |t|.
    """
    _require_finite(f)
    if piece in ("M", "D", "MDFM") and t == 0:
        raise ValueError(f"piece {piece} needs t != 0")
    if piece == "M":
        return f.with_values(_quadratic_phase(f.grid, t) * f.values)
    if piece == "D":
        return _exact_dilation(f, t)
    if piece == "D0":
        return dilate(f, t)
    if piece == "F":
        return unitary_fourier(f)
    if piece == "Finv":
        return inverse_unitary_fourier(f)
    chirped = mdfm_apply(f, t, "M")
    transformed = unitary_fourier(chirped)
    dilated = _exact_dilation(transformed, t)
    return mdfm_apply(dilated, t, "M")


def pseudo_conformal_pullback(f: ComplexScalarField, t: float) -> ComplexScalarField:
    """D(t)* M(t)* f, returned on the grid (n, L/|t|)."""
    unchirped = f.with_values(np.conj(_quadratic_phase(f.grid, t)) * f.values)
    values = np.power(1j * t, 1.5) * unchirped.values
    if t < 0:
        values = _flip_axes(values)
    return ComplexScalarField(grid=f.grid.scaled(1.0 / t), values=values)


def norm(f: Field3, spec: NormSpec) -> float:
    """Parseval-based Sobolev norms, grid-quadrature L^r, and Galilei variants."""
    if spec.galilei_time is not None:
        if not isinstance(f, ComplexScalarField):
            raise ValueError("Galilei norms apply to complex scalar fields")
        pulled = pseudo_conformal_pullback(f, spec.galilei_time)
        inner = spec.model_copy(update={"galilei_time": None})
        return spectral_ops(pulled.grid).evaluate_norm(pulled.values, inner)
    data = f.values if isinstance(f, ComplexScalarField) else f.components
    return spectral_ops(f.grid).evaluate_norm(data, spec)
