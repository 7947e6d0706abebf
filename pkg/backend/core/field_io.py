import io
import struct
from pathlib import Path
from typing import BinaryIO, Union

import numpy as np

from backend.core.errors import FieldValidationError
from backend.core.spectral_core import ComplexScalarField, RealVectorField, SpectralGrid

MAGIC = b"MSSCATTER-FLD\x00\x00\x00"
HEADER = struct.Struct("<16sIdB")
KIND_COMPLEX = 0
KIND_VECTOR = 1

FieldLike = Union[ComplexScalarField, RealVectorField]


class FieldDump:
    """Read and write grid fields in the binary dump format.

    Layout (little-endian): 16-byte magic, u32 n, f64 L, u8 kind (0 complex
    scalar, 1 real 3-vector), then samples in row-major order with z fastest.
    Complex samples are (re, im) float64 pairs; vector samples are stored
    component by component.
    """

    @staticmethod
    def load_from_file(file_path: Union[str, Path]) -> FieldLike:
        """
        Load a field dump from a file path.

        Args:
            file_path: Path to the dump

        Returns:
            ComplexScalarField or RealVectorField

        Raises:
            FileNotFoundError: If the file doesn't exist
            FieldValidationError: If the header or payload is malformed
        """
        file_path = Path(file_path)

        if not file_path.exists():
            raise FileNotFoundError(f"File not found: {file_path}")

        with open(file_path, "rb") as handle:
            return FieldDump._read(handle, str(file_path))

    @staticmethod
    def load_from_bytes(payload: bytes) -> FieldLike:
        """Load a field dump from an in-memory buffer."""
        return FieldDump._read(io.BytesIO(payload), "<bytes>")

    @staticmethod
    def _read(handle: BinaryIO, source: str) -> FieldLike:
        header = handle.read(HEADER.size)
        if len(header) != HEADER.size:
            raise FieldValidationError(f"{source}: truncated header")
        magic, n, length, kind = HEADER.unpack(header)
        if magic != MAGIC:
            raise FieldValidationError(f"{source}: not a field dump (bad magic)")
        try:
            grid = SpectralGrid(n_per_axis=n, box_length=length)
        except ValueError as e:
            raise FieldValidationError(f"{source}: invalid grid in header: {e}")

        if kind == KIND_COMPLEX:
            count, dtype, shape = n ** 3, np.dtype("<c16"), grid.shape
        elif kind == KIND_VECTOR:
            count, dtype, shape = 3 * n ** 3, np.dtype("<f8"), (3,) + grid.shape
        else:
            raise FieldValidationError(f"{source}: unknown field kind {kind}")

        payload = handle.read(count * dtype.itemsize)
        if len(payload) != count * dtype.itemsize:
            raise FieldValidationError(
                f"{source}: expected {count * dtype.itemsize} payload bytes, found {len(payload)}"
            )
        data = np.frombuffer(payload, dtype=dtype).reshape(shape).copy()
        if kind == KIND_COMPLEX:
            return ComplexScalarField(grid=grid, values=data)
        return RealVectorField(grid=grid, components=data)

    @staticmethod
    def to_bytes(field: FieldLike) -> bytes:
        grid = field.grid
        if isinstance(field, ComplexScalarField):
            kind, data = KIND_COMPLEX, field.values.astype("<c16")
        else:
            kind, data = KIND_VECTOR, field.components.astype("<f8")
        header = HEADER.pack(MAGIC, grid.n_per_axis, grid.box_length, kind)
        return header + np.ascontiguousarray(data).tobytes()

    @staticmethod
    def save_to_file(field: FieldLike, file_path: Union[str, Path]) -> Path:
        file_path = Path(file_path)
        file_path.parent.mkdir(parents=True, exist_ok=True)
        with open(file_path, "wb") as handle:
            handle.write(FieldDump.to_bytes(field))
        return file_path

    @staticmethod
    def get_field_stats(field: FieldLike) -> dict:
        """Summary numbers recorded next to every dump."""
        data = field.values if isinstance(field, ComplexScalarField) else field.components
        magnitude = np.abs(data)
        return {
            "n_per_axis": field.grid.n_per_axis,
            "box_length": field.grid.box_length,
            "kind": "complex_scalar" if isinstance(field, ComplexScalarField) else "real_vector",
            "max_abs": float(magnitude.max()),
            "l2_norm": float(np.sqrt(np.sum(magnitude ** 2) * field.grid.cell_volume)),
        }


def read_field(file_path: Union[str, Path]) -> FieldLike:
    return FieldDump.load_from_file(file_path)


def write_field(field: FieldLike, file_path: Union[str, Path]) -> Path:
    return FieldDump.save_to_file(field, file_path)
