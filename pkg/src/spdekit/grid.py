"""Grid geometry, field containers, index ordering, and field file I/O.

The single index-ordering contract lives here: trajectories are flattened
t-major, then y, then x (x fastest). Every other module goes through
``flatten_index``/``unflatten_index`` or the reshape helpers below instead
of doing its own arithmetic.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import (BadMagic, DimensionMismatch, UnsupportedDtype,
                     UnsupportedVersion)

_MAGIC = b"STGF"
_VERSION = 1
_DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODE_FOR_DTYPE = {np.dtype("<f4"): 1, np.dtype("<f8"): 2}


@dataclass(frozen=True)
class SpaceTimeGrid:
    """Regular space-time grid: nx*ny cells per slab, nt slabs.

    Steps are dimensionless (unit grid by default); physical units are the
    caller's concern.
    """

    nx: int
    ny: int
    nt: int
    dx: float = 1.0
    dy: float = 1.0
    dt: float = 1.0

    def __post_init__(self):
        if self.nx < 3 or self.ny < 3:
            raise ValueError(
                f"nx and ny must be >= 3 for the spatial stencils, "
                f"got nx={self.nx}, ny={self.ny}")
        if self.nt < 2:
            raise ValueError(f"nt must be >= 2, got nt={self.nt}")
        if not (self.dx > 0 and self.dy > 0 and self.dt > 0):
            raise ValueError("grid steps dx, dy, dt must be positive")

    @property
    def m(self) -> int:
        """State dimension per time step."""
        return self.nx * self.ny

    @property
    def dim(self) -> int:
        """Full trajectory dimension nt * m."""
        return self.nt * self.m

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.nt, self.ny, self.nx)


def flatten_index(t: int, y: int, x: int, grid: SpaceTimeGrid) -> int:
    """Linear index of cell (t, y, x): t*ny*nx + y*nx + x."""
    if not 0 <= t < grid.nt:
        raise IndexError(f"t axis out of range: {t} not in [0, {grid.nt})")
    if not 0 <= y < grid.ny:
        raise IndexError(f"y axis out of range: {y} not in [0, {grid.ny})")
    if not 0 <= x < grid.nx:
        raise IndexError(f"x axis out of range: {x} not in [0, {grid.nx})")
    return (t * grid.ny + y) * grid.nx + x


def unflatten_index(k: int, grid: SpaceTimeGrid) -> tuple[int, int, int]:
    """Inverse of flatten_index."""
    if not 0 <= k < grid.dim:
        raise IndexError(f"linear index out of range: {k} not in [0, {grid.dim})")
    t, rem = divmod(k, grid.m)
    y, x = divmod(rem, grid.nx)
    return t, y, x


def _check_finite(values: np.ndarray, what: str):
    if not np.all(np.isfinite(values)):
        raise ValueError(f"{what} contains non-finite values")


class Field:
    """Values on a space-time grid: (nt, ny, nx), or (ny, nx) for one slab."""

    def __init__(self, grid: SpaceTimeGrid, values):
        values = np.asarray(values, dtype=np.float64)
        if values.shape == (grid.ny, grid.nx):
            pass
        elif values.shape == (grid.nt, grid.ny, grid.nx):
            pass
        else:
            raise ValueError(
                f"field shape {values.shape} matches neither "
                f"{(grid.ny, grid.nx)} nor {(grid.nt, grid.ny, grid.nx)}")
        _check_finite(values, "field")
        self.grid = grid
        self.values = values

    @property
    def is_single_slab(self) -> bool:
        return self.values.ndim == 2

    def slab(self, t: int) -> np.ndarray:
        """The (ny, nx) slab at time t (the single slab if 2-D)."""
        return self.values if self.is_single_slab else self.values[t]

    def __eq__(self, other):
        return (isinstance(other, Field) and self.grid == other.grid
                and np.array_equal(self.values, other.values))


class Trajectory:
    """A state sequence as an (nt, m) array in flattened cell ordering."""

    def __init__(self, grid: SpaceTimeGrid, states):
        states = np.asarray(states, dtype=np.float64)
        if states.shape != (grid.nt, grid.m):
            raise ValueError(
                f"trajectory shape {states.shape} != {(grid.nt, grid.m)}")
        _check_finite(states, "trajectory")
        self.grid = grid
        self.states = states

    @classmethod
    def zeros(cls, grid: SpaceTimeGrid) -> "Trajectory":
        return cls(grid, np.zeros((grid.nt, grid.m)))

    @classmethod
    def from_flat(cls, grid: SpaceTimeGrid, flat) -> "Trajectory":
        return cls(grid, np.asarray(flat).reshape(grid.nt, grid.m))

    @classmethod
    def from_field(cls, field: Field) -> "Trajectory":
        if field.is_single_slab:
            raise ValueError("single-slab field is not a trajectory")
        g = field.grid
        return cls(g, field.values.reshape(g.nt, g.m))

    def to_field(self) -> Field:
        g = self.grid
        return Field(g, self.states.reshape(g.nt, g.ny, g.nx))

    @property
    def flat(self) -> np.ndarray:
        """The (nt*m,) view in the global flattened ordering."""
        return self.states.reshape(-1)

    def copy(self) -> "Trajectory":
        return Trajectory(self.grid, self.states.copy())


# --- STGF binary field format ----------------------------------------------
#
# bytes 0-3  ASCII "STGF"
# byte  4    version (1)
# byte  5    dtype code (1 = f32 LE, 2 = f64 LE)
# bytes 6-7  rank as u16 LE
# then rank x u32 LE dims, slowest-varying first
# then the payload, row-major, last dim fastest, no padding

def write_array(values: np.ndarray, path) -> None:
    """Write a raw array in STGF layout (any rank)."""
    values = np.asarray(values)
    dtype = np.dtype("<f4") if values.dtype == np.float32 else np.dtype("<f8")
    code = _CODE_FOR_DTYPE[dtype]
    payload = np.ascontiguousarray(values, dtype=dtype)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<BBH", _VERSION, code, values.ndim))
        fh.write(struct.pack(f"<{values.ndim}I", *values.shape))
        fh.write(payload.tobytes())


def read_array(path) -> np.ndarray:
    """Read an STGF file into an array with its native dtype."""
    with open(path, "rb") as fh:
        head = fh.read(8)
        if len(head) < 8 or head[:4] != _MAGIC:
            raise BadMagic(f"{path}: bad magic {head[:4]!r}")
        version, code, rank = struct.unpack("<BBH", head[4:8])
        if version != _VERSION:
            raise UnsupportedVersion(f"{path}: version {version}")
        if code not in _DTYPE_CODES:
            raise UnsupportedDtype(f"{path}: dtype code {code}")
        dims_raw = fh.read(4 * rank)
        if len(dims_raw) != 4 * rank:
            raise DimensionMismatch(f"{path}: truncated header")
        dims = struct.unpack(f"<{rank}I", dims_raw)
        dtype = _DTYPE_CODES[code]
        payload = fh.read()
    expected = int(np.prod(dims)) * dtype.itemsize
    if len(payload) != expected:
        raise DimensionMismatch(
            f"{path}: payload is {len(payload)} bytes, header dims {dims} "
            f"require {expected}")
    return np.frombuffer(payload, dtype=dtype).reshape(dims)


def write_field(field: Field, path) -> None:
    write_array(field.values, path)


def read_field(path, grid: SpaceTimeGrid | None = None) -> Field:
    """Read a rank-2 or rank-3 STGF file as a Field.

    If no grid is given, a unit-step grid is synthesized from the header
    dims (rank-2 files get a minimal nt=2 grid). If a grid is given the
    dims must match it.
    """
    values = read_array(path).astype(np.float64)
    if values.ndim == 3:
        nt, ny, nx = values.shape
        if grid is None:
            grid = SpaceTimeGrid(nx=nx, ny=ny, nt=nt)
        elif (nt, ny, nx) != grid.shape:
            raise DimensionMismatch(
                f"{path}: dims {values.shape} != grid {grid.shape}")
    elif values.ndim == 2:
        ny, nx = values.shape
        if grid is None:
            grid = SpaceTimeGrid(nx=nx, ny=ny, nt=2)
        elif (ny, nx) != (grid.ny, grid.nx):
            raise DimensionMismatch(
                f"{path}: dims {values.shape} != grid slab "
                f"{(grid.ny, grid.nx)}")
    else:
        raise DimensionMismatch(f"{path}: rank {values.ndim} is not a field")
    return Field(grid, values)
