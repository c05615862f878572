"""Space-time grid, staggered index sets and the flat block-vector layout.

Arrays are stored time-major with ``x`` varying fastest::

    p   : (nt + 1, ny, nx)      cell centers, levels 0..nt
    mx  : (nt, ny, nx - 1)      interior x-faces, levels 1..nt
    my  : (nt, ny - 1, nx)      interior y-faces, levels 1..nt
    phi : (nt, ny, nx)          cell centers, levels 1..nt

so a C-order ``ravel`` reproduces the block ordering ``[P_0, ..., P_nt]``
with each block listing ``(1,1), (2,1), ..., (nx,1), (1,2), ...``.
Boundary faces are not stored; the no-flux condition pins them to zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ConfigurationError(ValueError):
    """Invalid user-facing configuration (sizes, extents, parameters)."""


FIELD_KINDS = ("p", "mx", "my", "phi")


@dataclass(frozen=True)
class GridSpec:
    nx: int
    ny: int
    nt: int
    x_lo: float = 0.0
    x_hi: float = 1.0
    y_lo: float = 0.0
    y_hi: float = 1.0
    t_final: float = 1.0

    def __post_init__(self):
        for name in ("nx", "ny", "nt"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise ConfigurationError(f"{name} must be a positive integer, got {v!r}")
        if not self.x_hi > self.x_lo:
            raise ConfigurationError(f"x extent inverted: [{self.x_lo}, {self.x_hi}]")
        if not self.y_hi > self.y_lo:
            raise ConfigurationError(f"y extent inverted: [{self.y_lo}, {self.y_hi}]")
        if not self.t_final > 0:
            raise ConfigurationError(f"t_final must be positive, got {self.t_final}")

    @property
    def dx(self) -> float:
        return (self.x_hi - self.x_lo) / self.nx

    @property
    def dy(self) -> float:
        return (self.y_hi - self.y_lo) / self.ny

    @property
    def dt(self) -> float:
        return self.t_final / self.nt

    @property
    def cell_volume(self) -> float:
        """Space-time volume element dx * dy * dt."""
        return self.dx * self.dy * self.dt

    @property
    def is_1d(self) -> bool:
        return self.ny == 1

    @property
    def x_centers(self) -> np.ndarray:
        return self.x_lo + (np.arange(1, self.nx + 1) - 0.5) * self.dx

    @property
    def y_centers(self) -> np.ndarray:
        return self.y_lo + (np.arange(1, self.ny + 1) - 0.5) * self.dy

    @property
    def x_faces(self) -> np.ndarray:
        """All x-face coordinates ``x_{i+1/2}``, i = 0..nx."""
        return self.x_lo + np.arange(self.nx + 1) * self.dx

    @property
    def y_faces(self) -> np.ndarray:
        return self.y_lo + np.arange(self.ny + 1) * self.dy

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.nt + 1) * self.dt

    def mesh(self) -> tuple[np.ndarray, np.ndarray]:
        """Cell-center coordinates as ``(X, Y)`` arrays of shape (ny, nx)."""
        return np.meshgrid(self.x_centers, self.y_centers, indexing="xy")

    def shape(self, kind: str) -> tuple[int, int, int]:
        nx, ny, nt = self.nx, self.ny, self.nt
        shapes = {
            "p": (nt + 1, ny, nx),
            "mx": (nt, ny, nx - 1),
            "my": (nt, ny - 1, nx),
            "phi": (nt, ny, nx),
        }
        try:
            return shapes[kind]
        except KeyError:
            raise ValueError(f"unknown field kind {kind!r}") from None

    def size(self, kind: str) -> int:
        return int(np.prod(self.shape(kind)))

    @property
    def n_unknowns(self) -> int:
        """Length of the primal block vector ``U = [P, Mx, My]``."""
        return self.size("p") + self.size("mx") + self.size("my")


def build_grid(nx, ny, nt, extents=((0.0, 1.0), (0.0, 1.0)), t_final=1.0) -> GridSpec:
    """Build a grid from cell counts and ``((x_lo, x_hi), (y_lo, y_hi))``."""
    (x_lo, x_hi), (y_lo, y_hi) = extents
    return GridSpec(nx, ny, nt, float(x_lo), float(x_hi), float(y_lo), float(y_hi), float(t_final))


def _index_ranges(grid: GridSpec, kind: str):
    # 1-based spatial indices; for faces, i labels the face i+1/2 (resp. j+1/2)
    nx, ny, nt = grid.nx, grid.ny, grid.nt
    return {
        "p": ((1, nx), (1, ny), (0, nt)),
        "mx": ((1, nx - 1), (1, ny), (1, nt)),
        "my": ((1, nx), (1, ny - 1), (1, nt)),
        "phi": ((1, nx), (1, ny), (1, nt)),
    }[kind]


def index(grid: GridSpec, kind: str, i: int, j: int, n: int) -> int:
    """Flat offset of entry ``(i, j, n)`` within one field.

    ``i``, ``j`` are 1-based cell indices. For ``mx`` the pair ``(i, j)``
    names the face ``(i + 1/2, j)``; for ``my`` the face ``(i, j + 1/2)``.
    """
    if kind not in FIELD_KINDS:
        raise ValueError(f"unknown field kind {kind!r}")
    (ilo, ihi), (jlo, jhi), (nlo, nhi) = _index_ranges(grid, kind)
    if not (ilo <= i <= ihi and jlo <= j <= jhi and nlo <= n <= nhi):
        raise IndexError(f"{kind} index ({i}, {j}, {n}) out of range")
    _, rows, cols = grid.shape(kind)
    return ((n - nlo) * rows + (j - jlo)) * cols + (i - ilo)


def unindex(grid: GridSpec, kind: str, offset: int) -> tuple[int, int, int]:
    """Inverse of :func:`index`."""
    if not 0 <= offset < grid.size(kind):
        raise IndexError(f"{kind} offset {offset} out of range")
    (ilo, _), (jlo, _), (nlo, _) = _index_ranges(grid, kind)
    n, j, i = np.unravel_index(offset, grid.shape(kind))
    return int(i) + ilo, int(j) + jlo, int(n) + nlo


@dataclass
class FieldSet:
    """Discrete unknowns of the saddle problem on a given grid."""

    grid: GridSpec
    p: np.ndarray
    mx: np.ndarray
    my: np.ndarray
    phi: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.phi is None:
            self.phi = np.zeros(self.grid.shape("phi"))
        for kind in FIELD_KINDS:
            arr = np.asarray(getattr(self, kind), dtype=float)
            expected = self.grid.shape(kind)
            if arr.size != int(np.prod(expected)):
                raise ValueError(f"{kind} has {arr.size} entries, expected shape {expected}")
            setattr(self, kind, arr.reshape(expected))

    @classmethod
    def zeros(cls, grid: GridSpec) -> "FieldSet":
        return cls(grid, *(np.zeros(grid.shape(k)) for k in FIELD_KINDS))

    def primal_vector(self) -> np.ndarray:
        """``U = [P, Mx, My]`` as one flat vector."""
        return np.concatenate([self.p.ravel(), self.mx.ravel(), self.my.ravel()])

    def copy(self) -> "FieldSet":
        return FieldSet(self.grid, self.p.copy(), self.mx.copy(), self.my.copy(), self.phi.copy())


def split_primal(grid: GridSpec, u: np.ndarray):
    """Split a flat ``U`` vector into shaped ``(p, mx, my)`` views."""
    u = np.asarray(u, dtype=float)
    if u.size != grid.n_unknowns:
        raise ValueError(f"U has {u.size} entries, expected {grid.n_unknowns}")
    a = grid.size("p")
    b = a + grid.size("mx")
    return (
        u[:a].reshape(grid.shape("p")),
        u[a:b].reshape(grid.shape("mx")),
        u[b:].reshape(grid.shape("my")),
    )


def l2_norm(grid: GridSpec, values: np.ndarray) -> float:
    """Discrete L2 norm with the space-time volume weight."""
    return float(np.sqrt(grid.cell_volume * np.sum(np.square(values))))
