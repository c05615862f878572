"""Problem library: endpoint densities, preference fields and reference solutions.

Density fields are cell-centered arrays of shape (ny, nx). Image arrays use
the usual raster convention (row 0 at the top), so they are flipped to the
ascending-``y`` storage order on the way in.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from fracot.energy import DENSITY_FLOOR, InteractionSpec, NO_INTERACTION
from fracot.grid import ConfigurationError, GridSpec, build_grid


def cell_mass(rho, grid: GridSpec) -> float:
    return float(np.sum(rho) * grid.dx * grid.dy)


@dataclass
class ProblemSpec:
    grid: GridSpec
    alpha: float
    rho0: np.ndarray
    rho1: np.ndarray
    interaction: InteractionSpec = field(default_factory=lambda: NO_INTERACTION)
    name: str = "custom"

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ConfigurationError(f"alpha must lie in (0, 1], got {self.alpha}")
        shape = (self.grid.ny, self.grid.nx)
        self.rho0 = np.asarray(self.rho0, dtype=float).reshape(shape)
        self.rho1 = np.asarray(self.rho1, dtype=float).reshape(shape)
        for name in ("rho0", "rho1"):
            if np.min(getattr(self, name)) < DENSITY_FLOOR * (1 - 1e-12):
                raise ConfigurationError(f"{name} drops below the density floor {DENSITY_FLOOR}")
        m0, m1 = cell_mass(self.rho0, self.grid), cell_mass(self.rho1, self.grid)
        if abs(m0 - m1) > 1e-12 * m0:
            raise ConfigurationError(f"endpoint masses differ: {m0!r} vs {m1!r}; balance them first")
        q = self.interaction.Q
        if q is not None and np.shape(q) != shape:
            raise ConfigurationError(f"Q has shape {np.shape(q)}, expected {shape}")

    def reversed(self) -> "ProblemSpec":
        """Same problem with initial and terminal densities swapped."""
        return ProblemSpec(self.grid, self.alpha, self.rho1.copy(), self.rho0.copy(), self.interaction, self.name + "_reversed")

    def with_alpha(self, alpha: float) -> "ProblemSpec":
        return ProblemSpec(self.grid, alpha, self.rho0, self.rho1, self.interaction, self.name)


# -- samplers ---------------------------------------------------------------


def affine_density(grid: GridSpec) -> np.ndarray:
    """``rho(x) = x + 1/2`` at cell centers, constant in ``y``."""
    x, _ = grid.mesh()
    return x + 0.5


def uniform_density(grid: GridSpec) -> np.ndarray:
    area = (grid.x_hi - grid.x_lo) * (grid.y_hi - grid.y_lo)
    return np.full((grid.ny, grid.nx), 1.0 / area)


def normalize(rho, grid: GridSpec, floor: float = DENSITY_FLOOR) -> np.ndarray:
    """Floor then rescale to unit mass."""
    rho = np.maximum(np.asarray(rho, dtype=float), floor)
    return rho / cell_mass(rho, grid)


def gaussian_density(grid: GridSpec, mean, stddev: float) -> np.ndarray:
    """Gaussian bump sampled at cell centers, floored and normalized.

    ``mean`` is a scalar on 1-D grids (``ny == 1``) or an ``(x, y)`` pair.
    """
    if not stddev > 0:
        raise ConfigurationError(f"stddev must be positive, got {stddev}")
    x, y = grid.mesh()
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    r2 = (x - mean[0]) ** 2
    if grid.ny > 1:
        if mean.size != 2:
            raise ConfigurationError("2-D grids need a two-component mean")
        r2 = r2 + (y - mean[1]) ** 2
    return normalize(np.exp(-0.5 * r2 / stddev**2), grid)


def read_pgm(path) -> np.ndarray:
    """Read an 8-bit grayscale PGM (``P2`` or ``P5``) into a uint8 array."""
    data = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    # header: magic, width, height, maxval, with '#' comments allowed
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ConfigurationError(f"{path}: truncated PGM header")
        tokens.append(data[start:pos])
    magic = tokens[0]
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise ConfigurationError(f"{path}: malformed PGM header") from None
    if magic not in (b"P2", b"P5"):
        raise ConfigurationError(f"{path}: unsupported PGM magic {magic!r}")
    if not 0 < maxval <= 255:
        raise ConfigurationError(f"{path}: maxval {maxval} not in 1..255")
    if magic == b"P5":
        pos += 1  # single whitespace byte before the raster
        raster = np.frombuffer(data, dtype=np.uint8, count=width * height, offset=pos)
    else:
        raster = np.array(data[pos:].split()[: width * height], dtype=np.int64)
        if raster.size != width * height:
            raise ConfigurationError(f"{path}: expected {width * height} samples, got {raster.size}")
        if raster.min(initial=0) < 0 or raster.max(initial=0) > maxval:
            raise ConfigurationError(f"{path}: sample outside 0..{maxval}")
    img = raster.reshape(height, width).astype(np.uint8)
    if maxval != 255:
        img = np.round(img.astype(float) * 255.0 / maxval).astype(np.uint8)
    return img


def write_pgm(path, img, comment: str | None = None, binary: bool = True) -> None:
    """Write a uint8 array as PGM; row 0 is the top raster line."""
    img = np.asarray(img, dtype=np.uint8)
    height, width = img.shape
    header = b"P5\n" if binary else b"P2\n"
    if comment:
        for line in comment.splitlines():
            header += b"# " + line.encode("ascii", "replace") + b"\n"
    header += f"{width} {height}\n255\n".encode()
    if binary:
        body = img.tobytes()
    else:
        body = "\n".join(" ".join(str(v) for v in row) for row in img).encode() + b"\n"
    Path(path).write_bytes(header + body)


def image_density(pixels, grid: GridSpec, invert: bool = False) -> np.ndarray:
    """Map grayscale pixel rows to a normalized density (bright = dense)."""
    img = np.asarray(pixels, dtype=float)
    if img.shape != (grid.ny, grid.nx):
        raise ConfigurationError(f"image is {img.shape[1]}x{img.shape[0]}, grid is {grid.nx}x{grid.ny}")
    vals = img[::-1] / 255.0
    if invert:
        vals = 1.0 - vals
    return normalize(vals, grid)


def image_penalty(pixels0, pixels1, invert: bool = False) -> np.ndarray:
    """Preference field: 0 where either image carries mass, 1 elsewhere."""
    a = np.asarray(pixels0, dtype=float)[::-1]
    b = np.asarray(pixels1, dtype=float)[::-1]
    if invert:
        a, b = 255.0 - a, 255.0 - b
    return np.where((a != 0) | (b != 0), 0.0, 1.0)


def obstacle_field(grid: GridSpec, region: Callable[[np.ndarray, np.ndarray], np.ndarray]) -> np.ndarray:
    """Indicator of ``region(x, y)`` evaluated at cell centers."""
    x, y = grid.mesh()
    return np.asarray(region(x, y), dtype=bool).astype(float)


def balance_masses(rho0, rho1, grid: GridSpec) -> np.ndarray:
    """Rescale ``rho1`` to carry exactly the mass of ``rho0``."""
    m0, m1 = cell_mass(rho0, grid), cell_mass(rho1, grid)
    if not (m0 > 0 and m1 > 0):
        raise ConfigurationError("densities must have positive mass")
    return np.asarray(rho1, dtype=float) * (m0 / m1)


# -- exact integer-order solution -------------------------------------------


def exact_integer_ot(x, t):
    """Exact density and flux of the 1-D integer-order OT from ``x + 1/2`` to 1.

    Evaluated along the straight-line characteristics ``x = x0 + t v(x0)``
    with ``v(x0) = (x0**2 - x0) / 2``. Algebraically this equals the usual
    closed form ``rho = (s + t - 1) / (t s)``, ``s = sqrt(2 t x + (t/2 - 1)**2)``,
    but it avoids the ``1/t**3`` cancellation of that form for small ``t``.
    """
    x = np.asarray(x, dtype=float)
    t = np.asarray(t, dtype=float)
    x, t = np.broadcast_arrays(x, t)
    a = 1.0 - 0.5 * t
    s = np.sqrt(a**2 + 2.0 * t * x)
    x0 = 2.0 * x / (a + s)
    rho = (x0 + 0.5) / (1.0 + t * (x0 - 0.5))
    m = rho * 0.5 * x0 * (x0 - 1.0)
    if rho.ndim == 0:
        return float(rho), float(m)
    return rho, m


def _exact_integer_ot_closed_form(x, t):
    """Direct transcription of the closed form; valid for ``t > 0``."""
    x, t = np.broadcast_arrays(np.asarray(x, dtype=float), np.asarray(t, dtype=float))
    s = np.sqrt(2.0 * t * x + (t / 2.0 - 1.0) ** 2)
    rho = (s + t - 1.0) / (t * s)
    m = (
        x / t**2
        - (3.0 - t) / (2.0 * t**3) * s
        - (t - 1.0) * (t**2 - 4.0) / (8.0 * t**3) / s
        - (3.0 * t - 4.0) / (2.0 * t**3)
    )
    return rho, m


# -- presets ----------------------------------------------------------------

GATE_HALF_WIDTH = 0.05
GATE_OPENING = (0.05, 0.25)


def gate_region(x, y):
    """Horizontal wall ``|y| <= 0.05`` with an opening for ``0.05 <= x <= 0.25``."""
    wall = np.abs(y) <= GATE_HALF_WIDTH
    opening = (x >= GATE_OPENING[0]) & (x <= GATE_OPENING[1])
    return wall & ~opening


def affine_problem(n: int, alpha: float = 1.0) -> ProblemSpec:
    """1-D transport from ``x + 1/2`` to the uniform density on ``n x n`` space-time cells."""
    grid = build_grid(n, 1, n)
    return ProblemSpec(grid, alpha, affine_density(grid), np.ones((1, n)), name="affine")


def gaussian_1d_problem(n: int, alpha: float, means=(0.3, 0.7), stddev=0.1) -> ProblemSpec:
    grid = build_grid(n, 1, n)
    rho0 = gaussian_density(grid, means[0], stddev)
    rho1 = balance_masses(rho0, gaussian_density(grid, means[1], stddev), grid)
    return ProblemSpec(grid, alpha, rho0, rho1, name="gaussian_1d")


def gaussian_2d_problem(n: int, nt: int, alpha: float, means=((0.3, 0.3), (0.7, 0.7)), stddev=0.1) -> ProblemSpec:
    grid = build_grid(n, n, nt)
    rho0 = gaussian_density(grid, means[0], stddev)
    rho1 = balance_masses(rho0, gaussian_density(grid, means[1], stddev), grid)
    return ProblemSpec(grid, alpha, rho0, rho1, name="gaussian_2d")


def obstacle_problem(
    n: int,
    nt: int,
    alpha: float,
    means: Sequence = ((-0.3, 0.3), (-0.3, -0.3)),
    stddev: float = 7e-2,
    lambda_Q: float = 8e4,
    region=gate_region,
) -> ProblemSpec:
    grid = build_grid(n, n, nt, extents=((-0.5, 0.5), (-0.5, 0.5)))
    rho0 = gaussian_density(grid, means[0], stddev)
    rho1 = balance_masses(rho0, gaussian_density(grid, means[1], stddev), grid)
    q = obstacle_field(grid, region)
    return ProblemSpec(grid, alpha, rho0, rho1, InteractionSpec(0.0, lambda_Q, "none", q), name="obstacle")


def synthetic_images(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Two uint8 test images: a bright disk and a bright square frame."""
    c = (np.arange(n) + 0.5) / n
    x, y = np.meshgrid(c, c)
    disk = (x - 0.3) ** 2 + (y - 0.3) ** 2 <= 0.15**2
    frame = (np.maximum(np.abs(x - 0.65), np.abs(y - 0.65)) <= 0.2) & (
        np.maximum(np.abs(x - 0.65), np.abs(y - 0.65)) >= 0.1
    )
    return (disk * 255).astype(np.uint8), (frame * 255).astype(np.uint8)


def image_problem(
    img0,
    img1,
    nt: int,
    alpha: float,
    mfp: bool = False,
    lambda_R: float = 0.01,
    lambda_Q: float = 0.1,
    invert: bool = False,
) -> ProblemSpec:
    """OT (``mfp=False``) or MFP between two equally sized grayscale images."""
    img0, img1 = np.asarray(img0), np.asarray(img1)
    if img0.shape != img1.shape:
        raise ConfigurationError(f"image sizes differ: {img0.shape} vs {img1.shape}")
    ny, nx = img0.shape
    grid = build_grid(nx, ny, nt)
    rho0 = image_density(img0, grid, invert)
    rho1 = balance_masses(rho0, image_density(img1, grid, invert), grid)
    if mfp:
        interaction = InteractionSpec(lambda_R, lambda_Q, "quadratic", image_penalty(img0, img1, invert))
    else:
        interaction = NO_INTERACTION
    return ProblemSpec(grid, alpha, rho0, rho1, interaction, name="image_mfp" if mfp else "image_ot")


# -- error measurement ------------------------------------------------------


def discrete_l2(grid: GridSpec, diff) -> float:
    """Space-time norm ``sqrt(dx dy dt sum diff^2)``."""
    return float(np.sqrt(grid.dx * grid.dy * grid.dt * np.sum(np.square(diff))))


def exact_errors(fields) -> tuple[float, float]:
    """Errors of ``(P, Mx)`` against :func:`exact_integer_ot` on a 1-D grid."""
    g = fields.grid
    if g.ny != 1:
        raise ConfigurationError("the exact solution is one-dimensional")
    rho, _ = exact_integer_ot(g.x_centers[None, :], g.times[:, None])
    _, m = exact_integer_ot(g.x_faces[None, 1:-1], g.times[1:, None])
    return discrete_l2(g, fields.p[:, 0, :] - rho), discrete_l2(g, fields.mx[:, 0, :] - m)


def _interpolator(values, axes):
    from scipy.interpolate import RegularGridInterpolator

    return RegularGridInterpolator(axes, values, method="linear", bounds_error=True)


def resample_solution(ref, grid: GridSpec):
    """Linearly interpolate a reference ``FieldSet`` onto ``grid``.

    Densities live on (time level, cell center) nodes; fluxes on
    (time level, face) nodes with the zero boundary faces restored so that
    every coarse interior face lies inside the fine node range.
    Returns ``(p, mx, my)`` shaped for ``grid``.
    """
    rg = ref.grid
    t_nodes = rg.times
    coarse_t = grid.times
    xc, yc = grid.x_centers, grid.y_centers

    def sample(values, t_axis, y_axis, x_axis, ts, ys, xs):
        if values.shape[1] == 1:
            f = _interpolator(values[:, 0, :], (t_axis, x_axis))
            T, X = np.meshgrid(ts, xs, indexing="ij")
            return f(np.stack([T, X], -1))[:, None, :]
        f = _interpolator(values, (t_axis, y_axis, x_axis))
        T, Y, X = np.meshgrid(ts, ys, xs, indexing="ij")
        return f(np.stack([T, Y, X], -1))

    # a single cell row/column carries no variation along that axis
    ry = rg.y_centers if rg.ny > 1 else None
    p = sample(ref.p, t_nodes, ry, rg.x_centers, coarse_t, yc, xc)

    mx_full = np.pad(ref.mx, ((0, 0), (0, 0), (1, 1)))
    mx = sample(mx_full, t_nodes[1:], ry, rg.x_faces, coarse_t[1:], yc, grid.x_faces[1:-1])
    if grid.ny > 1:
        my_full = np.pad(ref.my, ((0, 0), (1, 1), (0, 0)))
        f = _interpolator(my_full, (t_nodes[1:], rg.y_faces, rg.x_centers))
        T, Y, X = np.meshgrid(coarse_t[1:], grid.y_faces[1:-1], xc, indexing="ij")
        my = f(np.stack([T, Y, X], -1))
    else:
        my = np.zeros(grid.shape("my"))
    return p, mx, my


def reference_errors(fields, ref) -> tuple[float, float]:
    """Errors of ``(P, M)`` against a fine-grid reference solution."""
    g = fields.grid
    p, mx, my = resample_solution(ref, g)
    m_err2 = discrete_l2(g, fields.mx - mx) ** 2 + discrete_l2(g, fields.my - my) ** 2
    return discrete_l2(g, fields.p - p), float(np.sqrt(m_err2))


def observed_orders(sizes, errors) -> list:
    """Successive ``log(e_{k-1}/e_k) / log(n_k/n_{k-1})``; first entry is None."""
    out = [None]
    for (n0, e0), (n1, e1) in zip(zip(sizes, errors), zip(sizes[1:], errors[1:])):
        out.append(float(np.log(e0 / e1) / np.log(n1 / n0)))
    return out
