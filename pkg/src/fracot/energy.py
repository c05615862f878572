"""Discrete cost functionals, Lagrangian and optimality residuals."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from fracot.fracops import FractionalKernel, caputo_backward, caputo_forward
from fracot.grid import ConfigurationError, FieldSet, GridSpec, l2_norm
from fracot.spaceops import divergence, gradient_adjoint

DENSITY_FLOOR = 1e-8


class DensityGuardError(FloatingPointError):
    """A density sum in a kinetic quotient is not strictly positive."""


@dataclass(frozen=True)
class InteractionSpec:
    """Interaction cost ``F(rho) = lambda_R R(rho) + lambda_Q rho Q``.

    ``regularizer`` is ``"none"`` or ``"quadratic"`` (``R = rho**2 / 2``).
    ``Q`` is a cell-centered (ny, nx) field or None for zero.
    """

    lambda_R: float = 0.0
    lambda_Q: float = 0.0
    regularizer: str = "none"
    Q: np.ndarray | None = None

    def __post_init__(self):
        if self.lambda_R < 0 or self.lambda_Q < 0:
            raise ConfigurationError("interaction weights must be nonnegative")
        if self.regularizer not in ("none", "quadratic"):
            raise ConfigurationError(f"unsupported regularizer {self.regularizer!r}")

    @property
    def is_zero(self) -> bool:
        r_off = self.regularizer == "none" or self.lambda_R == 0
        q_off = self.Q is None or self.lambda_Q == 0
        return r_off and q_off

    def value(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        out = np.zeros_like(p)
        if self.regularizer == "quadratic":
            out += self.lambda_R * 0.5 * p**2
        if self.Q is not None:
            out += self.lambda_Q * p * self.Q
        return out

    def derivative(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        out = np.zeros_like(p)
        if self.regularizer == "quadratic":
            out += self.lambda_R * p
        if self.Q is not None:
            out += self.lambda_Q * self.Q
        return out


NO_INTERACTION = InteractionSpec()


def face_sums(p):
    """Neighbor sums ``P_i + P_{i+1}`` on interior x- and y-faces."""
    p = np.asarray(p, dtype=float)
    sx = p[..., :, :-1] + p[..., :, 1:]
    sy = p[..., :-1, :] + p[..., 1:, :]
    return sx, sy


def _checked(s):
    if s.size and not np.all(s > 0):
        raise DensityGuardError(f"nonpositive density sum (min {s.min():.3e}) in kinetic quotient")
    return s


def kinetic_field(p, mx, my) -> np.ndarray:
    """Per-cell kinetic density ``Mx^2/(P+P) + My^2/(P+P)`` at levels 1..nt.

    Each cell owns its right and upper faces; boundary faces contribute 0.
    """
    p = np.asarray(p, dtype=float)[1:]
    sx, sy = face_sums(p)
    out = np.zeros_like(p)
    if mx.size:
        out[..., :, :-1] += np.square(mx) / _checked(sx)
    if my.size:
        out[..., :-1, :] += np.square(my) / _checked(sy)
    return out


def kinetic_term(p, mx, my, i: int, j: int, n: int) -> float:
    """Kinetic contribution of cell ``(i, j)`` at level ``n`` (1-based i, j)."""
    p = np.asarray(p, dtype=float)
    nx, ny = p.shape[-1], p.shape[-2]
    val = 0.0
    if i < nx:
        s = _checked(np.array(p[n, j - 1, i - 1] + p[n, j - 1, i]))
        val += mx[n - 1, j - 1, i - 1] ** 2 / s
    if j < ny:
        s = _checked(np.array(p[n, j - 1, i - 1] + p[n, j, i - 1]))
        val += my[n - 1, j - 1, i - 1] ** 2 / s
    return float(val)


def h_field(p, mx, my) -> np.ndarray:
    """``H`` at levels 1..nt: four-face sum of ``flux^2 / (P-sum)^2``."""
    p = np.asarray(p, dtype=float)[1:]
    sx, sy = face_sums(p)
    out = np.zeros_like(p)
    if mx.size:
        qx = np.square(mx / _checked(sx))
        out[..., :, :-1] += qx
        out[..., :, 1:] += qx
    if my.size:
        qy = np.square(my / _checked(sy))
        out[..., :-1, :] += qy
        out[..., 1:, :] += qy
    return out


def h_term(p, mx, my, i: int, j: int, n: int) -> float:
    """Scalar ``H_{i,j,n}`` (1-based i, j; 1 <= n <= nt)."""
    p = np.asarray(p, dtype=float)
    nx, ny = p.shape[-1], p.shape[-2]
    ii, jj = i - 1, j - 1
    pn = p[n]
    val = 0.0
    faces = []
    if ii < nx - 1:
        faces.append((mx[n - 1, jj, ii], pn[jj, ii] + pn[jj, ii + 1]))
    if ii > 0:
        faces.append((mx[n - 1, jj, ii - 1], pn[jj, ii - 1] + pn[jj, ii]))
    if jj < ny - 1:
        faces.append((my[n - 1, jj, ii], pn[jj, ii] + pn[jj + 1, ii]))
    if jj > 0:
        faces.append((my[n - 1, jj - 1, ii], pn[jj - 1, ii] + pn[jj, ii]))
    for m, s in faces:
        _checked(np.array(s))
        val += (m / s) ** 2
    return float(val)


def lagrangian(fields: FieldSet, interaction: InteractionSpec, kernel: FractionalKernel, grid: GridSpec) -> float:
    """Discrete generalized Lagrangian in its forward (constraint) form."""
    p, mx, my, phi = fields.p, fields.mx, fields.my, fields.phi
    residual = caputo_forward(kernel, p) + divergence(grid, mx, my)
    total = kinetic_field(p, mx, my) + interaction.value(p[1:]) + phi * residual
    return float(grid.cell_volume * total.sum())


def lagrangian_adjoint_form(fields: FieldSet, interaction: InteractionSpec, kernel: FractionalKernel, grid: GridSpec) -> float:
    """Same Lagrangian after moving the difference operators onto ``phi``."""
    p, mx, my, phi = fields.p, fields.mx, fields.my, fields.phi
    gx, gy = gradient_adjoint(grid, phi)
    tail = kernel.g[:, None, None] * p[0][None] * phi
    total = kinetic_field(p, mx, my) + interaction.value(p[1:])
    total = total + p[1:] * caputo_backward(kernel, phi) - tail
    return float(grid.cell_volume * (total.sum() - np.sum(mx * gx) - np.sum(my * gy)))


def lagrangian_gradient(fields: FieldSet, interaction: InteractionSpec, kernel: FractionalKernel, grid: GridSpec):
    """Closed-form partial derivatives ``(dL/dP[1:], dL/dMx, dL/dMy)``."""
    p, mx, my, phi = fields.p, fields.mx, fields.my, fields.phi
    dv = grid.cell_volume
    sx, sy = face_sums(p[1:])
    gx, gy = gradient_adjoint(grid, phi)
    d_p = dv * (-h_field(p, mx, my) + interaction.derivative(p[1:]) + caputo_backward(kernel, phi))
    d_mx = dv * (2.0 * mx / _checked(sx) - gx) if mx.size else np.zeros_like(mx)
    d_my = dv * (2.0 * my / _checked(sy) - gy) if my.size else np.zeros_like(my)
    return d_p, d_mx, d_my


@dataclass(frozen=True)
class KKTResiduals:
    transport: float
    hamilton_jacobi: float
    flux_x: float
    flux_y: float

    def as_dict(self) -> dict:
        return {
            "transport": self.transport,
            "hamilton_jacobi": self.hamilton_jacobi,
            "flux_x": self.flux_x,
            "flux_y": self.flux_y,
        }


def kkt_residuals(fields: FieldSet, interaction: InteractionSpec, kernel: FractionalKernel, grid: GridSpec) -> KKTResiduals:
    """Discrete L2 norms of the four optimality-system blocks.

    The Hamilton-Jacobi block is evaluated on the free levels 1..nt-1;
    levels 0 and nt are fixed by the endpoint conditions.
    """
    p, mx, my, phi = fields.p, fields.mx, fields.my, fields.phi
    r_t = caputo_forward(kernel, p) + divergence(grid, mx, my)
    r_hj = caputo_backward(kernel, phi) + interaction.derivative(p[1:]) - h_field(p, mx, my)
    sx, sy = face_sums(p[1:])
    gx, gy = gradient_adjoint(grid, phi)
    r_mx = 2.0 * mx / _checked(sx) - gx if mx.size else mx
    r_my = 2.0 * my / _checked(sy) - gy if my.size else my
    return KKTResiduals(
        l2_norm(grid, r_t),
        l2_norm(grid, r_hj[:-1]),
        l2_norm(grid, r_mx),
        l2_norm(grid, r_my),
    )


def total_mass(p, n: int, grid: GridSpec) -> float:
    """Cell-sum quadrature of the density at time level ``n``."""
    return float(np.sum(np.asarray(p)[n]) * grid.dx * grid.dy)
