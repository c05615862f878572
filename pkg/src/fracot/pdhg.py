"""G-prox primal-dual hybrid gradient iteration for fractional OT/MFP.

One outer iteration:

1. closed-form proximal update of the fluxes,
2. linearized gradient step on the free density levels, clamped to the floor,
3. dual ascent ``phi += sigma_phi (K K^T)^{-1} K U`` followed by
   extrapolation ``phi_bar = 2 phi_new - phi_old``.

The ``(K K^T)^{-1}`` solve is a conjugate-gradient iteration on the
matrix-free operator, preconditioned by the operator's spectral inverse
(see :meth:`ConstraintOperator.solve_KKt_direct`).
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from fracot.energy import (
    DENSITY_FLOOR,
    InteractionSpec,
    _checked,
    face_sums,
    h_field,
    kinetic_field,
    kkt_residuals,
)
from fracot.fracops import build_kernel
from fracot.grid import ConfigurationError, FieldSet, GridSpec, l2_norm
from fracot.problems import ProblemSpec
from fracot.spaceops import ConstraintOperator, gradient_adjoint

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SolverConfig:
    sigma_m: float = 0.1
    sigma_phi: float = 0.05
    max_iters: int = 100_000
    tol_change: float = 1e-6
    tol_constraint: float = 1e-6
    cg_tol: float = 1e-10
    cg_max_iters: int = 200
    density_floor: float = DENSITY_FLOOR
    # "new": H uses the freshly updated fluxes; "old": fluxes from iteration k
    h_fluxes: str = "new"
    # "ones" follows the reference initialization; "zeros" starts at rest
    init_flux: str = "ones"
    preconditioner: str = "spectral"
    # "linearized": explicit gradient step in P; "implicit": per-cell
    # proximal step in P with neighbors frozen (stable at high speeds)
    density_step: str = "linearized"
    record_lagrangian: bool = True

    def __post_init__(self):
        if not (self.sigma_m > 0 and self.sigma_phi > 0):
            raise ConfigurationError("step sizes must be positive")
        if self.sigma_m * self.sigma_phi >= 1.0:
            raise ConfigurationError(
                f"sigma_m * sigma_phi = {self.sigma_m * self.sigma_phi} must be < 1"
            )
        for name in ("tol_change", "tol_constraint", "cg_tol", "density_floor"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be nonnegative")
        if self.cg_tol == 0 or self.density_floor == 0:
            raise ConfigurationError("cg_tol and density_floor must be positive")
        if self.max_iters < 1 or self.cg_max_iters < 1:
            raise ConfigurationError("iteration caps must be >= 1")
        if self.h_fluxes not in ("new", "old"):
            raise ConfigurationError(f"h_fluxes must be 'new' or 'old', got {self.h_fluxes!r}")
        if self.init_flux not in ("ones", "zeros"):
            raise ConfigurationError(f"init_flux must be 'ones' or 'zeros', got {self.init_flux!r}")
        if self.preconditioner not in ("spectral", "none"):
            raise ConfigurationError(f"unknown preconditioner {self.preconditioner!r}")
        if self.density_step not in ("linearized", "implicit"):
            raise ConfigurationError(f"unknown density_step {self.density_step!r}")


@dataclass
class SolveReport:
    iterations: int = 0
    lagrangian_history: list = field(default_factory=list)
    constraint_residual_history: list = field(default_factory=list)
    change_history: list = field(default_factory=list)
    cg_iterations: list = field(default_factory=list)
    cg_max_relative_residual: float = 0.0
    kkt_residuals: dict | None = None
    converged: bool = False
    reason: str = ""
    warnings: list = field(default_factory=list)

    def as_dict(self) -> dict:
        return asdict(self)


# -- single steps -----------------------------------------------------------


def update_fluxes(fields: FieldSet, p_prev, phi_bar, sigma_m: float, grid: GridSpec, floor: float = DENSITY_FLOOR):
    """Pointwise proximal flux update; returns ``(mx, my)``."""
    p_prev = np.asarray(p_prev, dtype=float)
    if np.min(p_prev) < floor * (1 - 1e-12):
        raise FloatingPointError(f"density {np.min(p_prev):.3e} below floor {floor}")
    sx, sy = face_sums(p_prev[1:])
    gx, gy = gradient_adjoint(grid, phi_bar)
    mx = (fields.mx + sigma_m * gx) / (2.0 * sigma_m / _checked(sx) + 1.0) if fields.mx.size else fields.mx.copy()
    my = (fields.my + sigma_m * gy) / (2.0 * sigma_m / _checked(sy) + 1.0) if fields.my.size else fields.my.copy()
    return mx, my


def update_density(
    fields: FieldSet,
    m_new,
    phi_bar,
    interaction: InteractionSpec,
    op: ConstraintOperator,
    sigma_m: float,
    floor: float = DENSITY_FLOOR,
) -> np.ndarray:
    """Linearized gradient step on levels 1..nt-1, then clamp to ``floor``.

    ``m_new`` is the ``(mx, my)`` pair entering ``H``. Levels 0 and nt are
    copied unchanged.
    """
    p = fields.p
    g = op.grid
    mx, my = m_new
    h = h_field(p, mx, my)
    back = (op.A.T @ np.asarray(phi_bar).reshape(g.nt, -1))[1:].reshape(g.shape("phi"))
    step = h - interaction.derivative(p[1:]) - back
    p_new = p.copy()
    p_new[1:-1] = np.maximum(p[1:-1] + sigma_m * step[:-1], floor)
    return p_new


def _neighbor_faces(q, mx, my):
    """Per-cell ``(M^2, neighbor density)`` for the four faces, stacked on axis 0.

    Boundary faces get ``M = 0`` and a dummy neighbor of 1.
    """
    m2 = np.zeros((4,) + q.shape)
    nb = np.ones((4,) + q.shape)
    if mx.size:
        m2[0, ..., :, :-1] = m2[1, ..., :, 1:] = np.square(mx)
        nb[0, ..., :, :-1] = q[..., :, 1:]
        nb[1, ..., :, 1:] = q[..., :, :-1]
    if my.size:
        m2[2, ..., :-1, :] = m2[3, ..., 1:, :] = np.square(my)
        nb[2, ..., :-1, :] = q[..., 1:, :]
        nb[3, ..., 1:, :] = q[..., :-1, :]
    return m2, nb


def implicit_density(
    fields: FieldSet,
    m_new,
    phi_bar,
    interaction: InteractionSpec,
    op: ConstraintOperator,
    sigma_m: float,
    floor: float = DENSITY_FLOOR,
    tol: float = 1e-13,
    max_newton: int = 100,
) -> np.ndarray:
    """Per-cell proximal density step on levels 1..nt-1.

    Each free cell solves ``x - P + sigma (c - sum_f M_f^2 / (x + P_nb)^2) = 0``
    with ``c = dF(P) + backward(phi_bar)`` and neighbors held at ``P``; the
    left side is increasing and concave in ``x``, so safeguarded Newton from
    ``P`` converges to the unique root. Fixed points coincide with those of
    :func:`update_density`.
    """
    p = fields.p
    g = op.grid
    mx, my = m_new
    back = (op.A.T @ np.asarray(phi_bar).reshape(g.nt, -1))[1:].reshape(g.shape("phi"))
    c = (interaction.derivative(p[1:]) + back)[:-1]
    pk = p[1:-1]
    p_new = p.copy()
    if pk.size == 0:
        return p_new
    m2, nb = _neighbor_faces(pk, mx[:-1], my[:-1])

    shape = pk.shape
    pk, c = pk.ravel(), c.ravel()
    m2, nb = m2.reshape(4, -1), nb.reshape(4, -1)

    def residual(x, idx):
        inv = 1.0 / (x[None] + nb[:, idx])
        w = m2[:, idx] * inv * inv
        r = x - pk[idx] + sigma_m * (c[idx] - w.sum(axis=0))
        return r, 1.0 + 2.0 * sigma_m * (w * inv).sum(axis=0)

    everything = np.arange(pk.size)
    at_floor = residual(np.full(pk.size, floor), everything)[0] >= 0
    x = np.maximum(pk, floor)
    # Newton only on cells that are still moving
    active = everything[~at_floor]
    for _ in range(max_newton):
        if active.size == 0:
            break
        xa = x[active]
        r, dr = residual(xa, active)
        xn = xa - r / dr
        # an overshoot below the floor is replaced by bisection
        xn = np.where(xn < floor, 0.5 * (xa + floor), xn)
        x[active] = xn
        active = active[np.abs(xn - xa) >= tol * (1.0 + xa)]
    x = np.where(at_floor, floor, np.maximum(x, floor)).reshape(shape)
    p_new[1:-1] = x
    return p_new



def conjugate_gradient(apply_A, b, x0, tol, max_iters, precondition=None):
    """Preconditioned CG on flat vectors; returns ``(x, iterations, rel_residual)``.

    Stops on the recomputed true residual ``||b - A x|| <= tol ||b||``.
    """
    bnorm = np.linalg.norm(b)
    x = x0.copy()
    r = b - apply_A(x)
    rel = np.linalg.norm(r) / bnorm
    if rel <= tol:
        return x, 0, rel
    z = precondition(r) if precondition else r
    d = z.copy()
    rz = r @ z
    for k in range(1, max_iters + 1):
        ad = apply_A(d)
        step = rz / (d @ ad)
        x += step * d
        r -= step * ad
        rel = np.linalg.norm(r) / bnorm
        if rel <= tol:
            r = b - apply_A(x)
            rel = np.linalg.norm(r) / bnorm
            if rel <= tol:
                return x, k, rel
        z = precondition(r) if precondition else r
        rz_new = r @ z
        d = z + (rz_new / rz) * d
        rz = rz_new
    return x, max_iters, rel


class MultiplierSolver:
    """Warm-started CG for ``K K^T z = r`` with bookkeeping."""

    def __init__(self, op: ConstraintOperator, tol: float, max_iters: int, preconditioner: str = "spectral"):
        self.op = op
        self.tol = tol
        self.max_iters = max_iters
        self._apply = lambda v: op.apply_KKt(v).ravel()
        self._precondition = (lambda v: op.solve_KKt_direct(v).ravel()) if preconditioner == "spectral" else None
        self._z = np.zeros(op.grid.size("phi"))
        self.last_iterations = 0
        self.last_relative_residual = 0.0
        self.last_converged = True

    def solve(self, r) -> np.ndarray:
        g = self.op.grid
        b = np.asarray(r, dtype=float).ravel()
        if not np.any(b):
            self._z[:] = 0.0
            self.last_iterations = 0
            self.last_relative_residual = 0.0
            self.last_converged = True
            return self._z.reshape(g.shape("phi")).copy()
        z, its, rel = conjugate_gradient(self._apply, b, self._z, self.tol, self.max_iters, self._precondition)
        self._z = z
        self.last_iterations = its
        self.last_relative_residual = float(rel)
        self.last_converged = rel <= self.tol
        return z.reshape(g.shape("phi")).copy()


def update_multiplier(phi, residual, sigma_phi: float, solver: MultiplierSolver):
    """Dual ascent in the ``K^T``-weighted norm; returns ``(phi_new, phi_bar)``."""
    z = solver.solve(residual)
    phi_new = phi + sigma_phi * z
    return phi_new, 2.0 * phi_new - phi


def stop_check(report: SolveReport, config: SolverConfig):
    """Return the stopping reason, or None to continue."""
    if report.change_history and report.constraint_residual_history:
        if report.change_history[-1] < config.tol_change and report.constraint_residual_history[-1] < config.tol_constraint:
            return "converged"
    if report.iterations >= config.max_iters:
        return "max_iters"
    return None


# -- driver -----------------------------------------------------------------


def initial_fields(problem: ProblemSpec, config: SolverConfig) -> FieldSet:
    grid = problem.grid
    p = np.ones(grid.shape("p"))
    p[0] = problem.rho0
    p[-1] = problem.rho1
    fill = np.ones if config.init_flux == "ones" else np.zeros
    return FieldSet(grid, p, fill(grid.shape("mx")), fill(grid.shape("my")), np.zeros(grid.shape("phi")))


def solve(problem: ProblemSpec, config: SolverConfig | None = None, initial: FieldSet | None = None, callback=None):
    """Run the G-prox PDHG iteration; returns ``(fields, report)``.

    ``callback(k, fields)`` is invoked after every iteration when given.
    """
    config = config or SolverConfig()
    grid = problem.grid
    kernel = build_kernel(problem.alpha, grid.dt, grid.nt)
    op = ConstraintOperator(grid, kernel)
    mult = MultiplierSolver(op, config.cg_tol, config.cg_max_iters, config.preconditioner)
    interaction = problem.interaction
    floor = config.density_floor

    fields = initial.copy() if initial is not None else initial_fields(problem, config)
    fields.p[0] = problem.rho0
    fields.p[-1] = problem.rho1
    phi_bar = fields.phi.copy()
    report = SolveReport()
    dv = grid.cell_volume

    while True:
        mx, my = update_fluxes(fields, fields.p, phi_bar, config.sigma_m, grid, floor)
        h_in = (mx, my) if config.h_fluxes == "new" else (fields.mx, fields.my)
        step = update_density if config.density_step == "linearized" else implicit_density
        p = step(fields, h_in, phi_bar, interaction, op, config.sigma_m, floor)

        residual = op.apply_K((p, mx, my))
        phi, phi_bar = update_multiplier(fields.phi, residual, config.sigma_phi, mult)

        num = np.sum((p - fields.p) ** 2) + np.sum((mx - fields.mx) ** 2) + np.sum((my - fields.my) ** 2)
        den = np.sum(fields.p**2) + np.sum(fields.mx**2) + np.sum(fields.my**2)
        change = float(np.sqrt(num / max(den, 1e-300)))

        fields = FieldSet(grid, p, mx, my, phi)
        report.iterations += 1
        report.change_history.append(change)
        report.constraint_residual_history.append(l2_norm(grid, residual))
        report.cg_iterations.append(mult.last_iterations)
        report.cg_max_relative_residual = max(report.cg_max_relative_residual, mult.last_relative_residual)
        if not mult.last_converged:
            report.warnings.append(
                f"iteration {report.iterations}: inner solve residual {mult.last_relative_residual:.2e} above cg_tol"
            )
        if config.record_lagrangian:
            total = kinetic_field(p, mx, my) + interaction.value(p[1:]) + phi * residual
            report.lagrangian_history.append(float(dv * total.sum()))
        if callback is not None:
            callback(report.iterations, fields)

        reason = stop_check(report, config)
        if reason is not None:
            break

    report.reason = reason
    report.converged = reason == "converged"
    report.kkt_residuals = kkt_residuals(fields, interaction, kernel, grid).as_dict()
    log.info("solve %s alpha=%g: %s after %d iterations", problem.name, problem.alpha, reason, report.iterations)
    return fields, report
