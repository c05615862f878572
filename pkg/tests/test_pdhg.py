import numpy as np
import pytest
from scipy.optimize import minimize_scalar

from fracot.energy import InteractionSpec, NO_INTERACTION, face_sums, h_field, lagrangian
from fracot.fracops import build_kernel
from fracot.grid import ConfigurationError, FieldSet, build_grid
from fracot.pdhg import (
    MultiplierSolver,
    SolveReport,
    SolverConfig,
    conjugate_gradient,
    implicit_density,
    solve,
    stop_check,
    update_density,
    update_fluxes,
    update_multiplier,
)
from fracot.problems import ProblemSpec, affine_problem, gaussian_1d_problem, uniform_density
from fracot.spaceops import ConstraintOperator, assemble_K_dense, gradient_adjoint


def random_state(rng, g):
    p = rng.uniform(0.5, 2.0, g.shape("p"))
    return FieldSet(g, p, rng.standard_normal(g.shape("mx")), rng.standard_normal(g.shape("my")), np.zeros(g.shape("phi")))


# -- configuration ----------------------------------------------------------


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(sigma_m=2.0, sigma_phi=0.5),
        dict(sigma_m=1.0, sigma_phi=1.5),
        dict(sigma_m=0.0),
        dict(tol_change=-1.0),
        dict(cg_tol=0.0),
        dict(max_iters=0),
        dict(h_fluxes="mid"),
        dict(init_flux="random"),
        dict(density_step="explicit"),
    ],
)
def test_config_rejects(kwargs):
    with pytest.raises(ConfigurationError):
        SolverConfig(**kwargs)


def test_config_defaults():
    c = SolverConfig()
    assert (c.sigma_m, c.sigma_phi, c.tol_change, c.tol_constraint, c.max_iters) == (0.1, 0.05, 1e-6, 1e-6, 100000)
    assert c.cg_tol == 1e-10


# -- flux step --------------------------------------------------------------


def test_flux_constant_phi_shrinks(rng):
    g = build_grid(4, 3, 2)
    f = random_state(rng, g)
    mx, my = update_fluxes(f, f.p, np.full(g.shape("phi"), 3.0), 0.1, g)
    sx, sy = face_sums(f.p[1:])
    np.testing.assert_allclose(mx, f.mx / (0.2 / sx + 1), rtol=1e-15)
    assert np.all(np.abs(mx) < np.abs(f.mx)) and np.all(np.abs(my) < np.abs(f.my))


def test_flux_fixed_point(rng):
    g = build_grid(4, 3, 2)
    f = random_state(rng, g)
    phi = rng.standard_normal(g.shape("phi"))
    gx, gy = gradient_adjoint(g, phi)
    sx, sy = face_sums(f.p[1:])
    f.mx, f.my = 0.5 * gx * sx, 0.5 * gy * sy
    mx, my = update_fluxes(f, f.p, phi, 0.1, g)
    np.testing.assert_allclose(mx, f.mx, rtol=1e-13, atol=1e-14)
    np.testing.assert_allclose(my, f.my, rtol=1e-13, atol=1e-14)


def test_flux_matches_scalar_prox(rng):
    g = build_grid(3, 3, 2)
    f = random_state(rng, g)
    phi = rng.standard_normal(g.shape("phi"))
    sigma = 0.1
    mx, _ = update_fluxes(f, f.p, phi, sigma, g)
    gx, _ = gradient_adjoint(g, phi)
    sx, _ = face_sums(f.p[1:])
    for idx in np.ndindex(mx.shape):
        obj = lambda m: m**2 / sx[idx] - m * gx[idx] + (m - f.mx[idx]) ** 2 / (2 * sigma)
        res = minimize_scalar(obj, bracket=(-50, 0, 50), method="golden", tol=1e-12)
        assert mx[idx] == pytest.approx(res.x, abs=1e-7)


def test_flux_floor_guard():
    g = build_grid(2, 1, 1)
    f = FieldSet(g, np.zeros(g.shape("p")), np.ones(g.shape("mx")), np.zeros(g.shape("my")), np.zeros(g.shape("phi")))
    with pytest.raises(FloatingPointError):
        update_fluxes(f, f.p, f.phi, 0.1, g)


# -- density step -----------------------------------------------------------


def test_density_zero_gradient(rng):
    g = build_grid(3, 2, 4)
    op = ConstraintOperator(g, build_kernel(0.5, g.dt, g.nt))
    f = random_state(rng, g)
    f.mx[:] = 0
    f.my[:] = 0
    p = update_density(f, (f.mx, f.my), np.zeros(g.shape("phi")), NO_INTERACTION, op, 0.1)
    np.testing.assert_array_equal(p, f.p)


def test_density_quadratic_decay(rng):
    g = build_grid(3, 2, 4)
    op = ConstraintOperator(g, build_kernel(0.5, g.dt, g.nt))
    f = random_state(rng, g)
    f.mx[:] = 0
    f.my[:] = 0
    p = update_density(f, (f.mx, f.my), np.zeros(g.shape("phi")), InteractionSpec(2.0, 0.0, "quadratic"), op, 0.1)
    np.testing.assert_allclose(p[1:-1], f.p[1:-1] * (1 - 0.1 * 2.0), rtol=1e-15)
    np.testing.assert_array_equal(p[[0, -1]], f.p[[0, -1]])


@pytest.mark.parametrize("alpha", [0.35, 1.0])
def test_density_step_is_scaled_gradient(rng, alpha):
    g = build_grid(4, 3, 4)
    k = build_kernel(alpha, g.dt, g.nt)
    op = ConstraintOperator(g, k)
    f = random_state(rng, g)
    f.p[1:-1] += 5.0  # keep the step away from the floor
    phi_bar = 0.1 * rng.standard_normal(g.shape("phi"))
    fi = InteractionSpec(0.3, 0.5, "quadratic", rng.uniform(0, 1, (3, 4)))
    sigma = 0.1
    p = update_density(f, (f.mx, f.my), phi_bar, fi, op, sigma)
    probe = FieldSet(g, f.p, f.mx, f.my, phi_bar)
    h = 1e-6
    for n in range(1, g.nt):
        for j in range(g.ny):
            for i in range(g.nx):
                plus, minus = probe.copy(), probe.copy()
                plus.p[n, j, i] += h
                minus.p[n, j, i] -= h
                fd = (lagrangian(plus, fi, k, g) - lagrangian(minus, fi, k, g)) / (2 * h)
                expect = f.p[n, j, i] - sigma / g.cell_volume * fd
                assert p[n, j, i] == pytest.approx(expect, rel=1e-8)


def test_density_clamps(rng):
    g = build_grid(3, 1, 3)
    op = ConstraintOperator(g, build_kernel(0.7, g.dt, g.nt))
    f = random_state(rng, g)
    phi_bar = np.full(g.shape("phi"), 1e6)
    p = update_density(f, (f.mx, f.my), phi_bar, NO_INTERACTION, op, 0.1, floor=1e-8)
    assert p[1:-1].min() == 1e-8


def test_density_uses_given_fluxes(rng):
    g = build_grid(3, 3, 3)
    op = ConstraintOperator(g, build_kernel(0.7, g.dt, g.nt))
    f = random_state(rng, g)
    zero = np.zeros(g.shape("phi"))
    a = update_density(f, (f.mx, f.my), zero, NO_INTERACTION, op, 0.1)
    b = update_density(f, (2 * f.mx, 2 * f.my), zero, NO_INTERACTION, op, 0.1)
    assert not np.array_equal(a, b)


def test_implicit_matches_scalar_prox(rng):
    g = build_grid(3, 3, 3)
    k = build_kernel(0.6, g.dt, g.nt)
    op = ConstraintOperator(g, k)
    f = random_state(rng, g)
    f.mx *= 3.0
    phi_bar = 0.3 * rng.standard_normal(g.shape("phi"))
    sigma = 0.1
    p = implicit_density(f, (f.mx, f.my), phi_bar, NO_INTERACTION, op, sigma)
    back = (op.A.T @ phi_bar.reshape(g.nt, -1))[1:].reshape(g.shape("phi"))
    for n in range(1, g.nt):
        for j in range(g.ny):
            for i in range(g.nx):
                faces = []
                if i + 1 < g.nx:
                    faces.append((f.mx[n - 1, j, i], f.p[n, j, i + 1]))
                if i > 0:
                    faces.append((f.mx[n - 1, j, i - 1], f.p[n, j, i - 1]))
                if j + 1 < g.ny:
                    faces.append((f.my[n - 1, j, i], f.p[n, j + 1, i]))
                if j > 0:
                    faces.append((f.my[n - 1, j - 1, i], f.p[n, j - 1, i]))
                c = back[n - 1, j, i]
                pk = f.p[n, j, i]

                def obj(x):
                    return sum(m**2 / (x + q) for m, q in faces) + c * x + (x - pk) ** 2 / (2 * sigma)

                res = minimize_scalar(obj, bounds=(1e-8, 50.0), method="bounded", options={"xatol": 1e-11})
                assert p[n, j, i] == pytest.approx(res.x, abs=1e-7)


def test_implicit_shares_fixed_points(rng):
    g = build_grid(4, 3, 2)
    op = ConstraintOperator(g, build_kernel(0.5, g.dt, g.nt))
    f = random_state(rng, g)
    h = h_field(f.p, f.mx, f.my)[0]
    fi = InteractionSpec(0.0, 1.0, "none", h)  # dF cancels H on the free level
    zero = np.zeros(g.shape("phi"))
    lin = update_density(f, (f.mx, f.my), zero, fi, op, 0.1)
    imp = implicit_density(f, (f.mx, f.my), zero, fi, op, 0.1)
    np.testing.assert_allclose(lin, f.p, rtol=1e-13)
    np.testing.assert_allclose(imp, f.p, rtol=1e-12)


def test_implicit_equals_linearized_without_flux(rng):
    g = build_grid(3, 2, 4)
    op = ConstraintOperator(g, build_kernel(0.8, g.dt, g.nt))
    f = random_state(rng, g)
    f.mx[:] = 0
    f.my[:] = 0
    phi_bar = 0.5 * rng.standard_normal(g.shape("phi"))
    fi = InteractionSpec(0.0, 2.0, "none", rng.uniform(0, 1, (2, 3)))
    np.testing.assert_allclose(
        implicit_density(f, (f.mx, f.my), phi_bar, fi, op, 0.1),
        update_density(f, (f.mx, f.my), phi_bar, fi, op, 0.1),
        rtol=1e-14,
    )


def test_implicit_no_free_levels(rng):
    g = build_grid(3, 1, 1)
    op = ConstraintOperator(g, build_kernel(0.8, g.dt, g.nt))
    f = random_state(rng, g)
    np.testing.assert_array_equal(implicit_density(f, (f.mx, f.my), np.zeros(g.shape("phi")), NO_INTERACTION, op, 0.1), f.p)


def test_implicit_solver_reaches_same_solution():
    prob = affine_problem(8, 0.8)
    a, ra = solve(prob, SolverConfig())
    b, rb = solve(prob, SolverConfig(density_step="implicit"))
    assert ra.converged and rb.converged
    assert np.max(np.abs(a.p - b.p)) < 1e-4


# -- multiplier step --------------------------------------------------------


def test_conjugate_gradient_spd(rng):
    m = rng.standard_normal((12, 12))
    a = m @ m.T + 12 * np.eye(12)
    b = rng.standard_normal(12)
    x, its, rel = conjugate_gradient(lambda v: a @ v, b, np.zeros(12), 1e-12, 100)
    np.testing.assert_allclose(x, np.linalg.solve(a, b), rtol=1e-10)
    assert rel <= 1e-12 and its <= 12


@pytest.mark.parametrize("alpha", [0.2, 0.6, 1.0])
@pytest.mark.parametrize("precond", ["spectral", "none"])
def test_multiplier_single_cell_dense(rng, alpha, precond):
    g = build_grid(1, 1, 7)
    op = ConstraintOperator(g, build_kernel(alpha, g.dt, g.nt))
    solver = MultiplierSolver(op, 1e-12, 200, precond)
    r = rng.standard_normal(g.shape("phi"))
    z = solver.solve(r)
    direct = np.linalg.solve(op.A @ op.A.T, r.ravel())
    np.testing.assert_allclose(z.ravel(), direct, rtol=1e-10, atol=1e-10 * np.abs(direct).max())


def test_multiplier_integer_order_dense(rng):
    g = build_grid(3, 2, 3)
    k = build_kernel(1.0, g.dt, g.nt)
    op = ConstraintOperator(g, k)
    kd = assemble_K_dense(g, k)
    solver = MultiplierSolver(op, 1e-10, 500, "none")
    r = rng.standard_normal(g.shape("phi"))
    z = solver.solve(r)
    np.testing.assert_allclose(op.apply_KKt(z).ravel(), kd @ kd.T @ z.ravel(), rtol=1e-12)
    assert solver.last_iterations <= g.size("phi")
    assert solver.last_relative_residual <= 1e-10


def test_multiplier_feasible_residual(rng):
    g = build_grid(3, 3, 3)
    op = ConstraintOperator(g, build_kernel(0.5, g.dt, g.nt))
    solver = MultiplierSolver(op, 1e-10, 50)
    phi = rng.standard_normal(g.shape("phi"))
    new, bar = update_multiplier(phi, np.zeros(g.shape("phi")), 0.05, solver)
    np.testing.assert_array_equal(new, phi)
    np.testing.assert_array_equal(bar, phi)


def test_multiplier_records_nonconvergence(rng):
    g = build_grid(6, 6, 6)
    op = ConstraintOperator(g, build_kernel(0.5, g.dt, g.nt))
    solver = MultiplierSolver(op, 1e-14, 1, "none")
    solver.solve(rng.standard_normal(g.shape("phi")))
    assert not solver.last_converged


# -- stopping ---------------------------------------------------------------


def test_stop_check_cases():
    cfg = SolverConfig()
    r = SolveReport(iterations=1, change_history=[0.0], constraint_residual_history=[0.0])
    assert stop_check(r, cfg) == "converged"
    r = SolveReport(iterations=1, change_history=[1.0], constraint_residual_history=[1.0])
    assert stop_check(r, SolverConfig(max_iters=1)) == "max_iters"
    assert stop_check(r, cfg) is None
    never = SolverConfig(tol_constraint=0.0, max_iters=5)
    r = SolveReport(iterations=4, change_history=[0.0], constraint_residual_history=[0.0])
    assert stop_check(r, never) is None
    r.iterations = 5
    assert stop_check(r, never) == "max_iters"


# -- full solves ------------------------------------------------------------


def uniform_problem(alpha):
    g = build_grid(6, 5, 4)
    u = uniform_density(g)
    return ProblemSpec(g, alpha, u, u.copy())


@pytest.mark.parametrize("alpha", [0.5, 1.0])
def test_stationary_problem(alpha):
    f, r = solve(uniform_problem(alpha), SolverConfig(init_flux="zeros"))
    assert r.converged and r.iterations == 1
    assert abs(r.lagrangian_history[-1]) < 1e-14
    assert np.abs(f.mx).max() == 0 and np.abs(f.my).max() == 0


def test_stationary_problem_from_unit_fluxes():
    f, r = solve(uniform_problem(0.7), SolverConfig(max_iters=20000))
    assert r.converged
    assert abs(r.lagrangian_history[-1]) < 1e-6
    assert np.abs(f.mx).max() < 1e-3


def test_history_lengths_and_pinning():
    prob = gaussian_1d_problem(10, 0.8)
    seen = []

    def cb(k, fields):
        seen.append((fields.p[0].copy(), fields.p[-1].copy()))

    f, r = solve(prob, SolverConfig(max_iters=50), callback=cb)
    assert r.reason == "max_iters" and not r.converged
    for hist in (r.lagrangian_history, r.constraint_residual_history, r.change_history, r.cg_iterations):
        assert len(hist) == r.iterations == 50
    for p0, p1 in seen:
        assert np.array_equal(p0, prob.rho0) and np.array_equal(p1, prob.rho1)
    assert f.p.min() >= SolverConfig().density_floor
    assert r.cg_max_relative_residual <= 1e-10
    assert set(r.kkt_residuals) == {"transport", "hamilton_jacobi", "flux_x", "flux_y"}


def test_deterministic():
    prob = affine_problem(8, 0.6)
    a, ra = solve(prob, SolverConfig(max_iters=200))
    b, rb = solve(prob, SolverConfig(max_iters=200))
    for x, y in zip((a.p, a.mx, a.phi), (b.p, b.mx, b.phi)):
        assert np.array_equal(x, y)
    assert ra.constraint_residual_history == rb.constraint_residual_history


def test_old_flux_switch_changes_path():
    prob = affine_problem(8, 0.6)
    a, _ = solve(prob, SolverConfig(max_iters=20))
    b, _ = solve(prob, SolverConfig(max_iters=20, h_fluxes="old"))
    assert not np.array_equal(a.p, b.p)


def _window_means(history, width=200):
    h = np.asarray(history)[width:]
    k = h.size // width
    return h[: k * width].reshape(k, width).mean(axis=1)


@pytest.mark.parametrize("n,alpha", [(8, 1.0), (8, 0.8), (10, 0.6)])
def test_windowed_residual_decreases(n, alpha):
    _, r = solve(affine_problem(n, alpha), SolverConfig(record_lagrangian=False))
    assert r.converged
    w = _window_means(r.constraint_residual_history)
    assert np.all(np.diff(w) <= 0)


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason="residual oscillates with a period near 500 iterations at this size")
def test_windowed_residual_decreases_20():
    _, r = solve(affine_problem(20, 1.0), SolverConfig(record_lagrangian=False))
    w = _window_means(r.constraint_residual_history)
    assert np.all(np.diff(w) <= 0)
