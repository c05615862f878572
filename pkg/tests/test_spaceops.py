import itertools

import numpy as np
import pytest

from fracot.fracops import build_kernel
from fracot.grid import build_grid
from fracot.spaceops import ConstraintOperator, assemble_K_dense, divergence, gradient_adjoint


def make_op(nx, ny, nt, alpha):
    g = build_grid(nx, ny, nt)
    return ConstraintOperator(g, build_kernel(alpha, g.dt, g.nt))


def test_divergence_zero_flux():
    g = build_grid(4, 3, 1)
    assert not np.any(divergence(g, np.zeros((3, 3)), np.zeros((2, 4))))


def test_divergence_1d_example():
    g = build_grid(3, 1, 1)
    div = divergence(g, np.ones((1, 2)), np.zeros((0, 3)))
    np.testing.assert_allclose(div, [[3.0, 0.0, -3.0]])


def test_divergence_sums_to_zero(rng):
    g = build_grid(6, 5, 3)
    div = divergence(g, rng.standard_normal(g.shape("mx")), rng.standard_normal(g.shape("my")))
    assert np.abs(div.sum(axis=(1, 2))).max() < 1e-12


def test_gradient_examples():
    g = build_grid(3, 2, 1)
    gx, gy = gradient_adjoint(g, np.full((2, 3), 4.2))
    assert not np.any(gx) and not np.any(gy)
    x, _ = g.mesh()
    gx, _ = gradient_adjoint(g, x)
    np.testing.assert_allclose(gx, 1.0)


def test_shape_mismatch():
    g = build_grid(3, 2, 1)
    with pytest.raises(ValueError):
        divergence(g, np.zeros((2, 3)), np.zeros((1, 3)))
    with pytest.raises(ValueError):
        gradient_adjoint(g, np.zeros((3, 3)))
    op = make_op(3, 2, 2, 0.5)
    with pytest.raises(ValueError):
        op.apply_K(np.zeros(5))
    with pytest.raises(ValueError):
        op.apply_Kt(np.zeros(5))


@pytest.mark.parametrize("nx,ny", [(1, 1), (2, 3), (5, 4)])
def test_summation_by_parts(rng, nx, ny):
    g = build_grid(nx, ny, 1)
    mx = rng.standard_normal((ny, nx - 1))
    my = rng.standard_normal((ny - 1, nx))
    phi = rng.standard_normal((ny, nx))
    gx, gy = gradient_adjoint(g, phi)
    lhs_x = np.sum(divergence(g, mx, np.zeros_like(my)) * phi)
    lhs_y = np.sum(divergence(g, np.zeros_like(mx), my) * phi)
    assert lhs_x == pytest.approx(-np.sum(mx * gx), rel=1e-12, abs=1e-12)
    assert lhs_y == pytest.approx(-np.sum(my * gy), rel=1e-12, abs=1e-12)


def test_K_annihilates_constants():
    op = make_op(3, 3, 4, 0.4)
    g = op.grid
    r = op.apply_K((np.full(g.shape("p"), 2.5), np.zeros(g.shape("mx")), np.zeros(g.shape("my"))))
    assert np.abs(r).max() < 1e-12


@pytest.mark.parametrize(
    "nx,ny,nt,alpha",
    list(itertools.product([1, 2, 3], [1, 2, 3], [1, 2, 3], [0.35, 1.0])),
)
def test_K_matches_dense_assembly(rng, nx, ny, nt, alpha):
    op = make_op(nx, ny, nt, alpha)
    kd = assemble_K_dense(op.grid, op.kernel)
    assert kd.shape == op.shape
    u = rng.standard_normal(op.grid.n_unknowns)
    ref = kd @ u
    np.testing.assert_allclose(op.apply_K(u).ravel(), ref, rtol=1e-13, atol=1e-13 * np.abs(kd).max() * np.abs(u).max())
    phi = rng.standard_normal(op.grid.size("phi"))
    reft = kd.T @ phi
    np.testing.assert_allclose(op.apply_Kt_flat(phi), reft, rtol=1e-13, atol=1e-13 * np.abs(kd).max() * np.abs(phi).max())


def test_transpose_identity(rng):
    op = make_op(5, 4, 6, 0.7)
    g = op.grid
    for _ in range(20):
        u = rng.standard_normal(g.n_unknowns)
        phi = rng.standard_normal(g.size("phi"))
        lhs = op.apply_K(u).ravel() @ phi
        rhs = u @ op.apply_Kt_flat(phi)
        assert lhs == pytest.approx(rhs, rel=1e-12)


def test_Kt_zero():
    op = make_op(3, 2, 2, 0.5)
    assert not np.any(op.apply_Kt_flat(np.zeros(op.grid.size("phi"))))


def test_KKt_symmetric_positive(rng):
    op = make_op(4, 3, 5, 0.6)
    n = op.grid.size("phi")
    for _ in range(20):
        x, y = rng.standard_normal(n), rng.standard_normal(n)
        kx, ky = op.apply_KKt(x).ravel(), op.apply_KKt(y).ravel()
        assert kx @ y == pytest.approx(x @ ky, rel=1e-12)
        assert x @ kx > 0


@pytest.mark.parametrize("alpha", [0.3, 0.9, 1.0])
def test_KKt_dense_eigenvalue_floor(alpha):
    op = make_op(3, 2, 3, alpha)
    kd = assemble_K_dense(op.grid, op.kernel)
    eig = np.linalg.eigvalsh(kd @ kd.T)
    assert eig.min() > 1e-8 * eig.max()


@pytest.mark.parametrize("nx,ny,nt,alpha", [(1, 1, 6, 0.5), (4, 1, 5, 1.0), (3, 4, 4, 0.3), (6, 5, 7, 0.8)])
def test_spectral_inverse_matches_dense(rng, nx, ny, nt, alpha):
    op = make_op(nx, ny, nt, alpha)
    kd = assemble_K_dense(op.grid, op.kernel)
    r = rng.standard_normal(op.grid.size("phi"))
    z = op.solve_KKt_direct(r).ravel()
    np.testing.assert_allclose(z, np.linalg.solve(kd @ kd.T, r), rtol=1e-10, atol=1e-12)
