"""Staggered difference operators and the space-time constraint operator K.

``K U = A P + Dx Mx + Dy My`` where ``A`` is the L1 temporal block and
``Dx``, ``Dy`` the face-to-center differences with zero boundary fluxes.
K is applied matrix-free: ``A`` acts along the time axis of the reshaped
density, the spatial stencils act within each time level.
"""

from __future__ import annotations

import numpy as np
from scipy.fft import dctn, idctn

from fracot.fracops import FractionalKernel
from fracot.grid import GridSpec, split_primal


def divergence(grid: GridSpec, mx, my) -> np.ndarray:
    """Cell-centered ``delta_x Mx + delta_y My`` with zero boundary faces.

    Leading axes (e.g. time) are broadcast; the last two axes are (y, x).
    """
    mx = np.asarray(mx, dtype=float)
    my = np.asarray(my, dtype=float)
    if mx.shape[-2:] != (grid.ny, grid.nx - 1) or my.shape[-2:] != (grid.ny - 1, grid.nx):
        raise ValueError(f"flux shapes {mx.shape}, {my.shape} do not match grid {grid.nx}x{grid.ny}")
    div = np.zeros(mx.shape[:-2] + (grid.ny, grid.nx))
    if mx.size:
        d = mx / grid.dx
        div[..., :, :-1] += d
        div[..., :, 1:] -= d
    if my.size:
        d = my / grid.dy
        div[..., :-1, :] += d
        div[..., 1:, :] -= d
    return div


def gradient_adjoint(grid: GridSpec, phi):
    """Forward differences of ``phi`` on interior faces, ``(gx, gy)``.

    ``gx[..., j, i] = (phi[..., j, i+1] - phi[..., j, i]) / dx``; these are
    minus the transposes of the divergence stencils.
    """
    phi = np.asarray(phi, dtype=float)
    if phi.shape[-2:] != (grid.ny, grid.nx):
        raise ValueError(f"phi shape {phi.shape} does not match grid {grid.nx}x{grid.ny}")
    gx = np.diff(phi, axis=-1) / grid.dx
    gy = np.diff(phi, axis=-2) / grid.dy
    return gx, gy


def neumann_eigenvalues(n: int, h: float) -> np.ndarray:
    """Eigenvalues of ``C C^T`` (1-D Neumann Laplacian) in the DCT-II basis."""
    k = np.arange(n)
    return (2.0 - 2.0 * np.cos(np.pi * k / n)) / h**2


class ConstraintOperator:
    """The operator ``K`` for a fixed grid and fractional kernel."""

    def __init__(self, grid: GridSpec, kernel: FractionalKernel):
        if kernel.nt != grid.nt or not np.isclose(kernel.dt, grid.dt, rtol=1e-14, atol=0):
            raise ValueError("kernel and grid disagree on the time discretization")
        self.grid = grid
        self.kernel = kernel
        self.A = kernel.matrix()
        self._spectral = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.size("phi"), self.grid.n_unknowns

    def _unpack(self, u):
        if isinstance(u, tuple):
            p, mx, my = (np.asarray(a, dtype=float) for a in u)
            g = self.grid
            return p.reshape(g.shape("p")), mx.reshape(g.shape("mx")), my.reshape(g.shape("my"))
        return split_primal(self.grid, u)

    def apply_K(self, u) -> np.ndarray:
        """Residual ``delta_t^alpha P + div M`` of shape (nt, ny, nx).

        ``u`` is either the flat ``U`` vector or a ``(p, mx, my)`` tuple.
        """
        p, mx, my = self._unpack(u)
        g = self.grid
        time_part = (self.A @ p.reshape(g.nt + 1, -1)).reshape(g.shape("phi"))
        return time_part + divergence(g, mx, my)

    def apply_Kt(self, phi):
        """``K^T phi`` returned as a ``(p, mx, my)`` tuple of shaped arrays."""
        g = self.grid
        phi = np.asarray(phi, dtype=float)
        if phi.size != g.size("phi"):
            raise ValueError(f"phi has {phi.size} entries, expected {g.size('phi')}")
        phi = phi.reshape(g.shape("phi"))
        p = (self.A.T @ phi.reshape(g.nt, -1)).reshape(g.shape("p"))
        gx, gy = gradient_adjoint(g, phi)
        return p, -gx, -gy

    def apply_Kt_flat(self, phi) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.apply_Kt(phi)])

    def apply_KKt(self, phi) -> np.ndarray:
        return self.apply_K(self.apply_Kt(phi))

    def _spectral_factors(self):
        if self._spectral is None:
            g = self.grid
            lam_t, v = np.linalg.eigh(self.A @ self.A.T)
            mu_x = neumann_eigenvalues(g.nx, g.dx)
            mu_y = neumann_eigenvalues(g.ny, g.dy)
            denom = lam_t[:, None, None] + mu_y[None, :, None] + mu_x[None, None, :]
            self._spectral = (v, denom)
        return self._spectral

    def solve_KKt_direct(self, r) -> np.ndarray:
        """Apply ``(K K^T)^{-1}`` by joint diagonalization.

        ``A A^T`` is eigendecomposed once; the spatial Neumann Laplacians are
        diagonal in the DCT-II basis, and all three blocks commute.
        """
        g = self.grid
        v, denom = self._spectral_factors()
        r = np.asarray(r, dtype=float).reshape(g.shape("phi"))
        rhat = dctn(r, type=2, norm="ortho", axes=(1, 2))
        rhat = (v.T @ rhat.reshape(g.nt, -1)).reshape(rhat.shape)
        zhat = rhat / denom
        zhat = (v @ zhat.reshape(g.nt, -1)).reshape(zhat.shape)
        return idctn(zhat, type=2, norm="ortho", axes=(1, 2))


def assemble_K_dense(grid: GridSpec, kernel: FractionalKernel) -> np.ndarray:
    """Dense ``K`` built entry by entry from the Kronecker block definition.

    Test oracle for tiny grids only.
    """
    nx, ny, nt = grid.nx, grid.ny, grid.nt
    a = np.zeros((nt, nt + 1))
    for i in range(1, nt + 1):
        for j in range(1, nt + 2):
            if j == 1:
                a[i - 1, j - 1] = -kernel.b(i, 1)
            elif 2 <= j <= i:
                a[i - 1, j - 1] = kernel.b(i, j - 1) - kernel.b(i, j)
            elif j == i + 1:
                a[i - 1, j - 1] = kernel.b(i, i)

    def diff_block(n, h):
        c = np.zeros((n, n - 1))
        for i in range(n):
            for j in range(n - 1):
                if j == i:
                    c[i, j] = 1.0 / h
                elif j == i - 1:
                    c[i, j] = -1.0 / h
        return c

    cx = diff_block(nx, grid.dx)
    cy = diff_block(ny, grid.dy)
    it, ix, iy = np.eye(nt), np.eye(nx), np.eye(ny)
    return np.hstack(
        [
            np.kron(a, np.kron(iy, ix)),
            np.kron(it, np.kron(iy, cx)),
            np.kron(it, np.kron(cy, ix)),
        ]
    )
