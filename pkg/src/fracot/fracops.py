"""L1 discretization of the Caputo derivative and its discrete adjoint.

The L1 weights are Toeplitz, ``b[n, k] = g[n - k]`` with

    g[d] = ((d + 1)**(1 - alpha) - d**(1 - alpha)) / (Gamma(2 - alpha) * dt**alpha)

so only the generator row ``g`` (length nt) is stored. ``alpha = 1`` gives
backward Euler: ``g = (1/dt, 0, ..., 0)``.

Timelines may carry trailing spatial axes; the time axis is always axis 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from fracot.grid import ConfigurationError


@dataclass(frozen=True)
class FractionalKernel:
    alpha: float
    dt: float
    nt: int
    g: np.ndarray

    def b(self, n: int, k: int) -> float:
        """Weight ``b_{n,k}`` for ``1 <= k <= n <= nt``."""
        if not 1 <= k <= n <= self.nt:
            raise IndexError(f"b[{n}, {k}] outside 1 <= k <= n <= {self.nt}")
        return float(self.g[n - k])

    def table(self) -> np.ndarray:
        """Full lower-triangular table, ``table[n-1, k-1] = b_{n,k}``."""
        nt = self.nt
        d = np.subtract.outer(np.arange(nt), np.arange(nt))
        return np.where(d >= 0, self.g[np.clip(d, 0, None)], 0.0)

    def matrix(self) -> np.ndarray:
        """Temporal block ``A`` of shape (nt, nt + 1) acting on ``P_0..P_nt``.

        Row ``n`` holds ``-b_{n,1}`` in column 0, ``b_{n,k} - b_{n,k+1}``
        in columns ``1..n-1`` and ``b_{n,n}`` in column ``n``.
        """
        nt = self.nt
        bt = self.table()
        a = np.zeros((nt, nt + 1))
        a[:, 0] = -bt[:, 0]
        a[:, 1:nt] = bt[:, : nt - 1] - bt[:, 1:nt]
        a[np.arange(nt), np.arange(1, nt + 1)] = np.diag(bt)
        return a


def build_kernel(alpha: float, dt: float, nt: int) -> FractionalKernel:
    if not 0.0 < alpha <= 1.0:
        raise ConfigurationError(f"alpha must lie in (0, 1], got {alpha}")
    if not dt > 0:
        raise ConfigurationError(f"dt must be positive, got {dt}")
    if int(nt) != nt or nt < 1:
        raise ConfigurationError(f"nt must be a positive integer, got {nt}")
    nt = int(nt)
    if alpha == 1.0:
        g = np.zeros(nt)
        g[0] = 1.0 / dt
    else:
        d = np.arange(nt + 1, dtype=float)
        powers = d ** (1.0 - alpha)
        g = np.diff(powers) / (math.gamma(2.0 - alpha) * dt**alpha)
    g.setflags(write=False)
    return FractionalKernel(float(alpha), float(dt), nt, g)


def caputo_forward(kernel: FractionalKernel, rho) -> np.ndarray:
    """L1 approximation of the Caputo derivative at levels 1..nt.

    ``rho`` has ``nt + 1`` entries along axis 0 (levels 0..nt).
    """
    rho = np.asarray(rho, dtype=float)
    nt, g = kernel.nt, kernel.g
    if rho.shape[0] != nt + 1:
        raise ValueError(f"timeline has {rho.shape[0]} levels, expected {nt + 1}")
    out = np.empty((nt,) + rho.shape[1:])
    # w[d] multiplies rho_{n-d} for 1 <= d <= n-1
    w = g[1:] - g[:-1]
    for n in range(1, nt + 1):
        acc = g[0] * rho[n] - g[n - 1] * rho[0]
        if n > 1:
            acc = acc + np.tensordot(w[: n - 1], rho[n - 1 : 0 : -1], axes=(0, 0))
        out[n - 1] = acc
    return out


def caputo_backward(kernel: FractionalKernel, phi) -> np.ndarray:
    """Discrete backward Riemann-Liouville derivative at levels 1..nt.

    ``phi`` has ``nt`` entries along axis 0 (levels 1..nt). Computes
    ``b_{n,n} phi_n + sum_{k>n} (b_{k,n} - b_{k,n+1}) phi_k``.
    """
    phi = np.asarray(phi, dtype=float)
    nt, g = kernel.nt, kernel.g
    if phi.shape[0] != nt:
        raise ValueError(f"timeline has {phi.shape[0]} levels, expected {nt}")
    out = np.empty_like(phi)
    w = g[1:] - g[:-1]
    for n in range(1, nt + 1):
        acc = g[0] * phi[n - 1]
        if n < nt:
            # k = n+1..nt  ->  lag k - n = 1..nt-n
            acc = acc + np.tensordot(w[: nt - n], phi[n:], axes=(0, 0))
        out[n - 1] = acc
    return out


def rl_tail_weights(kernel: FractionalKernel) -> np.ndarray:
    """Quadrature weights ``dt * b_{n,1}`` for the tail integral paired with ``rho_0``."""
    return kernel.dt * kernel.g.copy()
