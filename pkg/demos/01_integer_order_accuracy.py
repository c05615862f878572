"""Integer-order OT: compare the solver with the exact solution.

Transports rho0(x) = x + 1/2 to the uniform density on [0, 1] and prints
the discrete L2 errors and observed orders on a short grid sequence.
Takes about a minute.
"""
import time

from fracot import SolverConfig, solve
from fracot.problems import affine_problem, exact_errors, observed_orders

grids = [8, 10, 20]
rho_err, m_err = [], []
for n in grids:
    t0 = time.perf_counter()
    fields, report = solve(affine_problem(n, alpha=1.0), SolverConfig())
    e_rho, e_m = exact_errors(fields)
    rho_err.append(e_rho)
    m_err.append(e_m)
    print(f"{n:3d}^2  rho {e_rho:.3e}  m {e_m:.3e}  ({report.iterations} iterations, {time.perf_counter() - t0:.1f}s)")

print("rho orders", ["-" if o is None else round(o, 2) for o in observed_orders(grids, rho_err)])
print("m orders  ", ["-" if o is None else round(o, 2) for o in observed_orders(grids, m_err)])
