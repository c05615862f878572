"""Command-line driver: ``solve``, ``convergence`` and ``validate``.

Runs are described by an INI file::

    [problem]
    preset = test_5_2_2
    alpha = 0.8

    [solver]
    max_iters = 50000

    [output]
    snapshots = yes

    [convergence]
    grids = 8, 10, 20, 25
    alphas = 1.0
    reference_n = 100

Every key is optional except ``preset``. Unknown sections or keys are
rejected with the offending file, section and key in the message.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import json
import logging
import math
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from fracot.energy import (
    InteractionSpec,
    lagrangian,
    lagrangian_adjoint_form,
    lagrangian_gradient,
    total_mass,
)
from fracot.fracops import build_kernel, caputo_backward, caputo_forward
from fracot.grid import ConfigurationError, FieldSet, build_grid
from fracot.pdhg import MultiplierSolver, SolverConfig, solve
from fracot.problems import (
    ProblemSpec,
    affine_problem,
    exact_errors,
    gaussian_1d_problem,
    gaussian_2d_problem,
    image_problem,
    obstacle_problem,
    observed_orders,
    read_pgm,
    reference_errors,
    synthetic_images,
    write_pgm,
)
from fracot.spaceops import ConstraintOperator, divergence, gradient_adjoint

log = logging.getLogger("fracot")


# -- presets ----------------------------------------------------------------


@dataclass(frozen=True)
class Preset:
    """A named experiment: problem builder plus its default parameters."""

    name: str
    build: Callable[..., ProblemSpec]
    defaults: dict
    solver: dict = field(default_factory=dict)


def _images(params):
    if params.get("image0") and params.get("image1"):
        return read_pgm(params["image0"]), read_pgm(params["image1"])
    return synthetic_images(params["n"])


# Gaussian tails fall below the density floor; the linearized density step
# is unstable there, so these presets use the implicit step
GAUSSIAN_SOLVER = dict(density_step="implicit", sigma_phi=9.0)

PRESETS = {
    p.name: p
    for p in [
        Preset("test_5_2_1", lambda q: affine_problem(q["n"], q["alpha"]), dict(n=40, alpha=1.0)),
        Preset(
            "test_5_2_2",
            lambda q: gaussian_1d_problem(q["n"], q["alpha"], (q["mean0"], q["mean1"]), q["stddev"]),
            dict(n=40, alpha=1.0, mean0=0.3, mean1=0.7, stddev=0.1),
            GAUSSIAN_SOLVER,
        ),
        Preset(
            "test_5_2_3",
            lambda q: gaussian_1d_problem(q["n"], q["alpha"], (q["mean0"], q["mean1"]), q["stddev"]),
            dict(n=40, alpha=1.0, mean0=0.25, mean1=0.75, stddev=0.08),
            GAUSSIAN_SOLVER,
        ),
        Preset(
            "ot_2d",
            lambda q: gaussian_2d_problem(q["n"], q["nt"], q["alpha"], ((q["mean0"],) * 2, (q["mean1"],) * 2), q["stddev"]),
            dict(n=40, nt=40, alpha=1.0, mean0=0.3, mean1=0.7, stddev=0.1),
            GAUSSIAN_SOLVER,
        ),
        Preset(
            "obstacle",
            lambda q: obstacle_problem(q["n"], q["nt"], q["alpha"], stddev=q["stddev"], lambda_Q=q["lambda_Q"]),
            dict(n=32, nt=32, alpha=1.0, stddev=7e-2, lambda_Q=8e4),
            dict(GAUSSIAN_SOLVER, max_iters=20_000),
        ),
        Preset(
            "image",
            lambda q: image_problem(*_images(q), q["nt"], q["alpha"], mfp=False, invert=q["invert"]),
            dict(n=64, nt=16, alpha=1.0, image0="", image1="", invert=False),
            dict(density_step="implicit"),
        ),
        Preset(
            "image_mfp",
            lambda q: image_problem(
                *_images(q), q["nt"], q["alpha"], mfp=True, lambda_R=q["lambda_R"], lambda_Q=q["lambda_Q"], invert=q["invert"]
            ),
            dict(n=64, nt=16, alpha=1.0, image0="", image1="", invert=False, lambda_R=0.01, lambda_Q=0.1),
            dict(density_step="implicit"),
        ),
        Preset("convergence", lambda q: affine_problem(q["n"], q["alpha"]), dict(n=8, alpha=1.0)),
    ]
}

CONVERGENCE_DEFAULTS = dict(grids=[8, 10, 20, 25], alphas=[1.0], reference_n=100, reference_cache="")
OUTPUT_DEFAULTS = dict(snapshots=True, heatmaps=False, report=True)


# -- configuration ----------------------------------------------------------


@dataclass
class RunConfig:
    preset: str
    params: dict
    solver: SolverConfig
    output: dict
    convergence: dict
    source: str = "<memory>"

    def problem(self, **overrides) -> ProblemSpec:
        params = {**self.params, **overrides}
        return PRESETS[self.preset].build(params)

    def echo(self) -> dict:
        return {
            "preset": self.preset,
            "params": self.params,
            "solver": dataclasses.asdict(self.solver),
            "output": self.output,
            "convergence": self.convergence,
            "source": self.source,
        }


def _coerce(text: str, like, where: str):
    try:
        if isinstance(like, bool):
            return configparser.ConfigParser.BOOLEAN_STATES[text.strip().lower()]
        if isinstance(like, int):
            return int(text)
        if isinstance(like, float):
            return float(text)
        if isinstance(like, list):
            kind = type(like[0]) if like else float
            return [kind(v) for v in text.replace(",", " ").split()]
        return text.strip()
    except (KeyError, ValueError):
        raise ConfigurationError(f"{where}: cannot read {text!r} as {type(like).__name__}") from None


def parse_config(text: str, source: str = "<memory>") -> RunConfig:
    """Parse INI text into a :class:`RunConfig`."""
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigurationError(str(exc)) from None
    allowed = {"problem", "solver", "output", "convergence"}
    for section in cp.sections():
        if section not in allowed:
            raise ConfigurationError(f"{source}: unknown section [{section}]")
    if not cp.has_option("problem", "preset"):
        raise ConfigurationError(f"{source}: [problem] preset is required")
    name = cp.get("problem", "preset").strip()
    if name not in PRESETS:
        raise ConfigurationError(f"{source}: [problem] preset: unknown preset {name!r}; choose from {sorted(PRESETS)}")
    preset = PRESETS[name]

    def read(section, defaults):
        out = dict(defaults)
        if not cp.has_section(section):
            return out
        for key, value in cp.items(section):
            if section == "problem" and key == "preset":
                continue
            if key not in defaults:
                raise ConfigurationError(f"{source}: [{section}] {key}: unknown key")
            out[key] = _coerce(value, defaults[key], f"{source}: [{section}] {key}")
        return out

    params = read("problem", preset.defaults)
    solver_defaults = {f.name: f.default for f in dataclasses.fields(SolverConfig)}
    solver_defaults.update(preset.solver)
    solver_values = read("solver", solver_defaults)
    try:
        solver = SolverConfig(**solver_values)
    except ConfigurationError as exc:
        raise ConfigurationError(f"{source}: [solver] {exc}") from None
    return RunConfig(
        name, params, solver, read("output", OUTPUT_DEFAULTS), read("convergence", CONVERGENCE_DEFAULTS), source
    )


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, str(path))


# -- snapshots --------------------------------------------------------------


def write_snapshot(path, values) -> None:
    """Write a (ny, nx) field as CSV; row k holds y index k, full precision."""
    values = np.atleast_2d(np.asarray(values, dtype=float))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for row in values:
            w.writerow([repr(float(v)) for v in row])


def read_snapshot(path) -> np.ndarray:
    with open(path, newline="") as fh:
        return np.array([[float(v) for v in row] for row in csv.reader(fh)], dtype=float)


def write_heatmap(path, values) -> None:
    """Min-max scaled PGM; the top raster row is the highest ``y``."""
    values = np.atleast_2d(np.asarray(values, dtype=float))
    lo, hi = float(values.min()), float(values.max())
    if hi > lo:
        img = np.round(255.0 * (values - lo) / (hi - lo))
    else:
        # constant field: no contrast to show, emit an all-zero image
        img = np.zeros_like(values)
    comment = f"linear min-max scaling: 0 -> {lo!r}, 255 -> {hi!r}"
    if hi == lo:
        comment += " (constant field, all pixels 0)"
    write_pgm(path, img[::-1].astype(np.uint8), comment=comment)


def write_fields(out: Path, fields: FieldSet, heatmaps: bool = False) -> list[Path]:
    """Per-level CSV snapshots of every field; returns the written paths."""
    written = []
    blocks = [("density", fields.p, 0), ("flux_x", fields.mx, 1), ("flux_y", fields.my, 1), ("phi", fields.phi, 1)]
    for name, arr, first in blocks:
        if arr is None or arr.size == 0:
            continue
        for k, level in enumerate(arr):
            path = out / f"{name}_n{first + k:04d}.csv"
            write_snapshot(path, level)
            written.append(path)
            if heatmaps and name == "density":
                write_heatmap(path.with_suffix(".pgm"), level)
    return written


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


def write_report(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(_jsonable(payload), indent=1))


# -- commands ---------------------------------------------------------------


def cmd_solve(config_path, out, heatmaps: bool = False) -> int:
    run = load_config(config_path)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    problem = run.problem()
    t0 = time.perf_counter()
    fields, report = solve(problem, run.solver)
    elapsed = time.perf_counter() - t0
    if run.output["snapshots"]:
        write_fields(out, fields, heatmaps or run.output["heatmaps"])
    if run.output["report"]:
        payload = {
            "problem": problem.name,
            "alpha": problem.alpha,
            "grid": dataclasses.asdict(problem.grid),
            "seconds": elapsed,
            "config": run.echo(),
            **report.as_dict(),
        }
        write_report(out / "report.json", payload)
    status = "converged" if report.converged else f"stopped ({report.reason})"
    print(f"{problem.name} alpha={problem.alpha}: {status} after {report.iterations} iterations in {elapsed:.1f}s")
    return 0


def _cache_name(run: RunConfig, alpha: float, n: int) -> str:
    s = run.solver
    return f"{run.preset}_a{alpha:g}_n{n}_tc{s.tol_change:g}_tr{s.tol_constraint:g}_it{s.max_iters}.npz"


def reference_solution(run: RunConfig, alpha: float, cache_dir: Path | None):
    """Fine-grid solve, reused from ``cache_dir`` when present."""
    n = run.convergence["reference_n"]
    problem = run.problem(n=n, alpha=alpha)
    path = cache_dir / _cache_name(run, alpha, n) if cache_dir else None
    if path is not None and path.exists():
        data = np.load(path)
        log.info("reference loaded from %s", path)
        return FieldSet(problem.grid, data["p"], data["mx"], data["my"], data["phi"]), json.loads(str(data["report"]))
    fields, report = solve(problem, run.solver)
    meta = {"iterations": report.iterations, "reason": report.reason, "residual": report.constraint_residual_history[-1]}
    if path is not None:
        cache_dir.mkdir(parents=True, exist_ok=True)
        np.savez(path, p=fields.p, mx=fields.mx, my=fields.my, phi=fields.phi, report=json.dumps(meta))
    return fields, meta


def convergence_study(run: RunConfig, cache_dir: Path | None = None) -> list[dict]:
    """Error table rows for every (alpha, grid) pair of ``run``."""
    rows = []
    grids = run.convergence["grids"]
    for alpha in run.convergence["alphas"]:
        exact = alpha == 1.0 and run.preset in ("test_5_2_1", "convergence")
        ref = None
        if not exact:
            ref, meta = reference_solution(run, alpha, cache_dir)
            log.info("reference alpha=%g: %s", alpha, meta)
        errs = []
        for n in grids:
            fields, report = solve(run.problem(n=n, alpha=alpha), run.solver)
            errs.append(exact_errors(fields) if exact else reference_errors(fields, ref))
            rows.append(
                dict(alpha=alpha, n=n, iterations=report.iterations, converged=report.converged, rho_error=errs[-1][0], m_error=errs[-1][1])
            )
        block = rows[-len(grids) :]
        for row, o_rho, o_m in zip(block, observed_orders(grids, [e[0] for e in errs]), observed_orders(grids, [e[1] for e in errs])):
            row["rho_order"], row["m_order"] = o_rho, o_m
            row["reference"] = "exact" if exact else f"n={run.convergence['reference_n']}"
    return rows


def write_error_table(path: Path, rows: list[dict]) -> None:
    cols = ["alpha", "n", "rho_error", "rho_order", "m_error", "m_order", "iterations", "converged", "reference"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in rows:
            w.writerow(["" if r[c] is None else (repr(r[c]) if isinstance(r[c], float) else r[c]) for c in cols])


def cmd_convergence(config_path, out) -> int:
    run = load_config(config_path)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    cache = run.convergence["reference_cache"]
    cache_dir = Path(cache) if cache else out / "reference_cache"
    rows = convergence_study(run, cache_dir)
    write_error_table(out / "errors.csv", rows)
    write_report(out / "report.json", {"config": run.echo(), "rows": rows})
    for r in rows:
        o = "" if r["rho_order"] is None else f" order {r['rho_order']:.2f}"
        print(f"alpha={r['alpha']:g} n={r['n']}: rho {r['rho_error']:.3e}{o}, m {r['m_error']:.3e}")
    return 0


# -- validation -------------------------------------------------------------


def _flipped_divergence(grid, mx, my):
    # test hook: the y stencil with its sign reversed
    return divergence(grid, mx, -np.asarray(my))


CORRUPTIONS = {"stencil_sign": _flipped_divergence}


def validation_suite(seed: int = 0, corrupt: str | None = None) -> dict:
    """Randomized property checks; returns ``{name: (passed, detail)}``."""
    rng = np.random.default_rng(seed)
    div = CORRUPTIONS[corrupt] if corrupt else divergence
    results = {}
    sweep = [(nx, ny, nt, a) for nx in (1, 3) for ny in (1, 2) for nt in (1, 4) for a in (0.3, 0.9, 1.0)]

    worst = 0.0
    for nx, ny, nt, a in sweep:
        g = build_grid(nx, ny, nt)
        k = build_kernel(a, g.dt, g.nt)
        for _ in range(5):
            rho, phi = rng.standard_normal(g.shape("p")), rng.standard_normal(g.shape("phi"))
            mx, my = rng.standard_normal(g.shape("mx")), rng.standard_normal(g.shape("my"))
            lhs_t = np.sum(phi * caputo_forward(k, rho))
            rhs_t = np.sum(rho[1:] * caputo_backward(k, phi)) - np.sum(k.g[:, None, None] * rho[0] * phi)
            gx, gy = gradient_adjoint(g, phi)
            lhs_s = np.sum(phi * div(g, mx, my))
            rhs_s = -np.sum(mx * gx) - np.sum(my * gy)
            for lhs, rhs in ((lhs_t, rhs_t), (lhs_s, rhs_s)):
                worst = max(worst, abs(lhs - rhs) / max(abs(lhs), abs(rhs), 1e-300))
    results["adjoint"] = (worst <= 1e-12, f"max relative mismatch {worst:.2e}")

    worst = 0.0
    for a in (0.1, 0.3, 0.5, 0.7, 0.9, 1.0):
        k = build_kernel(a, 1.0 / 16, 16)
        t = np.linspace(0, 1, 17)
        worst = max(worst, np.max(np.abs(caputo_forward(k, np.full(17, 2.5)))))
        exact = t[1:] ** (1 - a) / math.gamma(2 - a)
        worst = max(worst, np.max(np.abs(caputo_forward(k, t) - exact) / exact))
    results["l1_exactness"] = (worst <= 1e-12, f"max error {worst:.2e}")

    worst = 0.0
    for nx, ny, nt, a in sweep:
        g = build_grid(nx, ny, nt)
        op = ConstraintOperator(g, build_kernel(a, g.dt, g.nt))
        u, v = rng.standard_normal(g.shape("phi")), rng.standard_normal(g.shape("phi"))
        ku, kv = op.apply_KKt(u), op.apply_KKt(v)
        worst = max(worst, abs(np.sum(ku * v) - np.sum(u * kv)) / abs(np.sum(ku * v)))
        if np.sum(u * ku) <= 0:
            worst = np.inf
    results["spd"] = (worst <= 1e-12, f"max symmetry mismatch {worst:.2e}")

    g = build_grid(4, 4, 4)
    k = build_kernel(0.6, g.dt, g.nt)
    f = FieldSet(
        g, rng.uniform(0.5, 2, g.shape("p")), rng.standard_normal(g.shape("mx")), rng.standard_normal(g.shape("my")),
        rng.standard_normal(g.shape("phi")),
    )
    fi = InteractionSpec(0.5, 1.0, "quadratic", rng.uniform(0, 1, (4, 4)))
    grads = dict(zip(("p", "mx", "my"), lagrangian_gradient(f, fi, k, g)))
    worst, h = 0.0, 1e-6
    for _ in range(50):
        kind = ("p", "mx", "my")[rng.integers(3)]
        idx = tuple(rng.integers(s) for s in grads[kind].shape)
        pos = (idx[0] + 1,) + idx[1:] if kind == "p" else idx
        plus, minus = f.copy(), f.copy()
        getattr(plus, kind)[pos] += h
        getattr(minus, kind)[pos] -= h
        fd = (lagrangian(plus, fi, k, g) - lagrangian(minus, fi, k, g)) / (2 * h)
        worst = max(worst, abs(fd - grads[kind][idx]) / max(abs(fd), 1e-8))
    form_gap = abs(lagrangian(f, fi, k, g) - lagrangian_adjoint_form(f, fi, k, g))
    results["gradient"] = (worst <= 1e-6 and form_gap <= 1e-10, f"max relative FD mismatch {worst:.2e}")

    worst = 0.0
    for a in (0.4, 1.0):
        g = build_grid(3, 3, 5)
        op = ConstraintOperator(g, build_kernel(a, g.dt, g.nt))
        mx, my = rng.standard_normal(g.shape("mx")), rng.standard_normal(g.shape("my"))
        d = div(g, mx, my)
        p = np.empty(g.shape("p"))
        p[0] = rng.uniform(0.5, 1.5, (3, 3))
        for n in range(1, g.nt + 1):
            p[n] = (-d[n - 1] - np.tensordot(op.A[n - 1, :n], p[:n], axes=(0, 0))) / op.A[n - 1, n]
        m0 = total_mass(p, 0, g)
        worst = max(worst, max(abs(total_mass(p, n, g) - m0) / m0 for n in range(g.nt + 1)))
    results["mass"] = (worst <= 1e-12, f"max relative mass drift {worst:.2e}")

    worst = 0.0
    for a in (0.3, 1.0):
        g = build_grid(1, 1, 6)
        op = ConstraintOperator(g, build_kernel(a, g.dt, g.nt))
        r = rng.standard_normal(g.shape("phi"))
        z = MultiplierSolver(op, 1e-12, 100).solve(r).ravel()
        direct = np.linalg.solve(op.A @ op.A.T, r.ravel())
        worst = max(worst, np.max(np.abs(z - direct)) / np.max(np.abs(direct)))
    results["inner_solve"] = (worst <= 1e-10, f"max relative error vs dense {worst:.2e}")
    return results


def cmd_validate(seed: int = 0, corrupt: str | None = None) -> int:
    results = validation_suite(seed, corrupt)
    for name, (ok, detail) in results.items():
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    return 0 if all(ok for ok, _ in results.values()) else 1


# -- entry point ------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fracot", description="Fractional optimal transport and mean-field planning")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)
    s = sub.add_parser("solve", help="solve one configured problem")
    s.add_argument("config")
    s.add_argument("--out", default="out")
    s.add_argument("--heatmaps", action="store_true", help="also write PGM heatmaps of the density")
    c = sub.add_parser("convergence", help="error table over a grid sequence")
    c.add_argument("config")
    c.add_argument("--out", default="out")
    v = sub.add_parser("validate", help="randomized self-test of the discrete identities")
    v.add_argument("--seed", type=int, default=0, help="seed for the random test inputs")
    v.add_argument("--corrupt", choices=sorted(CORRUPTIONS), help=argparse.SUPPRESS)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        if args.command == "solve":
            return cmd_solve(args.config, args.out, args.heatmaps)
        if args.command == "convergence":
            return cmd_convergence(args.config, args.out)
        return cmd_validate(args.seed, args.corrupt)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
