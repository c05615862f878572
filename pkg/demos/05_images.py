"""Transport between two small grayscale images, with and without a
preference field that keeps the mass on the bright pixels of either image.

Uses synthetic 32x32 images; pass two PGM paths to use your own:

    python 05_images.py a.pgm b.pgm

The run is capped at 5000 iterations, so it is far from converged: the
frames show the qualitative path, and per-level mass is off by a few
percent. Raise ``max_iters`` for a tighter solution.
"""
import sys
from pathlib import Path

from fracot import SolverConfig, solve
from fracot.cli import write_heatmap
from fracot.problems import image_problem, read_pgm, synthetic_images

if len(sys.argv) == 3:
    img0, img1 = read_pgm(sys.argv[1]), read_pgm(sys.argv[2])
else:
    img0, img1 = synthetic_images(32)

out = Path(__file__).parent / "image_frames"
out.mkdir(exist_ok=True)
for mfp in (False, True):
    prob = image_problem(img0, img1, nt=12, alpha=0.8, mfp=mfp)
    fields, report = solve(prob, SolverConfig(max_iters=5000, density_step="implicit"))
    tag = "mfp" if mfp else "ot"
    print(f"{tag}: {report.reason} after {report.iterations} iterations, final residual {report.constraint_residual_history[-1]:.2e}")
    for k in (0, 3, 6, 9, 12):
        write_heatmap(out / f"{tag}_{k:02d}.pgm", fields.p[k])
    mass = fields.p.sum(axis=(1, 2)) * prob.grid.dx * prob.grid.dy
    print(f"   mass per level ranges over [{mass.min():.4f}, {mass.max():.4f}]")
print(f"heatmaps written to {out}/")
