"""
Observability above and below the crossing time
===============================================

The smallest Gramian eigenvalue measures how well the boundary trace and the
martingale part Z observe the terminal datum.  Below T = 2R a signal starting
near the outflow side never reaches the inflow boundary, and lambda_min drops
to zero as the grid resolves that region.  Above 2R it stays positive, though
first-order upwinding damps grid-scale modes on fine meshes.
"""
import numpy as np

from stochtransport.forward import CoefficientSet, build_steps
from stochtransport.geometry import build_geometry
from stochtransport.hum import GramianOperator, min_gramian_eig
from stochtransport.tree import build_tree


def lambda_min(T, n_steps, n_cells):
    g = build_geometry(1, (-0.5, 0.5), n_cells)
    tree = build_tree(T, n_steps)
    op = GramianOperator(g, tree, build_steps(g, CoefficientSet(), tree))
    if op.shape[0] * g.n_active * g.n_vel <= 1024:
        A = op.dense()
        return max(np.linalg.eigvalsh(0.5 * (A + A.T))[0], 0.0)
    return min_gramian_eig(op, iterations=15)[0]


print("T = 0.6 (below 2R = 1)")
for ns, nc in [(1, 2), (2, 4), (3, 8)]:
    print(f"  n_steps={ns:2d} cells={nc:3d}  lambda_min={lambda_min(0.6, ns, nc):.3e}")

print("T = 1.5 (above 2R)")
for ns, nc in [(6, 8), (8, 16), (10, 32)]:
    print(f"  n_steps={ns:2d} cells={nc:3d}  lambda_min={lambda_min(1.5, ns, nc):.3e}")
