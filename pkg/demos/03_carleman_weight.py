"""
A Carleman weight on backward paths
===================================

theta = exp(lam (|x|^2 - c (t - T/2)^2)) with cT > 2R.  For zero
coefficients the weighted terminal estimate should hold with room to spare;
epsilon is the discretization slack of the energy identity behind it.
"""
import numpy as np

from stochtransport.backward import backward_solve
from stochtransport.carleman import CarlemanWeight, carleman_sides, random_terminal_data
from stochtransport.forward import CoefficientSet, build_steps
from stochtransport.geometry import build_geometry
from stochtransport.tree import build_tree

g = build_geometry(1, (-0.5, 0.5), 32)
tree = build_tree(1.5, 10)
steps = build_steps(g, CoefficientSet(), tree)
w = CarlemanWeight.for_geometry(g, tree.T, lam=1.0)
print(f"c = {w.c:.4f}, cT = {w.c * tree.T:.3f} > 2R = {2 * g.R}")

rng = np.random.Generator(np.random.Philox(3))
for i in range(5):
    s = carleman_sides(backward_solve(random_terminal_data(g, tree, rng), steps, tree, g), w, g, steps)
    print(f"sample {i}: terminal {s.terminal_term:8.4f}  rhs {s.rhs:9.4f}  "
          f"defect {s.defect:9.4f}  eps {s.epsilon:.2e}  observability holds: {s.observability['holds']}")
