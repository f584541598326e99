"""
What the tree can witness about non-controllability
===================================================

1. With the noise control alone the mean of y(T) never moves.
2. Peng's terminal variable has an integrand that flips sign ever more often.
3. Localized targets xi * psi cost more control energy as the tree deepens.
"""
from stochtransport.geometry import build_geometry
from stochtransport.negative import localized_target_energy_growth, mean_obstruction_demo, peng_oscillation_report
from stochtransport.tree import build_tree

g = build_geometry(1, (-0.5, 0.5), 16)
rep = mean_obstruction_demo(build_tree(1.0, 6), g)
print(f"max |E y(T)| over random v: {rep.details['max_abs_mean']:.1e}")
print(f"best residual^2 {rep.residuals[0]:.4f} vs Jensen bound {rep.jensen_bound:.4f}")

rep = peng_oscillation_report([2, 4, 8, 16])
for d, n in zip(rep.depths, rep.sign_changes):
    print(f"depth {d:2d}: integrand sign changes {n}")

for mode in ("v_off_G0", "drift_only"):
    rep = localized_target_energy_growth(mode, depths=(2, 4, 6))
    print(mode, "energies:", ", ".join(f"{e:.3f}" for e in rep.energies))
