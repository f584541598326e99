"""Discrete witnesses of the non-controllability results.

Fixed-depth tree systems are finite dimensional and may well be controllable,
so nothing here claims impossibility at a given depth.  What the tree can
witness exactly is the mean obstruction (a control acting only through dB
cannot move the mean) and the representation of Peng's variable; what it can
witness empirically is growth of the minimal control energy with depth.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .forward import CoefficientSet, ControlPair, build_steps, expectation_field, forward_solve, inner
from .geometry import Geometry
from .hum import GramianOperator, least_squares_solve
from .tree import ScenarioTree, build_tree, martingale_representation, peng_integrand, peng_xi


@dataclass
class ObstructionReport:
    experiment: str
    depths: list
    residuals: list = field(default_factory=list)
    energies: list = field(default_factory=list)
    jensen_bound: float | None = None
    sign_changes: list = field(default_factory=list)
    details: dict = field(default_factory=dict)

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.depths, self.depths[1:])):
            raise ValueError(f"depths must be strictly increasing, got {self.depths}")

    def to_dict(self) -> dict:
        return asdict(self)

    def energy_nondecreasing(self, rtol: float = 0.0) -> bool:
        e = self.energies
        return all(b >= a * (1.0 - rtol) for a, b in zip(e, e[1:]))


# -- mean obstruction ------------------------------------------------------

def random_adapted_field(g: Geometry, tree: ScenarioTree, rng: np.random.Generator,
                         scale: float = 1.0) -> list:
    return [scale * rng.standard_normal((1 << k,) + g.field_shape) for k in range(tree.n_steps)]


def mean_obstruction_demo(tree: ScenarioTree, g: Geometry, a3=1.0, y1=1.0, cg_budget: int = 200,
                          coeffs: CoefficientSet | None = None, n_random: int = 20,
                          rng: np.random.Generator | None = None) -> ObstructionReport:
    """Single diffusion control: the mean of y(T) is pinned at zero.

    (i) for ``n_random`` random adapted v, the largest |E y(T)| is recorded;
    (ii) E|y(T) - y1|^2 is minimized over v by MINRES on the v-only Gramian;
    (iii) the minimum is compared with the Jensen bound |E y1|^2.
    Drift coefficients in ``coeffs`` must be deterministic for (i) to hold.
    """
    rng = rng or np.random.Generator(np.random.Philox(0))
    coeffs = coeffs or CoefficientSet(a3=a3)
    if coeffs.a3 is None:
        coeffs = CoefficientSet(coeffs.a1, coeffs.a2, a3, None, coeffs.bounds)
    steps = build_steps(g, coeffs, tree)
    y0 = np.zeros(g.field_shape)
    worst_mean = 0.0
    for _ in range(n_random):
        v = random_adapted_field(g, tree, rng)
        path = forward_solve(y0, coeffs, ControlPair(v=v), tree, g, steps, with_source=False)
        worst_mean = max(worst_mean, float(np.max(np.abs(expectation_field(path)[-1]))))
    n = 1 << tree.n_steps
    target = np.broadcast_to(np.asarray(y1, dtype=float), (n,) + g.field_shape).copy()
    op = GramianOperator(g, tree, steps, boundary=False, diffusion=True)
    res = least_squares_solve(op, target, g, tol=1e-12, max_iter=cg_budget)
    reached = op(res.x)
    resid = reached - target
    resid_sq = inner(resid, resid, g)
    mean_t = target.mean(axis=0, keepdims=True)
    jensen = inner(mean_t, mean_t, g)
    energy = inner(reached, res.x, g)
    return ObstructionReport(
        "mean", [tree.n_steps], [resid_sq], [energy], jensen,
        details={"max_abs_mean": worst_mean, "cg_iterations": res.iterations,
                 "jensen_gap": resid_sq - jensen, "vacuous": bool(jensen == 0.0)})


# -- Peng's variable ---------------------------------------------------------

def sign_changes(seq) -> int:
    s = np.sign(np.asarray(seq, dtype=float))
    s = s[s != 0]
    return int(np.count_nonzero(s[1:] != s[:-1]))


def dyadic_switch_count(n_steps: int) -> int:
    """Switch times (1 - 2**-j) T seen on the grid kT/n: floor(log2 n).

    Every interval between consecutive switches before the last sample is at
    least T/n long, so none is skipped and the count is the index of the
    interval containing the last sample (n-1)T/n.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    return n_steps.bit_length() - 1


def peng_oscillation_report(depths, T: float = 1.0) -> ObstructionReport:
    depths = [int(d) for d in depths]
    counts, errors = [], []
    for d in depths:
        tree = build_tree(T, d)
        eta = peng_integrand(tree)
        _, rho = martingale_representation(peng_xi(tree), tree)
        errors.append(max(float(np.max(np.abs(r - e))) for r, e in zip(rho, eta)))
        counts.append(sign_changes([r[0] for r in rho]))
    return ObstructionReport(
        "peng", depths, sign_changes=counts,
        details={"integrand_error": errors, "expected_counts": [dyadic_switch_count(d) for d in depths]})


# -- energy growth for localized targets ------------------------------------

def bump(g: Geometry, lo: float, hi: float) -> np.ndarray:
    """(1 - s^2)^3 on [lo, hi] (first coordinate), zero outside, unit L^2 norm."""
    x = g.centers[:, 0]
    mid, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
    s = (x - mid) / half
    psi = np.where(np.abs(s) < 1.0, (1.0 - s * s) ** 3, 0.0)
    norm = math.sqrt(float(np.sum(psi * psi)) * g.cell_measure)
    if norm == 0.0:
        raise ValueError(f"support [{lo}, {hi}] contains no cell centers")
    return psi / norm


def localized_target_energy_growth(mode: str, G0=(-0.25, 0.25), depths=(2, 4, 6),
                                   cg_budget: int = 400, g: Geometry | None = None,
                                   T: float = 1.5, tol: float = 1e-10) -> ObstructionReport:
    """Minimal control energy for the target xi * psi at increasing depth.

    ``v_off_G0``: boundary control plus diffusion control switched off on G0,
    psi supported in G0.  ``drift_only``: boundary control plus a drift
    control, no diffusion control, a3 = 1, psi supported in the whole domain.
    The energy is <Lambda z, z> for the least-squares solution z.
    """
    from .geometry import build_geometry

    if mode not in ("v_off_G0", "drift_only"):
        raise ValueError(f"unknown mode {mode!r}")
    g = g or build_geometry(1, (-0.5, 0.5), 32)
    lo, hi = (G0 if mode == "v_off_G0" else (float(np.min(g.bounds)), float(np.max(g.bounds))))
    psi = bump(g, lo, hi)
    residuals, energies, iters, converged = [], [], [], []
    for d in depths:
        tree = build_tree(T, d)
        xi = peng_xi(tree)
        target = xi[:, None, None] * psi[None, :, None] * np.ones((1, 1, g.n_vel))
        if mode == "v_off_G0":
            coeffs = CoefficientSet()
            inside = (g.centers[:, 0] > lo) & (g.centers[:, 0] < hi)
            mask = np.repeat((~inside).astype(float)[:, None], g.n_vel, axis=1)
            steps = build_steps(g, coeffs, tree)
            op = GramianOperator(g, tree, steps, boundary=True, diffusion=True, v_mask=mask)
        else:
            coeffs = CoefficientSet(a3=1.0)
            steps = build_steps(g, coeffs, tree)
            op = GramianOperator(g, tree, steps, boundary=True, diffusion=False, drift=True)
        res = least_squares_solve(op, target, g, tol=tol, max_iter=cg_budget)
        reached = op(res.x)
        r = reached - target
        residuals.append(inner(r, r, g) / inner(target, target, g))
        energies.append(inner(reached, res.x, g))
        iters.append(res.iterations)
        converged.append(res.converged)
    return ObstructionReport(
        f"localized:{mode}", list(depths), residuals, energies,
        details={"cg_iterations": iters, "converged": converged, "G0": list(G0), "T": T,
                 "psi_l2": float(math.sqrt(np.sum(psi * psi) * g.cell_measure))})

