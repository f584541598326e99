import numpy as np
import pytest

from stochtransport.backward import (UndefinedRatioError, adjoint_from_forward, backward_solve,
                                     duality_pairing_check, duality_terms, hidden_regularity_trace)
from stochtransport.forward import (ConfigurationError, CoefficientSet, ControlPair, build_steps, forward_solve,
                                    forward_step_matrices, random_coefficients)
from stochtransport.geometry import build_geometry
from stochtransport.tree import build_tree


def random_instance(g, tree, rng, coeffs=None):
    co = coeffs or random_coefficients(g, tree, rng, source=True)
    steps = build_steps(g, co, tree)
    nf = steps[0].inflow.size
    ctl = ControlPair([rng.standard_normal((1 << k, op.m, nf)) for k, op in enumerate(steps)],
                      [rng.standard_normal((1 << k,) + g.field_shape) for k in range(tree.n_steps)],
                      [rng.standard_normal((1 << k,) + g.field_shape) for k in range(tree.n_steps)])
    y0 = rng.standard_normal(g.field_shape)
    zT = rng.standard_normal((1 << tree.n_steps,) + g.field_shape)
    fwd = forward_solve(y0, co, ctl, tree, g, steps)
    return y0, ctl, fwd, backward_solve(zT, steps, tree, g), steps


def test_adjoint_coefficient_signs():
    K = np.arange(4.0).reshape(1, 1, 2, 2)
    b = adjoint_from_forward(CoefficientSet(a1=2.0, a2=[K]))
    assert b.b1 == -2.0
    assert np.array_equal(b.b2[0], -np.swapaxes(K, -1, -2))
    z = adjoint_from_forward(CoefficientSet())
    assert z.b1 is None and z.b2 is None and z.b3 is None


def test_zero_terminal_gives_zero(line, rng):
    tree = build_tree(1.0, 4)
    steps = build_steps(line, random_coefficients(line, tree, rng), tree)
    bwd = backward_solve(np.zeros(line.field_shape), steps, tree, line)
    assert all(np.all(z == 0) for z in bwd.z) and all(np.all(Z == 0) for Z in bwd.Z)
    with pytest.raises(UndefinedRatioError):
        hidden_regularity_trace(bwd, steps)


def test_backward_characteristics():
    g = build_geometry(1, (-0.5, 0.5), 8, velocities=[1])
    tree = build_tree(1.0, 8)
    zT = np.zeros(g.field_shape)
    zT[6, 0] = 1.0
    steps = build_steps(g, CoefficientSet(), tree)
    bwd = backward_solve(zT, steps, tree, g)
    for k in range(3, 9):
        expected = np.zeros(g.field_shape)
        expected[6 - (8 - k), 0] = 1.0
        assert np.allclose(bwd.z[k], expected[None], atol=1e-15)
    assert all(np.all(Z == 0) for Z in bwd.Z)


def test_hidden_regularity_characteristics_ratio():
    g = build_geometry(1, (-0.5, 0.5), 8, velocities=[1])
    tree = build_tree(1.0, 8)
    zT = np.zeros(g.field_shape)
    zT[3, 0] = 1.0
    steps = build_steps(g, CoefficientSet(), tree)
    _, ratio = hidden_regularity_trace(backward_solve(zT, steps, tree, g), steps)
    # the unit pulse crosses the inflow face exactly once: dt * 2 / (h * 2)
    assert ratio == pytest.approx(1.0, abs=1e-14)


def test_dense_adjoint_chain(rng):
    g = build_geometry(1, (-0.5, 0.5), 3)
    tree = build_tree(0.3, 3)
    co = random_coefficients(g, tree, rng)
    steps = build_steps(g, co, tree, substeps=1)
    zT = rng.standard_normal((8,) + g.field_shape)
    n = g.n_active * g.n_vel
    z = zT.reshape(8, n)
    for k in range(2, -1, -1):
        nxt = np.empty((1 << k, n))
        for node in range(1 << k):
            M, N, _, _ = forward_step_matrices(g, co, tree, k, node=node)
            lo, hi = z[node], z[node + (1 << k)]
            E = 0.5 * (lo + hi)
            Z = (hi - lo) / (2 * tree.sqrt_dt)
            nxt[node] = M.T @ E + tree.dt * N.T @ Z
        z = nxt
    bwd = backward_solve(zT, steps, tree, g)
    assert np.max(np.abs(bwd.z[0].reshape(1, n) - z)) <= 1e-12


def test_duality_small(rng):
    g = build_geometry(1, (-0.5, 0.5), 2)
    tree = build_tree(0.5, 3)
    y0, ctl, fwd, bwd, _ = random_instance(g, tree, rng)
    assert duality_pairing_check(y0, ctl, fwd, bwd)[1] <= 1e-12


def test_duality_disk(disk, rng):
    tree = build_tree(0.8, 4)
    y0, ctl, fwd, bwd, _ = random_instance(disk, tree, rng)
    assert duality_pairing_check(y0, ctl, fwd, bwd)[1] <= 1e-10


def test_duality_boundary_only(rng):
    g = build_geometry(1, (-0.5, 0.5), 8, velocities=[1])
    tree = build_tree(1.0, 8)
    steps = build_steps(g, CoefficientSet(), tree)
    u = [rng.standard_normal((1 << k, 1, 1)) for k in range(8)]
    ctl = ControlPair(u=u)
    zT = np.zeros(g.field_shape)
    zT[2, 0] = 1.0
    fwd = forward_solve(np.zeros(g.field_shape), CoefficientSet(), ctl, tree, g, steps)
    bwd = backward_solve(zT, steps, tree, g)
    t = duality_terms(np.zeros(g.field_shape), ctl, fwd, bwd)
    assert t["internal"] == 0 and t["source"] == 0 and t["initial"] == 0
    assert t["boundary"] != 0
    assert t["terminal"] == pytest.approx(t["boundary"], rel=1e-13)


def test_mismatched_paths_rejected(line, rng):
    y0, ctl, fwd, _, _ = random_instance(line, build_tree(1.0, 3), rng)
    other = build_tree(1.0, 4)
    bwd = backward_solve(np.ones(line.field_shape), build_steps(line, CoefficientSet(), other), other, line)
    with pytest.raises(ConfigurationError):
        duality_pairing_check(y0, ctl, fwd, bwd)


def test_linearity_and_deterministic_Z(line, rng):
    tree = build_tree(1.0, 4)
    steps = build_steps(line, CoefficientSet(a1=0.3, a3=0.5), tree)
    a, b = rng.standard_normal((2, 16) + line.field_shape)
    pa, pb = backward_solve(a, steps, tree, line), backward_solve(b, steps, tree, line)
    pm = backward_solve(2 * a - b, steps, tree, line)
    assert np.max(np.abs(2 * pa.z[0] - pb.z[0] - pm.z[0])) <= 1e-12
    det = backward_solve(a[0], steps, tree, line)
    assert all(np.max(np.abs(Z)) <= 1e-13 for Z in det.Z)


def test_hidden_regularity_stable_under_refinement(rng):
    ratios = []
    for ns, nc in [(8, 16), (10, 32)]:
        g = build_geometry(1, (-0.5, 0.5), nc)
        tree = build_tree(1.5, ns)
        co = CoefficientSet(a1=0.5, a3=0.5)
        steps = build_steps(g, co, tree)
        worst = 0.0
        for _ in range(100):
            zT = rng.standard_normal((1 << ns,) + g.field_shape)
            worst = max(worst, hidden_regularity_trace(backward_solve(zT, steps, tree, g), steps)[1])
        ratios.append(worst)
    assert np.all(np.isfinite(ratios))
    assert 0.5 <= ratios[0] / ratios[1] <= 2.0
