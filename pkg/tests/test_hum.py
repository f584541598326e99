import numpy as np
import pytest

from stochtransport.backward import backward_solve
from stochtransport.forward import (CoefficientSet, ControlPair, build_steps, forward_solve, inner,
                                    random_coefficients)
from stochtransport.geometry import build_geometry
from stochtransport.hum import (GramianOperator, conjugate_gradient, hum_solve, least_squares_solve,
                                min_gramian_eig, terminal_inner)
from stochtransport.tree import build_tree


@pytest.fixture
def setup(rng):
    g = build_geometry(1, (-0.5, 0.5), 8)
    tree = build_tree(1.5, 6)
    co = random_coefficients(g, tree, rng, bound=0.5)
    steps = build_steps(g, co, tree)
    return g, tree, co, steps, GramianOperator(g, tree, steps)


def test_zero_in_zero_out(setup):
    g, tree, co, steps, op = setup
    assert np.all(op(np.zeros(op.shape)) == 0)
    sol = hum_solve(np.zeros(g.field_shape), 0.0, CoefficientSet(), tree, g)
    assert sol.cg_iterations == 0 and sol.terminal_error == 0 and sol.control_energy == 0


def test_quadratic_form_independent(setup, rng):
    g, tree, co, steps, op = setup
    zT = rng.standard_normal(op.shape)
    bwd = backward_solve(zT, steps, tree, g)
    inf = steps[0].inflow
    direct = 0.0
    for k in range(tree.n_steps):
        tr = bwd.trace[k]
        direct += tree.dt * float(np.mean(np.sum((tr ** 2).mean(axis=1) * inf.weight, axis=-1)))
        direct += tree.dt * float(np.mean(np.sum(bwd.Z[k] ** 2 * g.mu, axis=(1, 2))))
    assert terminal_inner(op(zT), zT, g) == pytest.approx(direct, rel=1e-11)
    assert op.quadratic_form(zT) == pytest.approx(direct, rel=1e-11)


def test_symmetry_and_psd(setup, rng):
    g, tree, co, steps, op = setup
    for _ in range(5):
        a, b = rng.standard_normal((2,) + op.shape)
        ab, ba = terminal_inner(op(a), b, g), terminal_inner(op(b), a, g)
        assert abs(ab - ba) <= 1e-10 * max(abs(ab), 1e-300)
        assert terminal_inner(op(a), a, g) >= -1e-12


def test_manufactured_target_and_bookkeeping(setup, rng):
    g, tree, co, steps, op = setup
    y1 = op(rng.standard_normal(op.shape))
    sol = hum_solve(np.zeros(g.field_shape), y1, CoefficientSet(), tree, g, tol=1e-10, max_iter=500,
                    steps=build_steps(g, CoefficientSet(), tree))
    assert sol.terminal_error <= 1e-8
    assert abs(sol.terminal_error - sol.cg_residual) <= 1e-8


def test_cg_error_monotone_in_gramian_norm(setup, rng):
    g, tree, co, steps, op = setup
    x_true = rng.standard_normal(op.shape)
    res = conjugate_gradient(op, op(x_true), g, tol=1e-12, max_iter=60, keep_iterates=True)
    errs = [terminal_inner(op(x - x_true), x - x_true, g) for x in res.iterates]
    assert all(b <= a * (1 + 1e-9) + 1e-14 for a, b in zip(errs, errs[1:]))


def test_hum_control_has_minimal_energy(setup, rng):
    g, tree, co, steps, op = setup
    y0 = np.cos(np.pi * g.centers[:, 0])
    sol = hum_solve(y0, 0.0, co, tree, g, tol=1e-11, max_iter=500, op=op)
    nf = steps[0].inflow.size
    for _ in range(3):
        w = ControlPair([rng.standard_normal((1 << k, op_.m, nf)) for k, op_ in enumerate(steps)],
                        [rng.standard_normal((1 << k,) + g.field_shape) for k in range(tree.n_steps)])
        action = forward_solve(np.zeros(g.field_shape), None, w, tree, g, steps, with_source=False).terminal
        zeta = conjugate_gradient(op, action, g, tol=1e-12, max_iter=500).x
        corr = op.controls(backward_solve(zeta, steps, tree, g))
        alt = ControlPair([a + b - c for a, b, c in zip(sol.controls.u, w.u, corr.u)],
                          [a + b - c for a, b, c in zip(sol.controls.v, w.v, corr.v)])
        yT = forward_solve(y0, co, alt, tree, g, steps).terminal
        assert np.sqrt(inner(yT, yT, g)) <= 1e-6
        assert op.control_energy(alt) >= sol.control_energy


def test_characteristics_control():
    g = build_geometry(1, (-0.5, 0.5), 8, velocities=[1])
    tree = build_tree(1.5, 12)
    y0 = np.sin(np.pi * g.centers[:, 0])
    y1 = np.cos(np.pi * g.centers[:, 0])[:, None]
    n = tree.n_steps
    # a value injected at level k sits in cell n-1-k at time T
    u = [np.full((1 << k, 1, 1), y1[n - 1 - k, 0] if n - 1 - k < 8 else 0.0) for k in range(n)]
    explicit = forward_solve(y0, CoefficientSet(), ControlPair(u=u), tree, g).terminal
    assert np.allclose(explicit, y1[None], atol=1e-14)
    sol = hum_solve(y0, y1, CoefficientSet(), tree, g, tol=1e-12, max_iter=300)
    assert np.max(np.abs(sol.y_terminal - explicit)) <= 1e-6


def test_min_eig_toy_matches_dense():
    g = build_geometry(1, (-0.5, 0.5), 1, velocities=[1])
    tree = build_tree(0.7, 1)
    co = CoefficientSet(a1=0.4, a3=0.8)
    op = GramianOperator(g, tree, build_steps(g, co, tree))
    A = op.dense()
    lam_dense = np.linalg.eigvalsh(0.5 * (A + A.T))[0]
    lam, const, _ = min_gramian_eig(op, iterations=50)
    assert abs(lam - lam_dense) <= 1e-9
    assert const == pytest.approx(lam ** -0.5)


def test_least_squares_matches_pseudo_inverse(rng):
    g = build_geometry(1, (-0.5, 0.5), 4)
    tree = build_tree(0.6, 3)
    op = GramianOperator(g, tree, build_steps(g, CoefficientSet(), tree))
    A = op.dense()
    b = rng.standard_normal(op.shape)
    x = least_squares_solve(op, b, g, tol=1e-13, max_iter=500).x
    ref = np.linalg.pinv(A, rcond=1e-10) @ b.ravel()
    assert np.allclose(A @ x.ravel(), A @ ref, atol=1e-8)
