"""Control synthesis by duality: controllability Gramian and conjugate gradient.

The Gramian maps a terminal dual datum zT to the terminal state reached from
rest when the controls are read off the backward solution: the inflow trace
of z drives the boundary and Z drives the diffusion.  By exact discrete
duality

    E <Lambda zT, zT'> = sum_k dt (E <trace_k, trace_k'>_w + E <Z_k, Z_k'>),

so Lambda is symmetric positive semidefinite and a CG solve of
``Lambda zT = y1 - y_free(T)`` yields the controls of least energy.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse.linalg import LinearOperator, lsqr

from .backward import BackwardPath, backward_solve, boundary_inner
from .forward import (CoefficientSet, ControlPair, build_steps, forward_solve, inner)
from .geometry import Geometry
from .tree import ScenarioTree


class NumericalBreakdown(ArithmeticError):
    """Non-finite values or loss of positivity inside an iterative solve."""


class SingularGramianError(NumericalBreakdown):
    pass


class GramianOperator:
    """Control-to-terminal-state map composed with its adjoint.

    ``boundary``, ``diffusion`` and ``drift`` select which control channels
    are active; ``v_mask``/``drift_mask`` (shape cells x vel) zero a channel on
    part of the grid.
    """

    def __init__(self, g: Geometry, tree: ScenarioTree, steps: list, boundary: bool = True,
                 diffusion: bool = True, drift: bool = False, v_mask=None, drift_mask=None):
        self.g = g
        self.tree = tree
        self.steps = steps
        self.boundary = boundary
        self.diffusion = diffusion
        self.drift = drift
        self.v_mask = None if v_mask is None else np.asarray(v_mask, dtype=float)
        self.drift_mask = None if drift_mask is None else np.asarray(drift_mask, dtype=float)
        self.applies = 0

    @property
    def shape(self) -> tuple:
        return (1 << self.tree.n_steps,) + self.g.field_shape

    def controls(self, bwd: BackwardPath) -> ControlPair:
        mask = lambda a, m: a if m is None else a * m
        return ControlPair(
            u=list(bwd.trace) if self.boundary else None,
            v=[mask(Z, self.v_mask) for Z in bwd.Z] if self.diffusion else None,
            drift=[mask(F, self.drift_mask) for F in bwd.src_dual] if self.drift else None,
        )

    def control_energy(self, ctl: ControlPair) -> float:
        dt = self.tree.dt
        e = 0.0
        inf = self.steps[0].inflow
        for k in range(self.tree.n_steps):
            u, v, ell = ctl.level(k)
            if u is not None:
                e += dt * boundary_inner(u, u, inf)
            if v is not None:
                e += dt * inner(v, v, self.g)
            if ell is not None:
                e += dt * inner(ell, ell, self.g)
        return e

    def apply_with_controls(self, zT):
        bwd = backward_solve(zT, self.steps, self.tree, self.g)
        ctl = self.controls(bwd)
        fwd = forward_solve(np.zeros(self.g.field_shape), None, ctl, self.tree, self.g,
                            self.steps, with_source=False)
        self.applies += 1
        return fwd.terminal, ctl, bwd

    def apply(self, zT) -> np.ndarray:
        return self.apply_with_controls(zT)[0]

    __call__ = apply

    def quadratic_form(self, zT) -> float:
        """sum_k dt (|trace|_w^2 + |Z|^2) evaluated from the backward solve alone."""
        bwd = backward_solve(zT, self.steps, self.tree, self.g)
        return self.control_energy(self.controls(bwd))

    def dense(self) -> np.ndarray:
        """Matrix of the Gramian in the terminal inner product (small cases only)."""
        n = int(np.prod(self.shape))
        cols = []
        for i in range(n):
            e = np.zeros(n)
            e[i] = 1.0
            cols.append(self.apply(e.reshape(self.shape)).ravel())
        return np.array(cols).T


def terminal_inner(a, b, g: Geometry) -> float:
    return inner(a, b, g)


@dataclass
class CGResult:
    x: np.ndarray
    iterations: int
    converged: bool
    residual_norms: list = field(default_factory=list)
    iterates: list | None = None
    breakdown: bool = False


def conjugate_gradient(op, b, g: Geometry, tol: float = 1e-8, max_iter: int = 200, x0=None,
                       keep_iterates: bool = False, on_breakdown: str = "raise") -> CGResult:
    """CG in the terminal inner product; stops on ||r|| <= tol ||b||.

    On an inconsistent system (target outside the reachable set) the
    curvature along the search direction eventually drops to rounding level;
    ``on_breakdown="stop"`` then returns the current least-squares iterate
    instead of raising.
    """
    x = np.zeros_like(b) if x0 is None else x0.copy()
    r = b - op(x) if x0 is not None else b.copy()
    p = r.copy()
    rr = terminal_inner(r, r, g)
    bnorm = math.sqrt(terminal_inner(b, b, g))
    history = [math.sqrt(rr)]
    iterates = [x.copy()] if keep_iterates else None
    if bnorm == 0.0 or math.sqrt(rr) <= tol * bnorm:
        return CGResult(x, 0, True, history, iterates)
    for it in range(1, max_iter + 1):
        Ap = op(p)
        pAp = terminal_inner(p, Ap, g)
        if not np.isfinite(pAp):
            raise NumericalBreakdown("non-finite value in Gramian application")
        if pAp <= 1e-14 * rr and on_breakdown == "stop":
            return CGResult(x, it - 1, False, history, iterates, breakdown=True)
        if pAp <= 0.0:
            raise SingularGramianError(f"non-positive curvature {pAp:.3e} at CG iteration {it}")
        alpha = rr / pAp
        x = x + alpha * p
        r = r - alpha * Ap
        rr_new = terminal_inner(r, r, g)
        history.append(math.sqrt(rr_new))
        if keep_iterates:
            iterates.append(x.copy())
        if math.sqrt(rr_new) <= tol * bnorm:
            return CGResult(x, it, True, history, iterates)
        p = r + (rr_new / rr) * p
        rr = rr_new
    return CGResult(x, max_iter, False, history, iterates)


def least_squares_solve(op, b, g: Geometry, tol: float = 1e-10, max_iter: int = 400) -> CGResult:
    """Minimum-norm least-squares solution of ``op z = b`` for a possibly
    singular Gramian.

    CG is tried first; if it loses positive curvature (the target has a
    component outside the reachable set) the solve is redone with LSQR on the
    operator symmetrized for the terminal inner product.  Then ``op z`` is the
    projection of ``b`` onto the reachable set and ``<op z, z>`` the minimal
    control energy attaining it.
    """
    res = conjugate_gradient(op, b, g, tol=tol, max_iter=max_iter, on_breakdown="stop")
    if not res.breakdown:
        return res
    shape = b.shape
    omega = np.broadcast_to(g.mu, g.field_shape)[None] / shape[0]
    root = np.sqrt(np.broadcast_to(omega, shape)).ravel()
    n = root.size

    def matvec(y):
        return root * op((y / root).reshape(shape)).ravel()

    A = LinearOperator((n, n), matvec=matvec, rmatvec=matvec, dtype=float)
    out = lsqr(A, root * b.ravel(), atol=tol, btol=tol, iter_lim=max_iter)
    y, istop, iters = out[0], out[1], out[2]
    if not np.all(np.isfinite(y)):
        raise NumericalBreakdown("non-finite least-squares iterate")
    x = (y / root).reshape(shape)
    r = b - op(x)
    return CGResult(x, int(iters), istop in (1, 2), [math.sqrt(terminal_inner(r, r, g))])


@dataclass
class HumSolution:
    zT_star: np.ndarray
    controls: ControlPair
    terminal_error: float
    relative_error: float
    cg_iterations: int
    converged: bool
    control_energy: float
    cg_residual: float
    y_terminal: np.ndarray = field(repr=False, default=None)

    def summary(self) -> dict:
        return {
            "terminal_error": self.terminal_error,
            "relative_error": self.relative_error,
            "iterations": self.cg_iterations,
            "converged": self.converged,
            "control_energy": self.control_energy,
            "cg_residual": self.cg_residual,
        }


def hum_solve(y0, y1, coeffs: CoefficientSet, tree: ScenarioTree, g: Geometry, tol: float = 1e-8,
              max_iter: int = 200, steps=None, op: GramianOperator | None = None,
              substeps="auto") -> HumSolution:
    """Steer y0 to y1 (terminal field per leaf, or deterministic) with (u, v)."""
    coeffs = coeffs or CoefficientSet()
    if steps is None:
        steps = op.steps if op is not None else build_steps(g, coeffs, tree, substeps)
    if op is None:
        op = GramianOperator(g, tree, steps)
    shape = op.shape
    y1 = np.broadcast_to(np.asarray(y1, dtype=float), shape)
    free = forward_solve(y0, coeffs, None, tree, g, steps).terminal
    b = y1 - free
    res = conjugate_gradient(op, b, g, tol=tol, max_iter=max_iter)
    bwd = backward_solve(res.x, steps, tree, g)
    ctl = op.controls(bwd)
    # independent check: fresh forward solve with the synthesized controls
    yT = forward_solve(y0, coeffs, ctl, tree, g, steps).terminal
    err = math.sqrt(inner(yT - y1, yT - y1, g))
    ynorm = math.sqrt(inner(y1, y1, g))
    rel = err / ynorm if ynorm > 0 else err
    if not np.isfinite(err):
        raise NumericalBreakdown("non-finite terminal state after control synthesis")
    return HumSolution(res.x, ctl, err, rel, res.iterations, res.converged,
                       op.control_energy(ctl), res.residual_norms[-1], yT)


def min_gramian_eig(op: GramianOperator, iterations: int = 20, inner_tol: float = 1e-10,
                    inner_max_iter: int = 500, seed: int = 0, x0=None):
    """Smallest Gramian eigenvalue by inverse power iteration (one CG solve per step).

    Returns (lambda_min estimate, observability constant lambda_min**-0.5,
    history of Rayleigh quotients).
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    g = op.g
    rng = np.random.Generator(np.random.Philox(seed))
    x = rng.standard_normal(op.shape) if x0 is None else np.array(x0, dtype=float)
    x /= math.sqrt(terminal_inner(x, x, g))
    history = []
    lam = None
    for _ in range(iterations):
        res = conjugate_gradient(op, x, g, tol=inner_tol, max_iter=inner_max_iter)
        y = res.x
        ny = math.sqrt(terminal_inner(y, y, g))
        if not np.isfinite(ny) or ny == 0.0:
            raise SingularGramianError("inverse iteration produced a degenerate iterate")
        x = y / ny
        lam = terminal_inner(op(x), x, g)
        history.append(lam)
        if len(history) > 1 and abs(history[-2] - lam) <= 1e-10 * abs(lam):
            break
    if lam <= 0:
        raise SingularGramianError(f"Rayleigh quotient {lam:.3e} is not positive")
    return lam, 1.0 / math.sqrt(lam), history
