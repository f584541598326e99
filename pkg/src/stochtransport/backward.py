"""Backward stochastic transport equation as the exact discrete adjoint.

Going down one level, with ``E`` the conditional mean of ``z_{k+1}`` and
``Zc = E[z_{k+1} dB] / dt``::

    Z_k = Zc,    z_k = M_k^T E + dt N_k^T Zc

so that discrete integration by parts against the forward scheme is exact.
The boundary trace observed at level k is ``B_k^* E``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .forward import (CoefficientSet, ConfigurationError, ControlPair, StatePath, build_steps,
                      inner)
from .geometry import Geometry, inflow_set
from .tree import ScenarioTree, conditional_expectation, increment_projection


class UndefinedRatioError(ArithmeticError):
    """Hidden-regularity ratio requested for a zero terminal datum."""


@dataclass
class BackwardCoefficientSet:
    b1: object = None
    b2: object = None
    b3: object = None
    b4: object = None

    def r2(self, norms: dict) -> float:
        return sum(norms.get(n, 0.0) ** 4 for n in ("b1", "b3", "b4")) + norms.get("b2", 0.0) + 1.0


def _neg(spec):
    if spec is None:
        return None
    if callable(spec):
        return lambda *a: -np.asarray(spec(*a))
    if isinstance(spec, (list, tuple)):
        return [-np.asarray(s) for s in spec]
    return -np.asarray(spec)


def _neg_swap(spec):
    if spec is None:
        return None
    if callable(spec):
        return lambda t, x, U, V: -np.asarray(spec(t, x, V, U))
    if isinstance(spec, (list, tuple)):
        return [-np.swapaxes(np.asarray(s), -1, -2) for s in spec]
    return -np.asarray(spec)


def adjoint_from_forward(coeffs: CoefficientSet) -> BackwardCoefficientSet:
    """Continuous dual coefficients b1 = -a1, b2(U,V) = -a2(V,U), b3 = -a3, b4 = 0.

    Reporting only: the backward recursion itself uses the transposed step maps.
    """
    return BackwardCoefficientSet(_neg(coeffs.a1), _neg_swap(coeffs.a2), _neg(coeffs.a3), None)


def backward_norms(coeffs: CoefficientSet, g: Geometry, tree: ScenarioTree) -> dict:
    n = coeffs.sup_norms(g, tree)
    return {"b1": n["a1"], "b2": n["a2"], "b3": n["a3"], "b4": 0.0}


@dataclass
class BackwardPath:
    z: list  # levels 0..n
    Z: list  # levels 0..n-1
    E: list  # conditional means of z_{k+1}, levels 0..n-1
    trace: list  # B_k^* E_k, levels 0..n-1
    src_dual: list  # F_k^* E_k
    tree: ScenarioTree
    g: Geometry

    @property
    def zT(self):
        return self.z[-1]


def _as_terminal(zT, g: Geometry, tree: ScenarioTree) -> np.ndarray:
    zT = np.asarray(zT, dtype=float)
    n = 1 << tree.n_steps
    if zT.shape == g.field_shape:
        return np.broadcast_to(zT, (n,) + g.field_shape).copy()
    if zT.shape == (n,) + g.field_shape:
        return zT
    raise ValueError(f"terminal datum shape {zT.shape} incompatible with ({n},) + {g.field_shape}")


def backward_solve(zT, steps: list, tree: ScenarioTree, g: Geometry) -> BackwardPath:
    if len(steps) != tree.n_steps:
        raise ConfigurationError(f"{len(steps)} step maps for a tree with {tree.n_steps} levels")
    z = _as_terminal(zT, g, tree)
    zs = [None] * (tree.n_steps + 1)
    Zs, Es, traces, srcs = ([None] * tree.n_steps for _ in range(4))
    zs[-1] = z
    for k in range(tree.n_steps - 1, -1, -1):
        op = steps[k]
        e = conditional_expectation(z)
        Zc = increment_projection(z, tree)
        mt, tr, fd = op.adjoint(e)
        z = mt if op.a3 is None else mt + tree.dt * op.a3 * Zc
        zs[k], Zs[k], Es[k], traces[k], srcs[k] = z, Zc, e, tr, fd
    return BackwardPath(zs, Zs, Es, traces, srcs, tree, g)


def boundary_inner(a, b, steps_or_inflow) -> float:
    """E <a, b>_w over inflow faces with weight (-U.nu) * face measure * w_j.

    Arrays are (nodes, faces) or (nodes, sub-steps, faces); sub-steps are
    averaged so that ``dt * boundary_inner`` is the time integral over a level.
    """
    inf = getattr(steps_or_inflow, "inflow", steps_or_inflow)
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim == 2 and b.ndim == 3:
        a = a[:, None, :]
    if b.ndim == 2 and a.ndim == 3:
        b = b[:, None, :]
    prod = a * b * inf.weight
    if prod.ndim == 3:
        prod = prod.mean(axis=1)
    n = prod.shape[0]
    return float(np.sum(prod) / n)


def duality_terms(y0, controls: ControlPair | None, fwd: StatePath, bwd: BackwardPath) -> dict:
    """Both sides of E<y(T), zT> - <y0, z(0)> = sum_k dt (E<u,B*E> + E<v,Z> + E<f,F*E>)."""
    if fwd.steps is None or len(fwd.steps) != len(bwd.Z) or fwd.tree != bwd.tree:
        raise ConfigurationError("forward and backward paths use different step data")
    g, dt = fwd.g, fwd.tree.dt
    controls = controls or ControlPair()
    lhs_T = inner(fwd.terminal, bwd.zT, g)
    lhs_0 = inner(fwd.y[0], bwd.z[0], g)
    bnd = ctl = src = 0.0
    for k, op in enumerate(fwd.steps):
        u, v, ell = controls.level(k)
        if u is not None:
            bnd += dt * boundary_inner(u, bwd.trace[k], op)
        if v is not None:
            ctl += dt * inner(v, bwd.Z[k], g)
        f = op.f
        if ell is not None:
            f = ell if f is None else f + ell
        if f is not None:
            src += dt * inner(np.broadcast_to(f, bwd.src_dual[k].shape), bwd.src_dual[k], g)
    return {"terminal": lhs_T, "initial": lhs_0, "boundary": bnd, "internal": ctl, "source": src}


def duality_pairing_check(y0, controls: ControlPair | None, fwd: StatePath, bwd: BackwardPath):
    """Return (absolute residual, relative residual) of the discrete duality identity."""
    t = duality_terms(y0, controls, fwd, bwd)
    lhs = t["terminal"] - t["initial"]
    rhs = t["boundary"] + t["internal"] + t["source"]
    scale = sum(abs(v) for v in t.values())
    res = abs(lhs - rhs)
    return res, (res / scale if scale > 0 else 0.0)


def hidden_regularity_trace(path: BackwardPath, steps: list | None = None):
    """Boundary trace of z on the inflow set and |z|_w^2 / E|zT|^2."""
    g, dt = path.g, path.tree.dt
    inf = inflow_set(g) if steps is None else steps[0].inflow
    trace_sq = sum(dt * boundary_inner(tr, tr, inf) for tr in path.trace)
    zt_sq = inner(path.zT, path.zT, g)
    if zt_sq == 0.0:
        raise UndefinedRatioError("E|zT|^2 = 0: hidden-regularity ratio undefined")
    return path.trace, trace_sq / zt_sq


def backward_from_coefficients(zT, coeffs: CoefficientSet, tree: ScenarioTree, g: Geometry,
                               substeps="auto") -> BackwardPath:
    return backward_solve(zT, build_steps(g, coeffs, tree, substeps), tree, g)
