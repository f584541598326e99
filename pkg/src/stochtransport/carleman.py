"""Carleman weight, the weighted transport identity and the estimate chain.

The weight is ``l = lam (|x|^2 - c (t - T/2)^2)`` with ``theta = exp(l)``.
For this quadratic weight every derivative is a polynomial:

    l_t = -2 lam c (t - T/2),   U.grad l = 2 lam U.x,
    l_tt = -2 lam c,            U.grad(U.grad l) = 2 lam |U|^2,   U.grad l_t = 0.

With ``p = theta q`` the identity

    -theta W p (dq + U.grad q dt)
        = -1/2 d[W p^2] - 1/2 U.grad[W p^2] dt
          + 1/2 [l_tt + U.grad(U.grad l) + 2 U.grad l_t] p^2 dt
          + 1/2 W (dp)^2 + W^2 p^2 dt,        W = l_t + U.grad l,

is evaluated on tree paths, and the weighted energy inequality for the
backward equation is checked side by side with its discretization error.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .backward import BackwardPath
from .forward import ConfigurationError, inner
from .geometry import Geometry, directional_derivative, inflow_set, transport_matrices
from .tree import ScenarioTree, conditional_expectation

__all__ = [
    "CarlemanPreconditionError", "CarlemanWeight", "default_c", "weight_eval", "lambda_one",
    "IdentityLedger", "weighted_identity_residual", "identity_subidentities",
    "CarlemanSides", "carleman_sides", "random_terminal_data",
]


class CarlemanPreconditionError(ConfigurationError):
    """No admissible weight: c outside (0, 1) or cT <= 2R."""


class CarlemanWarning(UserWarning):
    pass


def default_c(T: float, R: float) -> float:
    """Midpoint of the admissible interval (2R/T, 1)."""
    lo = 2.0 * R / T
    if lo >= 1.0:
        raise CarlemanPreconditionError(f"T={T} <= 2R={2 * R}: no c in (0,1) with cT > 2R")
    return 0.5 * (lo + 1.0)


@dataclass(frozen=True)
class CarlemanWeight:
    lam: float
    c: float
    T: float

    def __post_init__(self):
        if not self.lam > 0:
            raise CarlemanPreconditionError(f"lambda must be positive, got {self.lam}")
        if not 0.0 < self.c < 1.0:
            raise CarlemanPreconditionError(f"c={self.c} outside (0, 1)")
        if not self.T > 0:
            raise CarlemanPreconditionError("T must be positive")

    @classmethod
    def for_geometry(cls, g: Geometry, T: float, lam: float = 1.0, c: float | None = None):
        w = cls(lam, default_c(T, g.R) if c is None else c, T)
        w.check(g)
        return w

    def check(self, g: Geometry) -> None:
        if not self.c * self.T > 2.0 * g.R:
            raise CarlemanPreconditionError(
                f"cT = {self.c * self.T:.6g} must exceed 2R = {2 * g.R:.6g}")

    def l(self, t, x):
        x = np.asarray(x, dtype=float)
        return self.lam * (np.sum(x * x, axis=-1) - self.c * (t - 0.5 * self.T) ** 2)

    def theta(self, t, x):
        return np.exp(self.l(t, x))

    def l_t(self, t):
        return -2.0 * self.lam * self.c * (t - 0.5 * self.T)

    @property
    def l_tt(self) -> float:
        return -2.0 * self.lam * self.c

    def u_grad_l(self, x, U):
        """U.grad l for every (point, velocity): shape x.shape[:-1] + (n_vel,)."""
        return 2.0 * self.lam * np.asarray(x, dtype=float) @ np.asarray(U, dtype=float).T

    def u_grad_u_grad_l(self, U):
        U = np.asarray(U, dtype=float)
        return 2.0 * self.lam * np.sum(U * U, axis=-1)

    def bracket(self, U):
        """l_tt + U.grad(U.grad l) + 2 U.grad l_t, per velocity."""
        return self.l_tt + self.u_grad_u_grad_l(U) + 0.0

    def W(self, t, x, U):
        return self.l_t(t) + self.u_grad_l(x, U)

    def bounds(self, R: float) -> tuple[float, float]:
        return math.exp(-self.c * self.lam * self.T ** 2), math.exp(4.0 * self.lam * R * R)


def weight_eval(w: CarlemanWeight, t, x, U=None):
    """Return (l, theta, l_t, U.grad l); the last is None without velocities."""
    l = w.l(t, x)
    ugl = None if U is None else w.u_grad_l(x, U)
    return l, np.exp(l), w.l_t(t), ugl


def lambda_one(norms, c: float) -> float:
    """3/(2(1-c)) (|b1|^2 + |b2|^2 + |b4|^4 + |b4|^2) from sup-norm bounds."""
    if not 0.0 < c < 1.0:
        raise CarlemanPreconditionError(f"c={c} outside (0, 1)")
    get = norms.get if hasattr(norms, "get") else (lambda k, d=0.0: getattr(norms, k, d) or d)
    b1, b2, b4 = (abs(float(get(k, 0.0))) for k in ("b1", "b2", "b4"))
    return 3.0 / (2.0 * (1.0 - c)) * (b1 ** 2 + b2 ** 2 + b4 ** 4 + b4 ** 2)


# -- weighted identity on tree paths ---------------------------------------

COLUMNS = ("lhs", "d_term", "transport_term", "bracket_term", "qv_term", "square_term")


@dataclass
class IdentityLedger:
    """Per-level, per-child values of every term of the weighted identity.

    ``columns[name][k]`` has shape (children of level k, cells, velocities),
    or a leading axis of 1 for deterministic paths.
    """
    columns: dict
    residual: list
    global_residual: float
    mode: str

    def level_totals(self) -> list[dict]:
        out = []
        for k in range(len(self.residual)):
            row = {name: float(np.mean(np.sum(col[k], axis=(1, 2)))) for name, col in self.columns.items()}
            row["residual"] = float(np.mean(np.sum(np.abs(self.residual[k]), axis=(1, 2))))
            out.append(row)
        return out


def _dup(a):
    """Parent-level array aligned with the child level (deterministic stays put)."""
    return a if a.shape[0] == 1 else np.concatenate([a, a])


def _cmean(b):
    return b if b.shape[0] == 1 else conditional_expectation(b)


def _u_dot(grad, g: Geometry):
    """U.grad from a spatial gradient of shape (nodes, cells, vel, dim)."""
    return np.einsum("ncjd,jd->ncj", np.asarray(grad, dtype=float), g.velocities)


def _check_levels(q, tree: ScenarioTree, name="q"):
    if len(q) != tree.n_steps + 1:
        raise ValueError(f"{name} needs {tree.n_steps + 1} levels, got {len(q)}")
    for k, a in enumerate(q):
        if a.shape[0] not in (1, 1 << k):
            raise ValueError(f"{name}[{k}] has {a.shape[0]} nodes, expected 1 or {1 << k}")


def weighted_identity_residual(q, w: CarlemanWeight, tree: ScenarioTree, g: Geometry,
                               mode: str = "stencil", grad_q=None) -> IdentityLedger:
    """Evaluate both sides of the weighted identity level by level.

    ``q`` is a list of per-level arrays (nodes or 1, cells, velocities).
    In ``stencil`` mode spatial derivatives use the solvers' upwind stencil;
    in ``exact`` mode ``grad_q`` (same levels, trailing spatial axis) supplies
    the gradient of q and the weight is differentiated analytically.
    """
    if mode not in ("stencil", "exact"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "exact" and grad_q is None:
        raise ValueError("exact mode needs grad_q")
    q = [np.asarray(a, dtype=float) for a in q]
    _check_levels(q, tree)
    x, U, dt = g.centers, g.velocities, tree.dt
    t = tree.times()
    ugl = w.u_grad_l(x, U)
    bracket = w.bracket(U)[None, :]
    cols = {name: [] for name in COLUMNS}
    residual = []
    total = 0.0
    mu = g.mu
    for k in range(tree.n_steps):
        th0 = w.theta(t[k], x)[:, None]
        th1 = w.theta(t[k + 1], x)[:, None]
        W0 = w.l_t(t[k]) + ugl
        W1 = w.l_t(t[k + 1]) + ugl
        qk, qn = q[k], q[k + 1]
        pk, pn = th0 * qk, th1 * qn
        P = _dup(pk) if qn.shape[0] > 1 else pk
        Q = _dup(qk) if qn.shape[0] > 1 else qk
        if qn.shape[0] == 1 and qk.shape[0] > 1:
            raise ValueError("a random level cannot be followed by a deterministic one")
        if mode == "stencil":
            ugq = directional_derivative(qk, g)
            ugwp = directional_derivative(W0 * pk * pk, g)
        else:
            ugq = _u_dot(grad_q[k], g)
            # U.grad(W p^2) = (U.grad W) p^2 + 2 W p U.grad p, U.grad p = theta (q U.grad l + U.grad q)
            ugp = th0 * (qk * ugl + ugq)
            ugwp = w.u_grad_u_grad_l(U)[None, :] * pk * pk + 2.0 * W0 * pk * ugp
        if qn.shape[0] > 1:
            ugq, ugwp = _dup(ugq), _dup(ugwp)
        dq = qn - Q
        dp_mart = pn - _dup(_cmean(pn)) if qn.shape[0] > 1 else np.zeros_like(pn)
        lhs = -th0 * W0 * P * (dq + ugq * dt)
        d_term = -0.5 * (W1 * pn * pn - W0 * P * P)
        transport = -0.5 * ugwp * dt
        brk = 0.5 * bracket * P * P * dt
        qv = 0.5 * W0 * dp_mart ** 2
        sq = W0 ** 2 * P * P * dt
        res = lhs - (d_term + transport + brk + qv + sq)
        for name, val in zip(COLUMNS, (lhs, d_term, transport, brk, qv, sq)):
            cols[name].append(val)
        residual.append(res)
        total += float(np.mean(np.sum(np.abs(res) * mu, axis=(1, 2))))
    return IdentityLedger(cols, residual, total, mode)


def identity_subidentities(q, grad_q, w: CarlemanWeight, tree: ScenarioTree, g: Geometry) -> dict:
    """Exact discrete analogues of the four product-rule identities behind the
    weighted identity; returns the max relative residual of each.

    Time increments are exact on the tree: with ``a = p_k``, ``b = p_{k+1}``
    and ``dp = b - a``, the first identity reads

        -l_t a dp = -1/2 (l_t(t_{k+1}) b^2 - l_t a^2) + 1/2 l_tt b^2 dt + 1/2 l_t dp^2,

    which is the continuum identity plus a cross term ``1/2 l_tt dt (2 a dp + dp^2)``
    carried in the ``b^2`` factor.
    """
    q = [np.asarray(a, dtype=float) for a in q]
    _check_levels(q, tree)
    x, U, dt = g.centers, g.velocities, tree.dt
    t = tree.times()
    ugl = w.u_grad_l(x, U)
    ugugl = w.u_grad_u_grad_l(U)[None, :]
    worst = {"time_weight": 0.0, "space_weight_time": 0.0, "time_weight_space": 0.0,
             "space_weight_space": 0.0}

    def rel(res, *terms):
        scale = max(1.0, max(float(np.max(np.abs(s))) for s in terms))
        return float(np.max(np.abs(res))) / scale

    for k in range(tree.n_steps):
        th0 = w.theta(t[k], x)[:, None]
        th1 = w.theta(t[k + 1], x)[:, None]
        qk, qn = q[k], q[k + 1]
        a = th0 * qk
        b = th1 * qn
        A = _dup(a) if qn.shape[0] > 1 else a
        dp = b - A
        lt0, lt1 = w.l_t(t[k]), w.l_t(t[k + 1])
        # -l_t p dp
        lhs1 = -lt0 * A * dp
        rhs1 = -0.5 * (lt1 * b * b - lt0 * A * A) + 0.5 * w.l_tt * b * b * dt + 0.5 * lt0 * dp ** 2
        worst["time_weight"] = max(worst["time_weight"], rel(lhs1 - rhs1, lhs1, rhs1))
        # -U.grad l p dp; U.grad l does not depend on t
        lhs2 = -ugl * A * dp
        rhs2 = -0.5 * (ugl * b * b - ugl * A * A) + 0.0 * b * b * dt + 0.5 * ugl * dp ** 2
        worst["space_weight_time"] = max(worst["space_weight_time"], rel(lhs2 - rhs2, lhs2, rhs2))
        # spatial product rules at t_k with the analytic gradient of p
        ugq = _u_dot(grad_q[k], g)
        ugp = th0 * (qk * ugl + ugq)
        ug_lt_p2 = lt0 * 2.0 * a * ugp  # U.grad(l_t p^2), U.grad l_t = 0
        lhs3 = -lt0 * a * ugp
        rhs3 = -0.5 * ug_lt_p2 + 0.5 * 0.0 * a * a
        worst["time_weight_space"] = max(worst["time_weight_space"], rel(lhs3 - rhs3, lhs3, rhs3))
        ug_ul_p2 = ugugl * a * a + ugl * 2.0 * a * ugp
        lhs4 = -ugl * a * ugp
        rhs4 = -0.5 * ug_ul_p2 + 0.5 * ugugl * a * a
        worst["space_weight_space"] = max(worst["space_weight_space"], rel(lhs4 - rhs4, lhs4, rhs4))
    return worst


# -- estimate chain for the backward equation -------------------------------

@dataclass
class CarlemanSides:
    """Terms of the weighted terminal estimate evaluated on one backward path.

    ``*_printed`` entries use the Z-weight ``lam U.x - c lam t`` and the
    boundary factor ``c(T - 2t) - 2U.x`` in the form they are usually quoted;
    ``*_dimensional`` entries use ``|l_t + U.grad l|`` and the boundary factor
    that integration by parts of the weighted identity produces,
    ``-(c(T - 2t) + 2U.x)``.
    """
    terminal_term: float
    interior_term: float
    initial_term: float
    boundary_term: float
    boundary_term_printed: float
    Z_term_printed: float
    Z_term_dimensional: float
    C: float
    rhs_printed: float
    rhs_dimensional: float
    defect_printed: float
    defect_dimensional: float
    epsilon: float
    energy_residual: float
    increment_residual: float
    lambda_one: float
    below_threshold: bool
    observability: dict = field(default_factory=dict)

    @property
    def defect(self) -> float:
        return self.defect_dimensional

    @property
    def rhs(self) -> float:
        return self.rhs_dimensional

    def as_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["defect"] = self.defect
        return d


def _substep_times(tree: ScenarioTree, k: int, m: int) -> np.ndarray:
    return tree.times()[k] + (np.arange(m) + 0.5) * tree.dt / m


def carleman_sides(path: BackwardPath, w: CarlemanWeight, g: Geometry, steps=None,
                   norms=None) -> CarlemanSides:
    """Both sides of the weighted terminal estimate on a discrete backward path.

        E sum theta(T)^2 z_T^2
          <= C [ sum dt E sum theta^2 (b3^2 + 2 + |omega|) Z^2  +  boundary ],

    with ``C = 1 / (lam (cT - 2R))``.  The estimate comes from the energy
    identity obtained by integrating the weighted identity over the cylinder:

        -2 E sum theta^2 W z (dz + U.grad z dt)
            = lam E<(cT - 2U.x) theta^2(T), z_T^2> + lam <(cT + 2U.x) theta^2(0), z_0^2>
              - lam E sum dt sum_inflow U.nu (c(T - 2t) + 2U.x) theta^2 z^2
              + 2(1 - c) lam E sum dt <theta^2, z^2> + E sum dt <theta^2 W, Z^2>
              + 2 E sum dt <theta^2 W^2, z^2>,

    whose left side equals ``2 E sum dt <theta^2 W z, b1 z + K z + b3 Z>`` by the
    equation.  ``energy_residual`` is the discrete mismatch between those two
    evaluations and ``epsilon = C |energy_residual|`` is the tolerance carried
    into the defect.  ``increment_residual`` measures the same left side
    computed from realized tree increments instead (time quadrature error of
    the stochastic integral; reported, not used).
    """
    w.check(g)
    tree = path.tree
    if norms is None:
        norms = {"b1": 0.0, "b2": 0.0, "b3": 0.0, "b4": 0.0}
    lam1 = lambda_one(norms, w.c)
    below = w.lam < lam1
    if below:
        warnings.warn(f"lambda={w.lam} below lambda_1={lam1:.4g}; estimate not guaranteed",
                      CarlemanWarning, stacklevel=2)
    dt, lam, c, T, R = tree.dt, w.lam, w.c, w.T, g.R
    x, U = g.centers, g.velocities
    t = tree.times()
    ugl = w.u_grad_l(x, U)
    Ux = x @ U.T
    DT = [d.T.tocsr() for d in (steps[0].D if steps else transport_matrices(g))]
    inf = steps[0].inflow if steps else inflow_set(g)
    Ux_face = np.sum(inf.x * U[inf.velocity], axis=1)

    def th2(tk):
        return w.theta(tk, x)[:, None] ** 2

    def ugrad_z(z):
        # the dual stencil: -D^T approximates U.grad on the backward side
        out = np.empty_like(z)
        for j, d in enumerate(DT):
            out[:, :, j] = -(d @ z[:, :, j].T).T
        return out

    zT, z0 = path.z[-1], path.z[0]
    terminal = inner(th2(T) * zT, zT, g)
    T1 = lam * inner((c * T - 2.0 * Ux) * th2(T) * zT, zT, g)
    T0 = lam * inner((c * T + 2.0 * Ux) * th2(0.0) * z0, z0, g)
    interior = Zp = Zd = TZ = Tsq = bnd = bnd_p = lhs_inc = lhs_eq = 0.0
    tr_sq = 0.0
    face_max = 0.0
    for k in range(tree.n_steps):
        tk = t[k]
        zk, Zk, zn = path.z[k], path.Z[k], path.z[k + 1]
        a3 = None if steps is None else steps[k].a3
        b3sq = 0.0 if a3 is None else np.broadcast_to(a3, Zk.shape) ** 2
        W = w.l_t(tk) + ugl
        wt = th2(tk)
        interior += dt * 2.0 * (1.0 - c) * lam * inner(wt * zk, zk, g)
        Zp += dt * inner(wt * (b3sq + 2.0 + np.abs(lam * Ux - c * lam * tk)) * Zk, Zk, g)
        Zd += dt * inner(wt * (b3sq + 2.0 + np.abs(W)) * Zk, Zk, g)
        TZ += dt * inner(wt * W * Zk, Zk, g)
        Tsq += dt * 2.0 * inner(wt * W * W * zk, zk, g)
        # boundary integrals at sub-step midpoints; U.nu * measure * w_j = -inflow.weight
        tr = path.trace[k]
        ts = _substep_times(tree, k, tr.shape[1])
        th_face = np.exp(2.0 * np.asarray([w.l(s, inf.x) for s in ts]))  # (m, faces)
        ct = c * (T - 2.0 * ts)[:, None]
        sq = tr ** 2 * -inf.weight
        n = tr.shape[0]
        bnd += dt * lam * float(np.sum(np.mean(sq * -(ct + 2.0 * Ux_face) * th_face, axis=1))) / n
        bnd_p += dt * lam * float(np.sum(np.mean(sq * (ct - 2.0 * Ux_face) * th_face, axis=1))) / n
        tr_sq += dt * float(np.sum(np.mean(-sq, axis=1))) / n
        face_max = max(face_max, float(np.max(np.abs(ct + 2.0 * Ux_face))),
                       float(np.max(np.abs(ct - 2.0 * Ux_face))))
        dz = zn - _dup(zk)
        lhs_inc += -2.0 * inner(_dup(wt * W * zk), dz + _dup(ugrad_z(zk)) * dt, g)
        if steps is not None:
            drift = -steps[k].reaction_T(zk)
            if a3 is not None:
                drift = drift - a3 * Zk
            lhs_eq += 2.0 * dt * inner(wt * W * zk, drift, g)
    rhs1 = T1 + T0 + bnd + interior + TZ + Tsq
    r_energy = rhs1 - lhs_eq
    r_incr = lhs_inc - lhs_eq
    Cc = 1.0 / (lam * (c * T - 2.0 * R))
    rhs_p = Cc * (Zp - bnd_p)
    rhs_d = Cc * (Zd - bnd)
    eps = Cc * abs(r_energy)
    # observability form |z_T|^2 <= K (|Z|^2 + |z|_w^2), up to the same slack
    z_sq = sum(dt * inner(Zk, Zk, g) for Zk in path.Z)
    b3max = float(norms.get("b3", 0.0)) if hasattr(norms, "get") else 0.0
    wmax = b3max ** 2 + 2.0 + 2.0 * lam * R + lam * c * T
    growth = math.exp(8.0 * lam * R * R + 2.0 * c * lam * T * T)
    K = Cc * growth * max(wmax, lam * face_max)
    obs_lhs = inner(zT, zT, g)
    obs_rhs = K * (z_sq + tr_sq) + math.exp(2.0 * c * lam * T * T) * eps
    obs = {"lhs": obs_lhs, "rhs": obs_rhs, "constant": K, "Z_sq": z_sq, "trace_sq": tr_sq,
           "holds": bool(obs_lhs <= obs_rhs)}
    return CarlemanSides(terminal, interior, T0, -bnd, -bnd_p, Zp, Zd, Cc, rhs_p, rhs_d,
                         rhs_p - terminal, rhs_d - terminal, eps, r_energy, r_incr, lam1, below, obs)


def random_terminal_data(g: Geometry, tree: ScenarioTree, rng: np.random.Generator,
                         modes: int = 3) -> np.ndarray:
    """Smooth-in-space terminal datum with leaf-random low Fourier coefficients.

    The field is multiplied by ``(1 - |x/R|^2)^2`` so it vanishes, with its
    normal derivative, on the boundary; this is compatible with the zero
    outflow condition of the dual problem and keeps the backward solution free
    of characteristic discontinuities.
    """
    n = 1 << tree.n_steps
    s = g.centers / g.R  # in [-1, 1]
    basis = [np.ones(g.n_active)]
    for kk in range(1, modes):
        for a in range(g.dim):
            basis.append(np.cos(0.5 * math.pi * kk * s[:, a]))
            basis.append(np.sin(0.5 * math.pi * kk * s[:, a]))
    basis = np.array(basis)  # (nb, cells)
    coef = rng.standard_normal((n, basis.shape[0], g.n_vel))
    bump = np.clip(1.0 - np.sum(s * s, axis=1), 0.0, None) ** 2
    return np.einsum("nbj,bc->ncj", coef, basis * bump) / math.sqrt(basis.shape[0])
