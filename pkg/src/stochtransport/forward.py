"""Controlled forward stochastic transport equation on geometry x scenario tree.

One tree level advances the state by

    y(child +/-) = M_k y + dt B_k u + dt F_k f  +/-  sqrt(dt) (a3 y + v)

where ``M_k`` is ``m`` explicit upwind sub-steps
``S = I - delta D_h + delta (a1 + Q(a2))`` with ``delta = dt / m``.  With a
single sub-step ``M_k = I - dt D_h + dt (a1 + Q(a2))``.  The boundary control
enters as the ghost value of the upwind inflow flux.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import Geometry, cfl_number, classify_boundary, inflow_set, transport_matrices
from .tree import ScenarioTree, branch


class ConfigurationError(ValueError):
    """Discretization parameters violate a precondition."""


class CFLError(ConfigurationError):
    def __init__(self, cfl: float, dt_max: float):
        self.cfl = cfl
        self.dt_max = dt_max
        super().__init__(f"CFL number {cfl:.4g} exceeds 1; admissible dt <= {dt_max:.6g} "
                         "(or allow transport sub-steps)")


def _field_array(spec, g: Geometry, tree: ScenarioTree, k: int, kernel: bool = False):
    """Materialize a coefficient at level k with a leading node axis (size 1 or 2**k)."""
    shape = (g.n_active, g.n_vel, g.n_vel) if kernel else (g.n_active, g.n_vel)
    if spec is None:
        return None
    if callable(spec):
        t = tree.dt * k
        if kernel:
            U = g.velocities[None, :, None, :]
            V = g.velocities[None, None, :, :]
            val = spec(t, g.centers[:, None, None, :], U, V)
        else:
            val = spec(t, g.centers[:, None, :], g.velocities[None, :, :])
        return np.broadcast_to(np.asarray(val, dtype=float), shape)[None]
    if isinstance(spec, (list, tuple)):
        arr = np.asarray(spec[k], dtype=float)
        if arr.shape[-len(shape):] != shape or arr.shape[0] not in (1, 1 << k):
            raise ValueError(f"adapted coefficient level {k} has shape {arr.shape}")
        return arr.reshape((arr.shape[0],) + shape)
    arr = np.asarray(spec, dtype=float)
    return np.broadcast_to(arr, shape)[None]


@dataclass
class CoefficientSet:
    """Coefficients a1, a2, a3 and source f.

    Each entry is None (zero), a scalar, a deterministic callable, or an
    adapted list indexed by level of arrays shaped (nodes, cells, vel) or
    (nodes, cells, vel, vel) for the kernel a2.  Callables receive
    ``(t, x, U)`` (``(t, x, U, V)`` for a2) with broadcastable arrays.
    """
    a1: object = None
    a2: object = None
    a3: object = None
    f: object = None
    bounds: dict = field(default_factory=dict)

    def level(self, g: Geometry, tree: ScenarioTree, k: int) -> dict:
        return {
            "a1": _field_array(self.a1, g, tree, k),
            "a2": _field_array(self.a2, g, tree, k, kernel=True),
            "a3": _field_array(self.a3, g, tree, k),
            "f": _field_array(self.f, g, tree, k),
        }

    def sup_norms(self, g: Geometry, tree: ScenarioTree) -> dict:
        out = {"a1": 0.0, "a2": 0.0, "a3": 0.0, "f": 0.0}
        for k in range(tree.n_steps):
            for name, arr in self.level(g, tree, k).items():
                if arr is not None:
                    out[name] = max(out[name], float(np.max(np.abs(arr))))
        return out

    def validate(self, g: Geometry, tree: ScenarioTree) -> dict:
        """Check declared sup-norm bounds against the stored samples."""
        norms = self.sup_norms(g, tree)
        for name, bound in self.bounds.items():
            if norms.get(name, 0.0) > bound * (1 + 1e-12):
                raise ValueError(f"{name} sup norm {norms[name]:.6g} exceeds declared bound {bound}")
        return norms

    def r1(self, g: Geometry, tree: ScenarioTree) -> float:
        n = self.sup_norms(g, tree)
        return n["a1"] ** 2 + n["a2"] + n["a3"] + 1.0


def random_coefficients(g: Geometry, tree: ScenarioTree, rng: np.random.Generator,
                        bound: float = 1.0, names=("a1", "a2", "a3"), source: bool = False
                        ) -> CoefficientSet:
    """Adapted coefficients drawn uniformly from [-bound, bound] at every node."""
    kw = {}
    for name in names:
        kernel = name == "a2"
        shape = (g.n_active, g.n_vel) + ((g.n_vel,) if kernel else ())
        kw[name] = [rng.uniform(-bound, bound, size=(1 << k,) + shape) for k in range(tree.n_steps)]
    if source:
        kw["f"] = [rng.uniform(-bound, bound, size=(1 << k, g.n_active, g.n_vel))
                   for k in range(tree.n_steps)]
    return CoefficientSet(**kw, bounds={n: bound for n in kw})


class StepOperator:
    """Linear maps (M_k, N_k, B_k, F_k) of one tree level, applied matrix-free.

    Fields carry a leading node axis.  Adjoints are taken in the inner product
    weighted by cell measure and velocity weight, which for the uniform grids
    used here coincides with the plain transpose.
    """

    def __init__(self, g: Geometry, tree: ScenarioTree, k: int, coeffs: dict,
                 substeps: int, D=None, inflow=None):
        self.g = g
        self.k = k
        self.dt = tree.dt
        self.m = substeps
        self.delta = tree.dt / substeps
        self.D = transport_matrices(g) if D is None else D
        self.DT = [d.T.tocsr() for d in self.D]
        self.inflow = inflow_set(g) if inflow is None else inflow
        self.a1 = coeffs["a1"]
        self.a2 = coeffs["a2"]
        self.a3 = coeffs["a3"]
        self.f = coeffs["f"]
        w = g.vel_weights
        self._a2w = None if self.a2 is None else self.a2 * w[None, None, None, :]
        self._a2wT = None if self.a2 is None else np.swapaxes(self.a2, -1, -2) * w[None, None, None, :]

    # -- building blocks -------------------------------------------------
    def transport(self, y):
        out = np.empty_like(y)
        for j, D in enumerate(self.D):
            out[:, :, j] = (D @ y[:, :, j].T).T
        return out

    def transport_T(self, z):
        out = np.empty_like(z)
        for j, DT in enumerate(self.DT):
            out[:, :, j] = (DT @ z[:, :, j].T).T
        return out

    def reaction(self, y):
        r = np.zeros_like(y)
        if self.a1 is not None:
            r = r + self.a1 * y
        if self.a2 is not None:
            r = r + (self._a2w @ y[..., None])[..., 0]
        return r

    def reaction_T(self, z):
        r = np.zeros_like(z)
        if self.a1 is not None:
            r = r + self.a1 * z
        if self.a2 is not None:
            r = r + (self._a2wT @ z[..., None])[..., 0]
        return r

    def S(self, y):
        return y - self.delta * self.transport(y) + self.delta * self.reaction(y)

    def ST(self, z):
        return z - self.delta * self.transport_T(z) + self.delta * self.reaction_T(z)

    def inject(self, u, n_nodes):
        """B_0 u: boundary values placed into inflow cells with flux weight."""
        out = np.zeros((n_nodes,) + self.g.field_shape)
        if u is None or self.inflow.size == 0:
            return out
        u = np.broadcast_to(np.asarray(u, dtype=float), (n_nodes, self.inflow.size))
        np.add.at(out, (slice(None), self.inflow.cell, self.inflow.velocity),
                  u * self.inflow.flux[None, :])
        return out

    def trace(self, e):
        """Adjoint of ``inject``: values at inflow cells, one per inflow face."""
        return e[:, self.inflow.cell, self.inflow.velocity]

    def noise(self, y, v=None):
        r = np.zeros_like(y) if self.a3 is None else self.a3 * y
        return r if v is None else r + v

    # -- level maps ------------------------------------------------------
    def apply_M(self, y):
        for _ in range(self.m):
            y = self.S(y)
        return y

    def apply_MT(self, z):
        for _ in range(self.m):
            z = self.ST(z)
        return z

    def drift(self, y, u=None, src=None, with_source=True):
        """M_k y + dt B_k u + dt F_k (f + src).

        ``u`` is either constant over the level, shape (nodes, faces), or given
        per transport sub-step, shape (nodes, m, faces).
        """
        n = y.shape[0]
        forcing = np.zeros((1,) + self.g.field_shape)
        if src is not None:
            forcing = forcing + src
        if with_source and self.f is not None:
            forcing = forcing + self.f
        per_sub = u is not None and np.ndim(u) == 3
        if u is not None and not per_sub:
            forcing = forcing + self.inject(u, n)
        for j in range(self.m):
            y = self.S(y) + self.delta * forcing
            if per_sub:
                y = y + self.delta * self.inject(u[:, j], n)
        return y

    def adjoint(self, e_hat):
        """Return (M_k^T e, boundary trace per sub-step, F_k^* e).

        The trace has shape (nodes, m, faces); entry j pairs with the
        boundary value used in sub-step j.
        """
        acc = np.zeros_like(e_hat)
        traces = []
        e = e_hat
        for _ in range(self.m):
            acc = acc + e
            traces.append(self.trace(e))
            e = self.ST(e)
        acc /= self.m
        return e, np.stack(traces[::-1], axis=1), acc


def build_steps(g: Geometry, coeffs: CoefficientSet, tree: ScenarioTree,
                substeps: int | str = "auto") -> list[StepOperator]:
    cfl = cfl_number(g, tree.dt)
    if substeps == "auto":
        m = max(1, math.ceil(cfl - 1e-12))
    else:
        m = int(substeps)
        if m < 1:
            raise ConfigurationError("substeps must be positive")
        if cfl / m > 1.0 + 1e-12:
            raise CFLError(cfl / m, tree.dt * m / cfl)
    D = transport_matrices(g)
    inflow = inflow_set(g)
    return [StepOperator(g, tree, k, coeffs.level(g, tree, k), m, D, inflow)
            for k in range(tree.n_steps)]


def forward_step_matrices(g: Geometry, coeffs: CoefficientSet, tree: ScenarioTree, k: int,
                          node: int = 0, substeps: int | str = 1):
    """Dense (M_k, N_k, B_k, F_k) at one node, for inspection and small tests.

    Fields are flattened cell-major (index = cell * n_vel + velocity); B_k has
    one column per inflow face and F_k is the source vector dt-scaled out.
    """
    op = build_steps(g, coeffs, tree, substeps)[k]
    pick = lambda a: None if a is None else a[min(node, a.shape[0] - 1)][None]
    op.a1, op.a2, op.a3, op.f = pick(op.a1), pick(op.a2), pick(op.a3), pick(op.f)
    op._a2w = None if op.a2 is None else op.a2 * g.vel_weights[None, None, None, :]
    op._a2wT = None if op.a2 is None else np.swapaxes(op.a2, -1, -2) * g.vel_weights[None, None, None, :]
    n = g.n_active * g.n_vel
    eye = np.eye(n).reshape((n,) + g.field_shape)
    M = op.apply_M(eye).reshape(n, n).T
    N = op.noise(eye).reshape(n, n).T
    nb = op.inflow.size
    f_saved, op.f = op.f, None
    B = (op.drift(np.zeros((nb,) + g.field_shape), np.eye(nb)) / op.dt).reshape(nb, n).T
    op.f = f_saved
    F = np.zeros(n) if op.f is None else (op.drift(np.zeros((1,) + g.field_shape)) / op.dt).ravel()
    return M, N, B, F


@dataclass
class ControlPair:
    """Boundary control u (per level: nodes x inflow faces) and internal
    control v (per level: nodes x cells x vel).  Either may be None."""
    u: list | None = None
    v: list | None = None
    drift: list | None = None  # internal control acting in the drift term

    def level(self, k):
        get = lambda seq: None if seq is None else seq[k]
        return get(self.u), get(self.v), get(self.drift)


@dataclass
class StatePath:
    y: list
    tree: ScenarioTree
    g: Geometry
    steps: list
    controls: ControlPair
    cfl: float
    dx: float

    @property
    def terminal(self) -> np.ndarray:
        return self.y[-1]


def _as_initial(y0, g: Geometry) -> np.ndarray:
    y0 = np.asarray(y0, dtype=float)
    if y0.shape == g.field_shape:
        return y0[None].copy()
    if y0.shape == (g.n_active,):
        return np.repeat(y0[None, :, None], g.n_vel, axis=2)
    if y0.shape == (1,) + g.field_shape:
        return y0.copy()
    raise ValueError(f"initial state shape {y0.shape} incompatible with field shape {g.field_shape}")


def forward_solve(y0, coeffs: CoefficientSet, controls: ControlPair | None, tree: ScenarioTree,
                  g: Geometry, steps: list | None = None, substeps: int | str = "auto",
                  with_source: bool = True) -> StatePath:
    """Propagate y0 through the tree; ``with_source=False`` drops the stored f."""
    if steps is None:
        steps = build_steps(g, coeffs, tree, substeps)
    controls = controls or ControlPair()
    y = _as_initial(y0, g)
    path = [y]
    for k, op in enumerate(steps):
        u, v, ell = controls.level(k)
        base = op.drift(y, u, ell, with_source)
        y = branch(base, op.noise(y, v), tree)
        path.append(y)
    return StatePath(path, tree, g, steps, controls, cfl_number(g, tree.dt), g.h)


def inner(a, b, g: Geometry) -> float:
    """E <a, b> over a level (mean over nodes, quadrature over cells x velocities)."""
    a = np.asarray(a)
    b = np.asarray(b)
    n = max(a.shape[0], b.shape[0])
    return float(np.sum(a * b * g.mu[None]) / n)


def sq_norm(a, g: Geometry) -> float:
    return inner(a, a, g)


def expectation_field(path: StatePath) -> list:
    return [np.mean(y, axis=0) for y in path.y]


def _boundary_power(op: StepOperator, y, u):
    """Discrete boundary energy flux: inflow gain minus outflow loss, per node."""
    g = op.g
    gain = np.zeros(y.shape[0])
    if u is not None and op.inflow.size:
        u2 = np.asarray(u, dtype=float) ** 2
        if u2.ndim == 3:
            u2 = u2.mean(axis=1)
        u2 = np.broadcast_to(u2, (y.shape[0], op.inflow.size))
        gain = np.sum(op.inflow.weight[None, :] * u2, axis=1)
    loss = np.zeros(y.shape[0])
    for face in classify_boundary(g):
        if face.sign > 0:
            loss += face.sign * face.measure * g.vel_weights[face.velocity] * y[:, face.cell, face.velocity] ** 2
    return gain - loss


def energy_report(path: StatePath, coeffs: CoefficientSet | None = None,
                  controls: ControlPair | None = None, y0=None, C: float | None = None) -> dict:
    """Discrete Ito energy balance per level and the Gronwall-type bound.

    ``residual[k]`` is the per-unit-time defect between the realized change of
    E|y|^2 over level k and the continuum expansion (transport boundary flux,
    reaction, source and quadratic variation) evaluated at the left endpoint.
    """
    g, tree = path.g, path.tree
    controls = controls or path.controls
    dt = tree.dt
    residual = []
    energies = [sq_norm(y, g) for y in path.y]
    for k, op in enumerate(path.steps):
        y = path.y[k]
        u, v, ell = controls.level(k)
        src = np.zeros_like(y)
        if op.f is not None:
            src = src + op.f
        if ell is not None:
            src = src + ell
        react = op.reaction(y) + src
        qv = op.noise(y, v)
        flux = float(np.mean(_boundary_power(op, y, u)))
        rhs = dt * (flux + 2.0 * inner(y, react, g) + sq_norm(qv, g))
        residual.append((energies[k + 1] - energies[k] - rhs) / dt)
    # data norms for the a priori bound
    y_init = path.y[0]
    f_norm = 0.0
    u_norm = 0.0
    v_norm = 0.0
    inf = path.steps[0].inflow
    for k, op in enumerate(path.steps):
        u, v, ell = controls.level(k)
        src = np.zeros_like(path.y[k])
        if op.f is not None:
            src = src + op.f
        if ell is not None:
            src = src + ell
        f_norm += dt * sq_norm(src, g)
        if v is not None:
            v_norm += dt * sq_norm(np.broadcast_to(v, path.y[k].shape), g)
        if u is not None:
            u2 = np.asarray(u, dtype=float) ** 2
            if u2.ndim == 3:
                u2 = u2.mean(axis=1)
            u_norm += dt * float(np.mean(np.sum(inf.weight * u2, axis=-1)))
    data = sq_norm(y_init, g) + f_norm + u_norm + v_norm
    sup_energy = _expected_sup(path)
    r1 = (coeffs or CoefficientSet()).r1(g, tree) if coeffs is not None else 1.0
    if C is None:
        C = 2.0 * (1.0 + tree.T)
    bound = math.exp(C * r1) * data
    return {
        "residual": residual,
        "max_abs_residual": max((abs(r) for r in residual), default=0.0),
        "energies": energies,
        "expected_sup": sup_energy,
        "data_norm_sq": data,
        "r1": r1,
        "C": C,
        "bound": bound,
        "bound_holds": sup_energy <= bound * (1 + 1e-12),
        "C_required": (math.log(sup_energy / data) / r1) if data > 0 and sup_energy > data else 0.0,
    }


def _expected_sup(path: StatePath) -> float:
    """E max_k |y(t_k)|^2 along every root-to-leaf path."""
    g = path.g
    run = np.zeros(1)
    for k, y in enumerate(path.y):
        e = np.sum(y ** 2 * g.mu[None], axis=(1, 2))
        if k > 0:
            run = np.concatenate([run, run])
        run = np.maximum(run, e)
    return float(np.mean(run))
