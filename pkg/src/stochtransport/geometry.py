"""Spatial domain, discrete velocity sphere and inflow/outflow boundary faces.

Two domains are supported: an interval in one dimension and a disk in two.
The disk is covered by a Cartesian grid; cells whose centers lie inside the
disk are active and the boundary is the staircase of active-cell faces that
border an inactive cell.  Face normals are the axis-aligned face normals.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp


class GeometryError(ValueError):
    """Invalid domain description."""


class UnsupportedDimensionError(GeometryError):
    pass


@dataclass(frozen=True)
class BoundaryFace:
    face_id: int
    x: tuple
    normal: tuple
    velocity: int
    sign: float
    inflow: bool
    cell: int
    measure: float


@dataclass(frozen=True, eq=False)
class Geometry:
    dim: int
    bounds: tuple
    n_cells: int
    cell_measure: float
    h: float
    centers: np.ndarray  # (n_active, dim)
    velocities: np.ndarray  # (n_vel, dim), unit vectors
    vel_weights: np.ndarray  # (n_vel,)
    R: float
    # geometric faces (position, outward normal, owning cell, measure)
    face_x: np.ndarray = field(repr=False)
    face_normal: np.ndarray = field(repr=False)
    face_cell: np.ndarray = field(repr=False)
    face_measure: np.ndarray = field(repr=False)
    # interior faces: (cell_a, cell_b, normal from a to b, measure)
    interior: tuple = field(repr=False)
    # neighbors[c, axis, 0|1]: cell index in the -/+ direction, -1 if none
    neighbors: np.ndarray = field(repr=False, default=None)

    @property
    def n_active(self) -> int:
        return self.centers.shape[0]

    @property
    def n_vel(self) -> int:
        return self.velocities.shape[0]

    @property
    def field_shape(self) -> tuple:
        return (self.n_active, self.n_vel)

    @property
    def domain_measure(self) -> float:
        return self.cell_measure * self.n_active

    @property
    def mu(self) -> np.ndarray:
        """Quadrature weight of each (cell, velocity) entry, shape (1, n_vel)."""
        return self.cell_measure * self.vel_weights[None, :]

    def to_dict(self) -> dict:
        return {
            "dim": self.dim,
            "bounds": list(self.bounds),
            "n_cells": self.n_cells,
            "n_active": self.n_active,
            "cell_measure": self.cell_measure,
            "h": self.h,
            "velocities": self.velocities.tolist(),
            "vel_weights": self.vel_weights.tolist(),
            "R": self.R,
            "n_boundary_faces": int(self.face_cell.size),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def build_geometry(dim: int = 1, bounds=(-0.5, 0.5), n_cells: int = 8,
                   n_vel: int | None = None, velocities=None,
                   angle_offset: float = 0.0) -> Geometry:
    """Build an interval (``dim=1``, ``bounds=(x_lo, x_hi)``) or a disk
    (``dim=2``, ``bounds=(r0,)`` or a scalar radius).

    In one dimension the velocity sphere is {-1, +1} with unit weights;
    ``velocities`` may restrict it to a subset, in which case the weights are
    rescaled so they still sum to 2.  In two dimensions ``n_vel`` equally
    spaced directions carry weight 2*pi/n_vel each.
    """
    if dim == 1:
        return _build_interval(bounds, n_cells, velocities)
    if dim == 2:
        r0 = float(bounds if np.isscalar(bounds) else bounds[0])
        return _build_disk(r0, n_cells, 8 if n_vel is None else n_vel, angle_offset)
    raise UnsupportedDimensionError(f"dimension {dim} is not supported (use 1 or 2)")


def _build_interval(bounds, n_cells, velocities) -> Geometry:
    x_lo, x_hi = (float(b) for b in bounds)
    if not x_lo < 0.0 < x_hi:
        raise GeometryError(f"interval ({x_lo}, {x_hi}) must contain the origin in its interior")
    if n_cells < 1:
        raise GeometryError("n_cells must be positive")
    h = (x_hi - x_lo) / n_cells
    centers = (x_lo + h * (np.arange(n_cells) + 0.5))[:, None]
    if velocities is None:
        vel = np.array([[-1.0], [1.0]])
    else:
        vel = np.array([[float(v)] for v in velocities])
        if vel.size == 0 or not np.all(np.abs(np.abs(vel) - 1.0) == 0):
            raise GeometryError("one-dimensional velocities must be a non-empty subset of {-1, +1}")
    weights = np.full(vel.shape[0], 2.0 / vel.shape[0])
    face_x = np.array([[x_lo], [x_hi]])
    face_normal = np.array([[-1.0], [1.0]])
    face_cell = np.array([0, n_cells - 1])
    face_measure = np.ones(2)
    a = np.arange(n_cells - 1)
    interior = (a, a + 1, np.ones((n_cells - 1, 1)), np.ones(n_cells - 1))
    idx = np.arange(n_cells)
    nb = np.stack([np.where(idx > 0, idx - 1, -1), np.where(idx < n_cells - 1, idx + 1, -1)],
                  axis=1)[:, None, :]
    return Geometry(1, (x_lo, x_hi), n_cells, h, h, centers, vel, weights,
                    max(abs(x_lo), abs(x_hi)), face_x, face_normal, face_cell,
                    face_measure, interior, nb)


def _build_disk(r0, n_cells, n_vel, angle_offset) -> Geometry:
    if r0 <= 0:
        raise GeometryError("disk radius must be positive")
    if n_cells < 2 or n_vel < 2:
        raise GeometryError("disk resolutions must be at least 2")
    h = 2.0 * r0 / n_cells
    c1 = -r0 + h * (np.arange(n_cells) + 0.5)
    X, Y = np.meshgrid(c1, c1, indexing="ij")
    active = X ** 2 + Y ** 2 < r0 ** 2
    index = -np.ones((n_cells, n_cells), dtype=int)
    index[active] = np.arange(active.sum())
    centers = np.stack([X[active], Y[active]], axis=1)

    fx, fn, fc = [], [], []
    ia, ib, inorm = [], [], []
    nb = -np.ones((int(active.sum()), 2, 2), dtype=int)
    for (i, j), c in np.ndenumerate(index):
        if c < 0:
            continue
        for di, dj in ((-1, 0), (1, 0), (0, -1), (0, 1)):
            ni, nj = i + di, j + dj
            inside = 0 <= ni < n_cells and 0 <= nj < n_cells and index[ni, nj] >= 0
            if inside:
                nb[c, 0 if di else 1, 1 if (di + dj) > 0 else 0] = index[ni, nj]
                if (di, dj) in ((1, 0), (0, 1)):
                    ia.append(c)
                    ib.append(index[ni, nj])
                    inorm.append((di, dj))
            else:
                fx.append((c1[i] + 0.5 * h * di, c1[j] + 0.5 * h * dj))
                fn.append((float(di), float(dj)))
                fc.append(c)
    theta = angle_offset + 2.0 * np.pi * np.arange(n_vel) / n_vel
    vel = np.stack([np.cos(theta), np.sin(theta)], axis=1)
    # exact zeros for axis-aligned directions so tangential faces classify cleanly
    vel[np.abs(vel) < 1e-15] = 0.0
    weights = np.full(n_vel, 2.0 * np.pi / n_vel)
    m = len(ia)
    interior = (np.array(ia, dtype=int), np.array(ib, dtype=int),
                np.array(inorm, dtype=float).reshape(m, 2), np.full(m, h))
    return Geometry(2, (r0,), n_cells, h * h, h, centers, vel, weights, r0,
                    np.array(fx), np.array(fn), np.array(fc, dtype=int),
                    np.full(len(fc), h), interior, nb)


def is_inflow(U, normal) -> bool:
    return float(np.dot(U, normal)) <= 0.0


def classify_boundary(g: Geometry) -> list[BoundaryFace]:
    """One entry per (boundary face, velocity); tangential pairs count as inflow."""
    faces = []
    fid = 0
    for f in range(g.face_cell.size):
        for j in range(g.n_vel):
            s = float(g.velocities[j] @ g.face_normal[f])
            faces.append(BoundaryFace(fid, tuple(g.face_x[f]), tuple(g.face_normal[f]), j,
                                      s, s <= 0.0, int(g.face_cell[f]), float(g.face_measure[f])))
            fid += 1
    return faces


@dataclass(frozen=True, eq=False)
class InflowSet:
    """Vectorized view of the inflow faces of a geometry."""
    cell: np.ndarray
    velocity: np.ndarray
    weight: np.ndarray  # (-U.nu) * face measure * velocity weight
    flux: np.ndarray  # |U.nu| * face measure / cell measure
    sign: np.ndarray
    x: np.ndarray
    normal: np.ndarray

    @property
    def size(self) -> int:
        return self.cell.size


def inflow_set(g: Geometry) -> InflowSet:
    faces = [f for f in classify_boundary(g) if f.inflow]
    cell = np.array([f.cell for f in faces], dtype=int)
    vel = np.array([f.velocity for f in faces], dtype=int)
    sign = np.array([f.sign for f in faces])
    meas = np.array([f.measure for f in faces])
    return InflowSet(cell, vel, -sign * meas * g.vel_weights[vel], -sign * meas / g.cell_measure,
                     sign, np.array([f.x for f in faces]).reshape(len(faces), g.dim),
                     np.array([f.normal for f in faces]).reshape(len(faces), g.dim))


def transport_matrices(g: Geometry) -> list:
    """Upwind discretization D_j of U_j . grad, one sparse matrix per velocity.

    Boundary inflow contributions are excluded; they enter through the
    boundary injection of the step operator instead.
    """
    ia, ib, nrm, meas = g.interior
    bf_cell, bf_n, bf_m = g.face_cell, g.face_normal, g.face_measure
    n = g.n_active
    out = []
    for U in g.velocities:
        rows, cols, vals = [], [], []
        s = nrm @ U  # flux direction a -> b
        coef = s * meas / g.cell_measure
        pos = s > 0
        # a -> b flow: upwind is a
        rows += [ia[pos], ib[pos]]
        cols += [ia[pos], ia[pos]]
        vals += [coef[pos], -coef[pos]]
        neg = s < 0
        rows += [ib[neg], ia[neg]]
        cols += [ib[neg], ib[neg]]
        vals += [-coef[neg], coef[neg]]
        sb = bf_n @ U
        out_b = sb > 0
        rows.append(bf_cell[out_b])
        cols.append(bf_cell[out_b])
        vals.append(sb[out_b] * bf_m[out_b] / g.cell_measure)
        D = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(n, n))
        out.append(D)
    return out


def directional_derivative(f: np.ndarray, g: Geometry) -> np.ndarray:
    """Upwind U_j . grad f on cells, one-sided inward where the upwind cell is missing.

    ``f`` has shape (..., cells, vel); the result has the same shape.
    """
    out = np.zeros_like(f)
    for a in range(g.dim):
        lo = g.neighbors[:, a, 0]
        hi = g.neighbors[:, a, 1]
        has_lo = (lo >= 0)[:, None]
        has_hi = (hi >= 0)[:, None]
        back = np.where(has_lo, (f - f[..., np.maximum(lo, 0), :]) / g.h, 0.0)
        fwd = np.where(has_hi, (f[..., np.maximum(hi, 0), :] - f) / g.h, 0.0)
        Ua = g.velocities[:, a]
        upwind = np.where(Ua > 0, np.where(has_lo, back, fwd), np.where(has_hi, fwd, back))
        out += Ua * upwind
    return out


def cfl_number(g: Geometry, dt: float) -> float:
    """Positivity bound dt * max_j |U_j|_1 / h; equals max |U| dt/dx in 1D."""
    return float(np.max(np.abs(g.velocities).sum(axis=1)) * dt / g.h)


def weighted_inflow_norm(trace, g: Geometry, dt: float, probs=None) -> float:
    """L2_w norm of an adapted inflow trace.

    ``trace`` is a list (one entry per time level) of arrays shaped
    (n_nodes, n_inflow_faces), or (n_nodes, n_sub, n_inflow_faces) when the
    level is split into ``n_sub`` sub-steps of length dt / n_sub.  Node
    probabilities default to 2**-k.
    """
    inf = inflow_set(g)
    total = 0.0
    for k, h in enumerate(trace):
        h = np.asarray(h, dtype=float)
        if h.ndim not in (2, 3) or h.shape[-1] != inf.size:
            raise ValueError(f"trace level {k} has shape {h.shape}, expected (nodes, {inf.size})")
        sq = h ** 2 if h.ndim == 2 else (h ** 2).mean(axis=1)
        p = (1.0 / h.shape[0]) if probs is None else np.asarray(probs[k])[:, None]
        total += dt * float(np.sum(p * inf.weight[None, :] * sq))
    return math.sqrt(total)


def min_control_time(g: Geometry) -> float:
    return 2.0 * g.R
