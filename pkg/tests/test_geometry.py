import numpy as np
import pytest

from stochtransport.geometry import (GeometryError, UnsupportedDimensionError, build_geometry, cfl_number,
                                     classify_boundary, directional_derivative, inflow_set, min_control_time,
                                     transport_matrices, weighted_inflow_norm)


def test_interval_layout(line):
    assert line.n_active == 8
    assert np.isclose(line.h, 1 / 8)
    assert np.allclose(line.centers[:, 0], -0.5 + (np.arange(8) + 0.5) / 8)
    assert line.R == 0.5
    assert min_control_time(line) == 1.0
    assert np.isclose(line.vel_weights.sum(), 2.0)


def test_interval_must_contain_origin():
    with pytest.raises(GeometryError):
        build_geometry(1, (0.0, 1.0), 4)
    with pytest.raises(GeometryError):
        build_geometry(1, (-1.0, 1.0), 0)


def test_unsupported_dimension():
    with pytest.raises(UnsupportedDimensionError):
        build_geometry(3)


def test_inflow_faces_interval(line):
    inf = inflow_set(line)
    # U=+1 enters at the left face, U=-1 at the right face
    got = sorted(zip(inf.cell.tolist(), line.velocities[inf.velocity, 0].tolist()))
    assert got == [(0, 1.0), (7, -1.0)]
    assert np.all(inf.weight > 0)


def test_boundary_classification_disk(disk):
    faces = classify_boundary(disk)
    for f in faces:
        udn = float(disk.velocities[f.velocity] @ f.normal)
        assert f.inflow == (udn <= 0)


def test_transport_matrices_conserve_interior_mass(line):
    # column sums vanish except at outflow cells: upwind fluxes move mass, never create it
    for j, D in enumerate(transport_matrices(line)):
        col = np.asarray(D.sum(axis=0)).ravel()
        out_cell = 7 if line.velocities[j, 0] > 0 else 0
        mask = np.arange(8) != out_cell
        assert np.allclose(col[mask], 0.0)
        assert col[out_cell] > 0


def test_directional_derivative_of_linear_field(line):
    f = np.repeat(line.centers[:, :1], 2, axis=1) * 3.0
    d = directional_derivative(f, line)
    assert np.allclose(d, 3.0 * line.velocities[:, 0][None, :])


def test_cfl_and_weighted_norm(line):
    assert np.isclose(cfl_number(line, 1 / 8), 1.0)
    inf = inflow_set(line)
    trace = [np.ones((1, inf.size)), np.ones((2, inf.size))]
    expected = np.sqrt(0.5 * inf.weight.sum() * 2)
    assert np.isclose(weighted_inflow_norm(trace, line, 0.5), expected)


def test_disk_symmetry(disk):
    assert np.allclose(disk.centers.mean(axis=0), 0.0)
    assert np.all(np.linalg.norm(disk.centers, axis=1) < 0.5)
    assert np.isclose(disk.vel_weights.sum(), 2 * np.pi)


def test_to_dict_is_json_ready(disk):
    import json

    d = json.loads(disk.to_json())
    assert d["dim"] == 2 and d["n_active"] == disk.n_active


def test_weighted_norm_matches_naive_sum(disk, rng):
    inf = inflow_set(disk)
    dt = 0.1
    trace = [rng.standard_normal((1 << k, inf.size)) for k in range(4)]
    total = 0.0
    for k, h in enumerate(trace):
        for n in range(h.shape[0]):
            for i in range(inf.size):
                udn = -float(disk.velocities[inf.velocity[i]] @ inf.normal[i])
                meas = disk.face_measure[np.flatnonzero((disk.face_cell == inf.cell[i])
                                                         & np.all(disk.face_normal == inf.normal[i], axis=1))[0]]
                total += dt / h.shape[0] * udn * meas * disk.vel_weights[inf.velocity[i]] * h[n, i] ** 2
    assert abs(weighted_inflow_norm(trace, disk, dt) ** 2 - total) <= 1e-12 * max(1.0, total)
