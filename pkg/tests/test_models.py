import numpy as np
import pytest

from otbb.fvmodel import (FVModel, admissibility_defect, build_grid_mesh, fv_controllability_path,
                          fv_reconstruct, fv_sample_density, isotropy_deficit, profile_schedule,
                          regularity_witness, step_factors)
from otbb.measures import GenericMeasure, constant_function, pair
from otbb.trimodel import (TriModel, build_flat_mesh, build_icosphere, dirac_sample,
                           partition_defect, tangency_defect, tri_action, tri_controllability_path,
                           tri_distortion, vertex_area_defect)


def test_grid_mesh_geometry():
    mesh = build_grid_mesh([[0, 2], [0, 1]], [4, 3])
    assert mesh.n_cells == 12
    assert mesh.n_faces == 3 * 3 + 4 * 2
    assert np.sum(mesh.volumes) == pytest.approx(2.0)
    assert admissibility_defect(mesh) == pytest.approx(0.0, abs=1e-14)
    assert regularity_witness(mesh) > 0


def test_isotropy_small_grids_are_deficient():
    # with fewer than three cells per axis some cells lack a face pair
    assert isotropy_deficit(build_grid_mesh([[0, 1], [0, 1]], [2, 2])) == pytest.approx(-0.5)
    assert isotropy_deficit(build_grid_mesh([[0, 1], [0, 1]], [5, 5])) == pytest.approx(0.0, abs=1e-14)


def test_divergence_conserves_mass():
    model = FVModel(build_grid_mesh([[0, 1], [0, 1]], [5, 4]))
    M = np.random.default_rng(0).normal(size=model.momentum_shape)
    assert np.dot(model.density_weights, model.divergence(M)) == pytest.approx(0.0, abs=1e-12)


def test_sampling_preserves_mass_and_reconstructs():
    mesh = build_grid_mesh([0.0, 2.0], 10)
    mu = GenericMeasure.uniform_box([0.13], [1.37], 2.0) + GenericMeasure.dirac([1.9], 0.5)
    P = fv_sample_density(mesh, mu)
    assert np.dot(mesh.volumes, P) == pytest.approx(2.5)
    for which in ("CE", "A"):
        assert fv_reconstruct(mesh, which, P).mass() == pytest.approx(2.5)


def test_fv_action_void_conventions():
    model = FVModel(build_grid_mesh([0.0, 1.0], 3))
    P = np.array([0.0, 0.0, 1.0])
    M = np.zeros(2)
    assert model.action(P, M) == 0.0
    assert model.action(P, np.array([1.0, 0.0])) == np.inf
    assert model.action(np.array([-1.0, 1.0, 1.0]), M) == np.inf


def test_profile_schedule_endpoints_and_odd_n():
    for N in (2, 3, 8, 9):
        chi, half = profile_schedule(N)
        assert len(chi) == N + 1
        assert chi[0] == 0 and chi[-1] == 0 and np.max(chi) == pytest.approx(1.0)
        assert half[0] == 0 and half[-1] == 1
    assert np.max(step_factors(16)) <= 2 * 16


def test_fv_controllability_path_is_feasible():
    model = FVModel(build_grid_mesh([0.0, 2.0], 16))
    res = fv_controllability_path(model.mesh, model.mean, 0.3, 1.6, 8)
    P, M = res.path.P, res.path.M
    div = np.stack([model.divergence(m) for m in M])
    np.testing.assert_allclose(np.diff(P, axis=0) * 8 + div, 0.0, atol=1e-10)
    assert np.all(P >= 0) and np.isfinite(res.cost) and res.cost > 0


def test_icosphere_geometry():
    mesh = build_icosphere(2)
    assert mesh.n_vertices == 162 and mesh.n_triangles == 320
    assert mesh.spherical and mesh.n_components() == 1
    assert vertex_area_defect(mesh) < 1e-12
    assert partition_defect(mesh) < 1e-12
    assert tangency_defect(mesh) < 1e-12


def test_sphere_distortion_shrinks_with_refinement():
    a = tri_distortion(build_icosphere(1)).suprema()
    b = tri_distortion(build_icosphere(3)).suprema()
    for key in ("beta", "theta", "normal_deviation"):
        assert b[key] < a[key]


def test_flat_mesh_has_no_distortion():
    sup = tri_distortion(build_flat_mesh((0, 0), (1, 1), 4)).suprema()
    assert all(v == 0 for v in sup.values())


def test_dirac_sample_mass_and_pairing():
    mesh = build_icosphere(2)
    x = np.array([0.3, -0.2, 0.9])
    P = dirac_sample(mesh, x / np.linalg.norm(x))
    assert np.dot(mesh.vertex_areas, P) == pytest.approx(1.0)
    model = TriModel(mesh)
    assert pair(model.reconstruct("CE", P), constant_function(1.0, 3)).value == pytest.approx(1.0)


def test_normal_momentum_rejected_raw_and_dropped_by_model():
    model = TriModel(build_flat_mesh((0, 0), (1, 1), 2))
    M = np.zeros((model.mesh.n_triangles, 3))
    M[:, 2] = 1.0
    P = np.ones(model.n_density)
    with pytest.raises(ValueError):
        tri_action(model.mesh, P, M)
    assert model.action(P, M) == 0.0


def test_tri_controllability_path_is_feasible():
    model = TriModel(build_icosphere(2))
    res = tri_controllability_path(model.mesh, [0, 0, 1.0], [1.0, 0, 0], 8)
    div = np.stack([model.divergence(m) for m in res.path.M])
    np.testing.assert_allclose(np.diff(res.path.P, axis=0) * 8 + div, 0.0, atol=1e-9)
    assert np.all(res.path.P >= -1e-14) and res.cost > 0
