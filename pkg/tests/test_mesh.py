from __future__ import annotations

import numpy as np
import pytest

from mvhop.errors import OpenMeshError
from mvhop.mesh import (
    TriangleMesh,
    closest_points_on_mesh,
    load_cloud,
    load_mesh,
    make_box,
    make_capsule,
    make_icosphere,
    point_mesh_distance,
    sample_surface,
    save_cloud,
    save_mesh,
    winding_numbers,
)


class TestWatertight:
    def test_box_is_watertight(self):
        assert make_box((0.1, 0.2, 0.15)).is_watertight()

    def test_cube_missing_face_reports_four_boundary_edges(self):
        box = make_box((0.1, 0.1, 0.1))
        opened = TriangleMesh(box.vertices, box.triangles[2:])  # drop bottom face
        boundary, nonmanifold = opened.boundary_edge_count()
        assert boundary == 4
        assert nonmanifold == 0
        with pytest.raises(OpenMeshError, match="4 boundary"):
            opened.assert_watertight()

    def test_icosphere_watertight(self):
        assert make_icosphere(0.05, 2).is_watertight()

    def test_capsule_watertight(self):
        cap = make_capsule([0, 0, 0], [0, 0, 0.04], 0.008)
        assert cap.is_watertight()


class TestPrimitives:
    def test_icosphere_vertices_on_radius(self):
        m = make_icosphere(0.05, 3)
        r = np.linalg.norm(m.vertices, axis=1)
        assert np.allclose(r, 0.05, atol=1e-12)

    def test_winding_inside_outside(self):
        m = make_icosphere(0.05, 2)
        w = winding_numbers(np.array([[0.0, 0.0, 0.0], [0.2, 0.0, 0.0]]), m)
        assert abs(w[0] - 1.0) < 1e-6
        assert abs(w[1]) < 1e-6

    def test_box_winding(self):
        m = make_box((0.08, 0.1, 0.06), center=(0.01, -0.02, 0.005))
        w = winding_numbers(np.array([[0.01, -0.02, 0.005], [0.5, 0.5, 0.5]]), m)
        assert abs(w[0] - 1.0) < 1e-6
        assert abs(w[1]) < 1e-6

    def test_capsule_contains_segment(self):
        cap = make_capsule([0.01, 0.0, 0.0], [0.05, 0.0, 0.0], 0.01)
        probe = np.array([[0.03, 0.0, 0.0], [0.03, 0.0, 0.05]])
        w = winding_numbers(probe, cap)
        assert abs(w[0] - 1.0) < 1e-6
        assert abs(w[1]) < 1e-6


class TestDistances:
    def test_sphere_distance_matches_analytic(self):
        m = make_icosphere(0.05, 4)
        rng = np.random.default_rng(0)
        pts = rng.uniform(-0.12, 0.12, size=(200, 3))
        d, _ = point_mesh_distance(pts, m)
        analytic = np.abs(np.linalg.norm(pts, axis=1) - 0.05)
        assert np.max(np.abs(d - analytic)) < 2e-4  # tessellation error bound

    def test_closest_point_consistent_with_distance(self):
        m = make_capsule([0, 0, 0], [0.04, 0, 0], 0.009)
        rng = np.random.default_rng(1)
        pts = rng.uniform(-0.05, 0.08, size=(100, 3))
        dist, _, closest, bary = closest_points_on_mesh(pts, m)
        assert np.allclose(np.linalg.norm(pts - closest, axis=1), dist, atol=1e-12)
        assert np.allclose(bary.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(bary >= -1e-12)

    def test_brute_force_oracle(self):
        # independent numpy route: distance to every triangle via closest-point
        from mvhop.mesh import closest_points_on_triangles
        m = make_box((0.05, 0.07, 0.04))
        rng = np.random.default_rng(2)
        pts = rng.uniform(-0.08, 0.08, size=(50, 3))
        d_kernel, _ = point_mesh_distance(pts, m)
        va, vb, vc = m.triangle_corners()
        n_tri = len(m.triangles)
        all_d = np.empty((len(pts), n_tri))
        for j in range(n_tri):
            closest, _ = closest_points_on_triangles(
                pts, np.repeat(va[j][None], len(pts), 0),
                np.repeat(vb[j][None], len(pts), 0),
                np.repeat(vc[j][None], len(pts), 0))
            all_d[:, j] = np.linalg.norm(pts - closest, axis=1)
        assert np.allclose(d_kernel, all_d.min(axis=1), atol=1e-12)


class TestSampling:
    def test_samples_lie_on_surface(self):
        m = make_icosphere(0.05, 2)
        pts = sample_surface(m, 500, np.random.default_rng(3))
        d, _ = point_mesh_distance(pts, m)
        assert np.max(d) < 1e-9

    def test_deterministic_for_seed(self):
        m = make_box((0.1, 0.1, 0.1))
        a = sample_surface(m, 100, np.random.default_rng(42))
        b = sample_surface(m, 100, np.random.default_rng(42))
        assert np.array_equal(a, b)


class TestPlyIO:
    def test_mesh_round_trip_binary(self, tmp_path):
        m = make_icosphere(0.04, 1)
        path = tmp_path / "m.ply"
        save_mesh(path, m, binary=True)
        back = load_mesh(path)
        assert np.allclose(back.vertices, m.vertices, atol=1e-7)  # float32 file
        assert np.array_equal(back.triangles, m.triangles)

    def test_mesh_round_trip_ascii(self, tmp_path):
        m = make_box((0.1, 0.05, 0.07))
        path = tmp_path / "m.ply"
        save_mesh(path, m, binary=False)
        back = load_mesh(path)
        assert np.allclose(back.vertices, m.vertices, atol=1e-6)
        assert np.array_equal(back.triangles, m.triangles)

    def test_cloud_round_trip_with_entity(self, tmp_path):
        rng = np.random.default_rng(4)
        pts = rng.normal(size=(37, 3)).astype(np.float32).astype(np.float64)
        entity = rng.integers(-1, 3, size=37)
        path = tmp_path / "c.ply"
        save_cloud(path, pts, entity=entity)
        back_pts, back_entity = load_cloud(path)
        assert np.array_equal(back_pts, pts)
        assert np.array_equal(back_entity, entity)

    def test_zero_area_triangles_dropped_on_load(self, tmp_path):
        m = make_box((0.1, 0.1, 0.1))
        tris = np.vstack([m.triangles, [[0, 0, 1], [2, 2, 2]]])
        bad = TriangleMesh(m.vertices, tris)
        path = tmp_path / "bad.ply"
        save_mesh(path, bad)
        back = load_mesh(path)
        assert len(back.triangles) == len(m.triangles)

    def test_points_only_file_is_not_a_mesh(self, tmp_path):
        path = tmp_path / "c.ply"
        save_cloud(path, np.zeros((5, 3)))
        with pytest.raises(ValueError, match="no face"):
            load_mesh(path)
