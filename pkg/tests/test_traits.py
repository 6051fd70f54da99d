import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial import ConvexHull
from scipy.spatial.transform import Rotation

import oracles
from leafsep.cloud import PointCloud
from leafsep.errors import DegenerateSurface, TooSparse
from leafsep.preprocess import voxel_downsample
from leafsep.traits import (TriangleMesh, estimate_traits, leaf_area, leaf_length_width,
                            smooth_and_downsample, triangulate)


def rigid(p, seed):
    rng = np.random.default_rng(seed)
    rot = Rotation.random(random_state=seed)
    return rot.apply(p) + rng.uniform(-1, 1, 3)


def rectangle(lx=0.10, ly=0.04, s=0.002):
    nx, ny = round(lx / s) + 1, round(ly / s) + 1
    i, j = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
    return np.c_[i.ravel() * (lx / (nx - 1)), j.ravel() * (ly / (ny - 1)), np.zeros(i.size)]


def edges_used(mesh):
    counts = {}
    for t in mesh.triangles.tolist():
        for a, b in ((t[0], t[1]), (t[1], t[2]), (t[0], t[2])):
            e = (min(a, b), max(a, b))
            counts[e] = counts.get(e, 0) + 1
    return counts


class TestMeshArea:
    def test_right_triangle(self):
        mesh = TriangleMesh([[0, 0, 0], [0.03, 0, 0], [0, 0.04, 0]], [[0, 1, 2]])
        assert leaf_area(mesh) == pytest.approx(6.0, rel=1e-12)

    def test_unit_square(self):
        mesh = TriangleMesh([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]], [[0, 1, 2], [0, 2, 3]])
        assert mesh.triangle_areas().sum() == pytest.approx(1.0)
        cm = TriangleMesh(mesh.vertices * 0.01, mesh.triangles)
        assert leaf_area(cm) == pytest.approx(1.0)

    def test_bad_index(self):
        with pytest.raises(ValueError):
            TriangleMesh(np.zeros((3, 3)), [[0, 1, 3]])


class TestTriangulate:
    def test_three_points(self):
        mesh = triangulate(PointCloud([[0, 0, 0], [0.01, 0, 0], [0, 0.01, 0]]))
        assert mesh.triangles.tolist() == [[0, 1, 2]]

    def test_collinear_and_tiny(self):
        with pytest.raises(DegenerateSurface):
            triangulate(PointCloud(np.c_[np.arange(10.0), np.zeros(10), np.zeros(10)]))
        with pytest.raises(DegenerateSurface):
            triangulate(PointCloud([[0, 0, 0], [1, 0, 0]]))

    def test_square_grid_area(self):
        # side 5 cm, 1 mm spacing -> 25 cm^2
        p = oracles.grid(51, spacing=0.001)
        mesh = triangulate(PointCloud(p))
        assert leaf_area(mesh) == pytest.approx(25.0, rel=0.01)

    def test_mesh_is_valid_manifold(self):
        rng = np.random.default_rng(3)
        p = oracles.grid(30, spacing=0.001)
        p[:, :2] += rng.uniform(-0.15, 0.15, (len(p), 2)) * 0.001
        mesh = triangulate(PointCloud(p))
        assert (mesh.triangle_areas() > 0).all()
        assert max(edges_used(mesh).values()) <= 2
        assert len({tuple(sorted(t)) for t in mesh.triangles.tolist()}) == len(mesh.triangles)

    def test_cylinder_patch(self):
        # radius 5 cm, 1 rad of arc, 6 cm tall: analytic lateral area R * theta * h
        R, theta, h, s = 0.05, 1.0, 0.06, 0.001
        na, nh = round(R * theta / s) + 1, round(h / s) + 1
        a, z = np.meshgrid(np.linspace(0, theta, na), np.linspace(0, h, nh), indexing="ij")
        p = np.c_[R * np.cos(a.ravel()), R * np.sin(a.ravel()), z.ravel()]
        area = leaf_area(triangulate(PointCloud(p)))
        assert area == pytest.approx(R * theta * h * 1e4, rel=0.02)

    def test_convex_sample_matches_hull(self):
        # jittered samples of an ellipse, spacing well below L/50
        rng = np.random.default_rng(7)
        s = 0.001
        g = oracles.grid(121, spacing=s) - [0.06, 0.06, 0]
        g[:, :2] += rng.uniform(-0.15, 0.15, (len(g), 2)) * s
        inside = (g[:, 0] / 0.06) ** 2 + (g[:, 1] / 0.035) ** 2 <= 1
        p = g[inside]
        hull = ConvexHull(p[:, :2]).volume * 1e4
        assert leaf_area(triangulate(PointCloud(p))) == pytest.approx(hull, rel=0.02)

    def test_area_rigid_and_scale(self):
        # jittered: exact lattices have k-NN distance ties that rounding breaks differently
        p = rectangle(0.05, 0.03, 0.001)
        p[:, :2] += np.random.default_rng(4).uniform(-0.15, 0.15, (len(p), 2)) * 0.001
        p[:, 2] = 2.0 * (p[:, 0] - 0.025) ** 2
        base = leaf_area(triangulate(PointCloud(p)))
        moved = leaf_area(triangulate(PointCloud(rigid(p, 1))))
        assert moved == pytest.approx(base, rel=1e-9)
        scaled = leaf_area(triangulate(PointCloud(p * 2.5)))
        assert abs(scaled / (2.5 ** 2 * base) - 1) < 1e-9


class TestLengthWidth:
    def test_axis_aligned_rectangle(self):
        length, width = leaf_length_width(PointCloud(rectangle()))
        assert abs(length - 10) < 1e-6 and abs(width - 4) < 1e-6

    @settings(max_examples=25)
    @given(st.integers(0, 10_000))
    def test_rigid_motion(self, seed):
        length, width = leaf_length_width(PointCloud(rigid(rectangle(), seed)))
        assert abs(length - 10) < 1e-6 and abs(width - 4) < 1e-6

    def test_length_at_least_width(self):
        # rotated in-plane so that y is the long side
        p = rectangle()[:, [1, 0, 2]]
        length, width = leaf_length_width(PointCloud(p))
        assert length >= width and abs(length - 10) < 1e-6

    def test_degenerate(self):
        with pytest.raises(DegenerateSurface):
            leaf_length_width(PointCloud(np.c_[np.arange(5.0), np.zeros(5), np.zeros(5)]))


class TestSmoothing:
    def test_flat_plane_unchanged(self):
        p = rectangle(0.04, 0.03, 0.001)
        out = smooth_and_downsample(PointCloud(p), None)
        assert np.abs(out.positions - p).max() < 1e-12

    def test_noise_reduction(self):
        s = 0.001
        rng = np.random.default_rng(0)
        p = oracles.grid(50, spacing=s)
        p[:, :2] += rng.uniform(-0.15, 0.15, (len(p), 2)) * s
        p[:, 2] = rng.normal(0, 0.2 * s, len(p))
        out = smooth_and_downsample(PointCloud(p), None, smooth_iters=3)
        before = math.sqrt((p[:, 2] ** 2).mean())
        after = math.sqrt((out.positions[:, 2] ** 2).mean())
        assert after <= 0.5 * before

    def test_zero_iterations_is_voxel_downsample(self):
        rng = np.random.default_rng(1)
        cloud = PointCloud(rng.uniform(0, 0.02, (500, 3)))
        out = smooth_and_downsample(cloud, 0.003, smooth_iters=0)
        ref = voxel_downsample(cloud, 0.003)
        assert np.array_equal(out.positions, ref.positions)

    def test_too_sparse(self):
        with pytest.raises(TooSparse):
            smooth_and_downsample(PointCloud(oracles.grid(3)), None)
        with pytest.raises(TooSparse):
            smooth_and_downsample(PointCloud(oracles.grid(10, spacing=0.001)), 0.05)


class TestEstimate:
    def test_flat_rectangle(self):
        t, mesh = estimate_traits(PointCloud(rectangle(0.10, 0.04, 0.001)), return_mesh=True)
        assert t.area == pytest.approx(40.0, rel=0.01)
        assert t.length == pytest.approx(10.0, abs=1e-6)
        assert t.width == pytest.approx(4.0, abs=1e-6)
        assert len(mesh.triangles) > 0

    def test_rigid_invariance(self):
        rng = np.random.default_rng(2)
        p = rectangle(0.06, 0.03, 0.001)
        p[:, 2] = 3.0 * (p[:, 0] - 0.03) ** 2 + rng.normal(0, 0.0002, len(p))
        a = estimate_traits(PointCloud(p))
        b = estimate_traits(PointCloud(rigid(p, 5)))
        for x, y in ((a.area, b.area), (a.length, b.length), (a.width, b.width)):
            assert abs(x - y) <= 1e-6 * x
        assert a.length >= a.width > 0
