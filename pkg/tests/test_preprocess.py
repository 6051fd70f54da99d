import numpy as np
import pytest
from hypothesis import given, strategies as st

import oracles
from leafsep.cloud import PointCloud
from leafsep.errors import ConfigError, MissingColor
from leafsep.preprocess import (PRESETS, FilterSpec, color_filter, greenness, knn_mean_distance, preset,
                                radius_outlier_filter, region_filter, run_chain, statistical_knn_filter,
                                voxel_downsample)


def potted_plant(seed=0):
    """Ground plane, a gray pot, a green canopy disc and a few stray points; class per point."""
    rng = np.random.default_rng(seed)
    g = oracles.grid(30, spacing=0.004) - [0.06, 0.06, 0]
    ground = g
    ang = rng.uniform(0, 2 * np.pi, 600)
    pot = np.c_[0.03 * np.cos(ang), 0.03 * np.sin(ang), rng.uniform(0.0, 0.04, 600)]
    rad = np.sqrt(rng.uniform(0, 1, 2500)) * 0.05
    th = rng.uniform(0, 2 * np.pi, 2500)
    canopy = np.c_[rad * np.cos(th), rad * np.sin(th), 0.15 + 0.001 * rng.normal(size=2500)]
    stray = rng.uniform([-0.1, -0.1, 0.25], [0.1, 0.1, 0.4], size=(6, 3))
    pos = np.vstack([ground, pot, canopy, stray])
    cls = np.repeat([0, 1, 2, 3], [len(ground), len(pot), len(canopy), len(stray)])
    colors = np.where((cls == 2)[:, None], [40, 160, 50], [120, 110, 100]).astype(np.uint8)
    return PointCloud(pos, colors), cls


class TestRegion:
    def test_all_inside_is_identity(self):
        c = PointCloud(oracles.grid(5))
        out = region_filter(c, [-1, -1, -1], [10, 10, 10])
        assert np.array_equal(out.positions, c.positions)

    def test_canopy_above_ground(self):
        cloud, cls = potted_plant()
        out = region_filter(cloud, [-np.inf, -np.inf, 0.05], [np.inf, np.inf, np.inf])
        assert set(cls[out.origin]) == {2, 3}
        assert len(out) == int((cls >= 2).sum())

    def test_disjoint_box_gives_empty(self):
        assert len(region_filter(PointCloud(oracles.grid(3)), [50, 50, 50], [60, 60, 60])) == 0

    def test_inverted_box(self):
        with pytest.raises(ConfigError):
            region_filter(PointCloud(oracles.grid(3)), [1, 0, 0], [0, 1, 1])

    def test_closed_faces(self):
        out = region_filter(PointCloud(oracles.grid(3)), [0, 0, 0], [1, 1, 0])
        assert len(out) == 4


class TestRadiusOutlier:
    def test_isolated_point_removed(self):
        p = np.vstack([oracles.grid(10), [[100, 100, 100]]])
        out = radius_outlier_filter(PointCloud(p), 1.5, 1)
        assert len(out) == 100 and 100 not in out.origin

    def test_zero_threshold_is_identity(self):
        c = PointCloud(np.random.default_rng(0).uniform(size=(50, 3)))
        assert np.array_equal(radius_outlier_filter(c, 0.01, 0).positions, c.positions)

    def test_grid_interior(self):
        s = 0.01
        p = oracles.grid(12, spacing=s)
        out = radius_outlier_filter(PointCloud(p), 1.5 * s, 9)
        assert len(out) == 0  # a plain grid has at most 8 neighbors at 1.5s
        out = radius_outlier_filter(PointCloud(p), 1.5 * s, 8)
        assert np.array_equal(np.sort(out.origin), np.flatnonzero(oracles.ring_depth(12) >= 1))

    @given(st.integers(5, 80), st.floats(0.05, 0.5), st.integers(0, 8), st.integers(0, 10**6))
    def test_matches_count_oracle(self, n, r, thr, seed):
        p = np.random.default_rng(seed).uniform(size=(n, 3))
        out = radius_outlier_filter(PointCloud(p), r, thr)
        keep = oracles.radius_counts(p, r) >= thr if thr > 0 else np.ones(n, bool)
        assert np.array_equal(out.origin, np.flatnonzero(keep))


def circle(n, radius=1.0):
    t = 2 * np.pi * np.arange(n) / n
    return np.c_[radius * np.cos(t), radius * np.sin(t), np.zeros(n)]


class TestStatistical:
    def test_constant_statistic_is_identity(self):
        # every point of an evenly spaced circle has the same k-NN statistic
        c = PointCloud(circle(60))
        assert len(statistical_knn_filter(c, 4, 1.0)) == 60

    def test_duplicated_cloud_is_identity(self):
        p = circle(40)
        assert len(statistical_knn_filter(PointCloud(np.vstack([p, p])), 4, 1.0)) == 80

    def test_finite_grid_trims_edges(self):
        # on a finite grid the edge statistic is larger, so a 1-sigma cut is not the identity
        out = statistical_knn_filter(PointCloud(oracles.grid(10)), 4, 1.0)
        assert len(out) < 100

    def test_far_outlier_removed(self):
        s = 0.01
        p = np.vstack([oracles.grid(10, spacing=s), [[0.045, 0.045, 10 * s]]])
        out = statistical_knn_filter(PointCloud(p), 4, 1.0)
        assert 100 not in out.origin

    def test_size_guard(self):
        with pytest.raises(ConfigError):
            statistical_knn_filter(PointCloud(oracles.grid(2)), 4, 1.0)

    @given(st.integers(8, 80), st.integers(1, 6), st.floats(0.2, 3.0), st.integers(0, 10**6))
    def test_matches_oracle(self, n, k, mul, seed):
        p = np.random.default_rng(seed).uniform(size=(n, 3))
        stat = oracles.knn_mean_distance(p, k)
        assert np.allclose(knn_mean_distance(PointCloud(p), k), stat, rtol=0, atol=1e-12)
        cut = stat.mean() + mul * stat.std()
        keep = stat <= cut * (1 + 1e-12)
        out = statistical_knn_filter(PointCloud(p), k, mul)
        assert np.array_equal(out.origin, np.flatnonzero(keep))


class TestColor:
    def test_pure_green_kept(self):
        c = PointCloud(np.zeros((1, 3)), [[0, 255, 0]])
        assert greenness(c.colors)[0] == pytest.approx(2.0)
        assert len(color_filter(c, 0.5)) == 1

    def test_gray_removed(self):
        c = PointCloud(np.zeros((1, 3)), [[128, 128, 128]])
        assert greenness(c.colors)[0] == pytest.approx(0.0)
        assert len(color_filter(c, 0.1)) == 0

    def test_scene_green_survivors(self):
        cloud, cls = potted_plant()
        out = color_filter(cloud, 0.1)
        assert np.array_equal(out.origin, np.flatnonzero(cls == 2))

    def test_needs_color(self):
        with pytest.raises(MissingColor):
            color_filter(PointCloud(np.zeros((2, 3))), 0.1)


class TestVoxel:
    def test_single_voxel(self):
        p = np.random.default_rng(0).uniform(0, 0.5, size=(20, 3))
        out = voxel_downsample(PointCloud(p), 1.0)
        assert len(out) == 1 and np.allclose(out.positions[0], p.mean(axis=0))

    def test_fine_voxels_identity_up_to_order(self):
        p = oracles.grid(6, spacing=1.0)
        out = voxel_downsample(PointCloud(p), 0.3)
        assert sorted(map(tuple, out.positions)) == sorted(map(tuple, p))

    def test_square_corners(self):
        p = np.array([[0, 0, 0], [2, 0, 0], [0, 2, 0], [2, 2, 0]], dtype=float)
        out = voxel_downsample(PointCloud(p), 2.0)
        assert out.positions.tolist() == [[1.0, 1.0, 0.0]]

    def test_colors_averaged(self):
        c = PointCloud([[0, 0, 0], [0.1, 0, 0]], [[0, 100, 0], [0, 200, 0]])
        assert voxel_downsample(c, 1.0).colors.tolist() == [[0, 150, 0]]

    def test_bad_size(self):
        with pytest.raises(ConfigError):
            voxel_downsample(PointCloud(oracles.grid(2)), 0.0)


class TestChain:
    def test_empty_chain(self):
        c = PointCloud(oracles.grid(3))
        out, report = run_chain(c, [])
        assert out is c and report == []

    def test_potted_plant_chain(self):
        cloud, cls = potted_plant()
        chain = [FilterSpec("Region", {"box_min": [None, None, 0.05], "box_max": [None, None, None]}),
                 FilterSpec("RadiusOutlier", {"radius": 0.005, "n_threshold": 3}),
                 FilterSpec("StatisticalKNN", {"k": 8, "std_mul": 3.0})]
        out, report = run_chain(cloud, chain)
        assert set(cls[out.origin]) == {2}
        assert len(out) >= 0.95 * (cls == 2).sum()
        assert [r.kind for r in report] == ["Region", "RadiusOutlier", "StatisticalKNN"]
        assert report[0].n_in == len(cloud) and report[-1].n_out == len(out)

    def test_preset_stage_order(self):
        cloud, _ = potted_plant()
        _, report = run_chain(cloud, preset("hedera"))
        assert [r.kind for r in report] == ["Region", "RadiusOutlier", "VoxelDownsample"]
        assert all(a.n_out == b.n_in for a, b in zip(report, report[1:]))

    def test_unknown_parameter(self):
        with pytest.raises(ConfigError):
            FilterSpec("RadiusOutlier", {"radius": 1, "n_threshold": 2, "bogus": 1}).validate()

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            FilterSpec.from_dict({"kind": "Median", "params": {}})

    def test_dict_round_trip(self):
        for chain in PRESETS.values():
            for f in chain:
                assert FilterSpec.from_dict(f.to_dict()) == f

    def test_validation_before_execution(self):
        bad = [FilterSpec("Color", {"min_greenness": 0.1}), FilterSpec("VoxelDownsample", {})]
        with pytest.raises(ConfigError):
            run_chain(PointCloud(oracles.grid(3)), bad)
