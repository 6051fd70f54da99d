import numpy as np
import pytest
from hypothesis import given, strategies as st

from leafsep.cloud import UNLABELED
from leafsep.errors import IndexMismatch
from leafsep.metrics import (LeafLevelReport, cover_table, format_csv, format_text, leaf_level,
                             match_regions, point_level)


def leaf_with_counts(num_blue, mp, fp):
    """gt/seg arrays for one GT leaf (label 0) and its matched region (label 0).

    Missed points go to region 1, false points come from GT leaf 1.
    """
    gt = np.r_[np.zeros(num_blue + mp, dtype=int), np.ones(fp, dtype=int)]
    seg = np.r_[np.zeros(num_blue, dtype=int), np.ones(mp, dtype=int), np.zeros(fp, dtype=int)]
    return seg, gt


def scene_from_groups(groups, size=100):
    """GT leaves of ``size`` points; groups[r] lists the GT leaves merged into region r."""
    gt, seg = [], []
    for r, leaves in enumerate(groups):
        for g in leaves:
            gt.append(np.full(size, g))
            seg.append(np.full(size, r))
    return np.concatenate(seg), np.concatenate(gt)


def brute_leaf_level(seg, gt, thr=0.70):
    """Literal dictionary-based reading of the counting rules."""
    gts = sorted(set(gt.tolist()) - {UNLABELED})
    regions = sorted(set(seg.tolist()) - {UNLABELED})
    cover = {}
    for g in gts:
        size = sum(1 for x in gt if x == g)
        for s in regions:
            cover[g, s] = sum(1 for a, b in zip(seg, gt) if a == s and b == g) / size
    tp_of = {s: 0 for s in regions}
    fns = 0
    for g in gts:
        best = max(regions, key=lambda s: (cover[g, s], -s)) if regions else None
        if best is not None and cover[g, best] > thr:
            tp_of[best] += 1
        if not regions or cover[g, best] <= 1 - thr:
            fns += 1
    tps = sum(1 for v in tp_of.values() if v > 0)
    fps = sum(v - 1 for v in tp_of.values() if v > 1)
    return tps, fps, fns


class TestMatching:
    def test_identity(self):
        gt = np.repeat(np.arange(4), 10)
        assert match_regions(gt, gt) == {0: 0, 1: 1, 2: 2, 3: 3}

    def test_merged_region_matches_both(self):
        seg, gt = scene_from_groups([[0, 1], [2]])
        assert match_regions(seg, gt) == {0: 0, 1: 0, 2: 1}

    def test_tie_goes_to_lower_label(self):
        gt = np.zeros(4, dtype=int)
        assert match_regions(np.array([5, 5, 2, 2]), gt) == {0: 2}

    @given(st.integers(0, 10_000))
    def test_permutation_invariance(self, seed):
        rng = np.random.default_rng(seed)
        gt = rng.integers(0, 5, 300)
        seg = np.where(rng.random(300) < 0.8, gt, rng.integers(0, 5, 300))
        ps, pg = rng.permutation(5), rng.permutation(5)
        base = {(r.num_gt, r.rp, r.num_blue) for r in point_level(seg, gt)}
        perm = {(r.num_gt, r.rp, r.num_blue) for r in point_level(ps[seg], pg[gt])}
        assert base == perm
        assert leaf_level(seg, gt) == leaf_level(ps[seg], pg[gt])

    def test_index_mismatch(self):
        with pytest.raises(IndexMismatch):
            match_regions(np.zeros(3), np.zeros(4))
        with pytest.raises(IndexMismatch):
            leaf_level(np.zeros(3), np.zeros(4))


class TestPointLevel:
    def test_perfect(self):
        gt = np.repeat(np.arange(3), [5, 7, 9])
        for r in point_level(gt, gt):
            assert r.cover_rate == 1.0 and r.mp == 0 and r.fp == 0

    def test_table_row_partial_leaf(self):
        # Num_gt=528, Mp=160, Fp=5 -> Num_blue=368, Rp=373, 69.7%
        seg, gt = leaf_with_counts(368, 160, 5)
        row = point_level(seg, gt)[0]
        assert (row.num_gt, row.rp, row.mp, row.fp, row.num_blue) == (528, 373, 160, 5, 368)
        assert round(100 * row.cover_rate, 1) == 69.7

    def test_table_row_good_leaf(self):
        seg, gt = leaf_with_counts(782, 9, 0)
        row = point_level(seg, gt)[0]
        assert (row.num_gt, row.rp, row.mp, row.fp, row.num_blue) == (791, 782, 9, 0, 782)
        assert round(100 * row.cover_rate, 1) == 98.9

    @given(st.integers(0, 10_000))
    def test_accounting_identities(self, seed):
        rng = np.random.default_rng(seed)
        n = 400
        gt = rng.integers(0, 6, n)
        seg = np.where(rng.random(n) < 0.7, gt, rng.integers(0, 9, n))
        rows = point_level(seg, gt)
        for r in rows:
            assert r.num_gt == r.num_blue + r.mp
            assert r.rp == r.num_blue + r.fp
        assert sum(r.num_blue + r.mp for r in rows) == n
        assert sum(r.num_blue for r in rows) <= n

    def test_unmatched_leaf(self):
        gt = np.array([0, 0, 1, 1])
        seg = np.array([0, 0, UNLABELED, UNLABELED])
        rows = point_level(seg, gt)
        assert rows[1].seg_label is None and rows[1].mp == 2 and rows[1].cover_rate == 0


class TestLeafLevel:
    def test_perfect(self):
        gt = np.repeat(np.arange(5), 20)
        rep = leaf_level(gt, gt)
        assert (rep.tps, rep.fps, rep.fns) == (5, 0, 0)
        assert rep.recall == rep.precision == rep.f_measure == 1.0

    def test_table_row_one_merge(self):
        # 37 leaves, one region holds two of them -> TP 36, FP 1, FN 0
        groups = [[0, 1]] + [[g] for g in range(2, 37)]
        rep = leaf_level(*scene_from_groups(groups))
        assert (rep.tps, rep.reference, rep.fps, rep.fns) == (36, 37, 1, 0)
        assert round(100 * rep.recall, 2) == 100.0
        assert round(100 * rep.precision, 2) == 97.30
        assert round(100 * rep.f_measure, 2) == 98.63

    def test_table_row_six_merges(self):
        # 23 leaves, six regions hold two each -> TP 17, FP 6
        groups = [[2 * i, 2 * i + 1] for i in range(6)] + [[g] for g in range(12, 23)]
        rep = leaf_level(*scene_from_groups(groups))
        assert (rep.tps, rep.reference, rep.fps, rep.fns) == (17, 23, 6, 0)
        assert round(100 * rep.precision, 1) == 73.9
        assert round(100 * rep.f_measure) == 85

    def test_three_merged_gives_two_fps(self):
        rep = leaf_level(*scene_from_groups([[0, 1, 2]]))
        assert (rep.tps, rep.fps, rep.fns) == (1, 2, 0)

    def test_threshold_is_strict(self):
        gt = np.zeros(10, dtype=int)
        seg = np.r_[np.zeros(7, dtype=int), np.arange(1, 4)]
        assert leaf_level(seg, gt).tps == 0  # exactly 70% is not a TP
        seg = np.r_[np.zeros(3, dtype=int), np.arange(1, 8)]
        assert leaf_level(seg, gt).fns == 1  # best region exactly 30% is an FN

    def test_fragmented_leaf_is_fn(self):
        gt = np.zeros(100, dtype=int)
        rep = leaf_level(np.arange(100) // 25, gt)
        assert (rep.tps, rep.fps, rep.fns) == (0, 0, 1)
        assert rep.recall == 0 and rep.precision == 0 and rep.f_measure == 0

    @given(st.integers(0, 100_000), st.integers(1, 8), st.integers(20, 500))
    def test_matches_brute_force(self, seed, n_leaves, n):
        rng = np.random.default_rng(seed)
        gt = rng.integers(0, n_leaves, n)
        # mixture of merges, splits and noise
        merge = rng.integers(0, n_leaves, n_leaves)
        seg = merge[gt] * 2 + (rng.random(n) < rng.uniform(0, 0.5))
        seg = np.where(rng.random(n) < 0.1, rng.integers(0, 2 * n_leaves, n), seg)
        rep = leaf_level(seg, gt)
        assert (rep.tps, rep.fps, rep.fns) == brute_leaf_level(seg, gt)
        assert rep.reference == len(set(gt.tolist()))

    def test_empty_denominators(self):
        rep = LeafLevelReport(0, 0, 0, 0)
        assert rep.recall == rep.precision == rep.f_measure == 0.0


class TestFormats:
    def test_csv_columns_and_rows(self):
        seg, gt = leaf_with_counts(368, 160, 5)
        text = format_csv(point_level(seg, gt))
        lines = text.strip().splitlines()
        assert lines[0] == "leaf,Num_gt,Rp,Mp,Fp,Num_blue,Cover_rate"
        assert lines[1] == "0,528,373,160,5,368,69.7%"

    def test_text_summary(self):
        groups = [[0, 1]] + [[g] for g in range(2, 37)]
        seg, gt = scene_from_groups(groups)
        text = format_text(point_level(seg, gt), leaf_level(seg, gt))
        summary = text.strip().splitlines()[-1].split()
        assert summary[:4] == ["36", "37", "1", "0"]
        assert summary[4:7] == ["100.00%", "97.30%", "98.63%"]

    def test_cover_table_keys(self):
        gt = np.repeat(np.arange(2), 3)
        rows = cover_table(point_level(gt, gt))
        assert list(rows[0]) == ["leaf", "Num_gt", "Rp", "Mp", "Fp", "Num_blue", "Cover_rate"]
