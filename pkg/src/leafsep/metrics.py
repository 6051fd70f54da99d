"""Point-level and leaf-level evaluation against ground-truth labels."""
from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .cloud import UNLABELED
from .errors import IndexMismatch


@dataclass
class LeafMatch:
    gt_label: int
    seg_label: Optional[int]
    num_gt: int
    rp: int
    num_blue: int
    mp: int
    fp: int

    @property
    def cover_rate(self) -> float:
        return self.num_blue / self.num_gt if self.num_gt else 0.0


@dataclass
class LeafLevelReport:
    tps: int
    fps: int
    fns: int
    reference: int

    @property
    def recall(self) -> float:
        d = self.tps + self.fns
        return self.tps / d if d else 0.0

    @property
    def precision(self) -> float:
        d = self.tps + self.fps
        return self.tps / d if d else 0.0

    @property
    def f_measure(self) -> float:
        d = 2 * self.tps + self.fps + self.fns
        return 2 * self.tps / d if d else 0.0

    def to_dict(self) -> dict:
        return {**asdict(self), "recall": self.recall, "precision": self.precision,
                "f_measure": self.f_measure}


def _check(seg, gt):
    seg = np.asarray(seg, dtype=np.int64)
    gt = np.asarray(gt, dtype=np.int64)
    if seg.shape != gt.shape:
        raise IndexMismatch(f"segmentation covers {seg.shape} points, ground truth {gt.shape}")
    return seg, gt


def _contingency(seg, gt):
    """Overlap counts between every GT leaf and every segment (unlabeled points ignored)."""
    mask = (seg != UNLABELED) & (gt != UNLABELED)
    gt_ids = np.unique(gt[gt != UNLABELED])
    seg_ids = np.unique(seg[seg != UNLABELED])
    gi = np.searchsorted(gt_ids, gt[mask])
    si = np.searchsorted(seg_ids, seg[mask])
    table = np.zeros((len(gt_ids), len(seg_ids)), dtype=np.int64)
    np.add.at(table, (gi, si), 1)
    return gt_ids, seg_ids, table


def match_regions(seg, gt) -> dict:
    """Map each GT leaf to the segment overlapping it most (ties: lower segment label)."""
    seg, gt = _check(seg, gt)
    gt_ids, seg_ids, table = _contingency(seg, gt)
    out = {}
    for i, g in enumerate(gt_ids):
        row = table[i]
        out[int(g)] = int(seg_ids[np.argmax(row)]) if len(row) and row.max() > 0 else None
    return out


def point_level(seg, gt, matching: Optional[dict] = None) -> list[LeafMatch]:
    seg, gt = _check(seg, gt)
    if matching is None:
        matching = match_regions(seg, gt)
    rows = []
    for g in sorted(matching):
        s = matching[g]
        in_gt = gt == g
        num_gt = int(in_gt.sum())
        if s is None:
            rows.append(LeafMatch(g, None, num_gt, 0, 0, num_gt, 0))
            continue
        in_seg = seg == s
        blue = int((in_gt & in_seg).sum())
        rp = int(in_seg.sum())
        rows.append(LeafMatch(g, s, num_gt, rp, blue, num_gt - blue, rp - blue))
    return rows


def leaf_level(seg, gt, matching: Optional[dict] = None, tp_threshold: float = 0.70) -> LeafLevelReport:
    """TP/FP/FN at the coverage threshold.

    A segment covering more than ``tp_threshold`` of k GT leaves yields one TP
    and k - 1 FPs. A GT leaf whose best single segment covers at most
    ``1 - tp_threshold`` of it is an FN.
    """
    seg, gt = _check(seg, gt)
    if matching is None:
        matching = match_regions(seg, gt)
    gt_ids, seg_ids, table = _contingency(seg, gt)
    sizes = np.array([int((gt == g).sum()) for g in gt_ids])
    frac = table / np.maximum(sizes, 1)[:, None] if table.size else table.astype(float)
    covered = np.zeros(len(seg_ids), dtype=np.int64)
    col = {int(s): j for j, s in enumerate(seg_ids)}
    fns = 0
    for i, g in enumerate(gt_ids):
        s = matching.get(int(g))
        if s is not None and frac[i, col[s]] > tp_threshold:
            covered[col[s]] += 1
        best = frac[i].max() if frac.shape[1] else 0.0
        if best <= 1 - tp_threshold:
            fns += 1
    tps = int((covered > 0).sum())
    fps = int(np.maximum(covered - 1, 0).sum())
    return LeafLevelReport(tps, fps, fns, len(gt_ids))


def cover_table(rows: list[LeafMatch]) -> list[dict]:
    return [{"leaf": r.gt_label, "Num_gt": r.num_gt, "Rp": r.rp, "Mp": r.mp, "Fp": r.fp,
             "Num_blue": r.num_blue, "Cover_rate": r.cover_rate} for r in rows]


def format_csv(rows: list[LeafMatch]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["leaf", "Num_gt", "Rp", "Mp", "Fp", "Num_blue", "Cover_rate"])
    for r in rows:
        w.writerow([r.gt_label, r.num_gt, r.rp, r.mp, r.fp, r.num_blue, f"{100 * r.cover_rate:.1f}%"])
    return buf.getvalue()


def format_text(rows: list[LeafMatch], report: LeafLevelReport) -> str:
    head = f"{'leaf':>5} {'Num_gt':>7} {'Rp':>7} {'Mp':>7} {'Fp':>7} {'Num_blue':>9} {'Cover':>7}"
    lines = [head]
    for r in rows:
        lines.append(f"{r.gt_label:>5} {r.num_gt:>7} {r.rp:>7} {r.mp:>7} {r.fp:>7} "
                     f"{r.num_blue:>9} {100 * r.cover_rate:>6.1f}%")
    mean_cover = np.mean([r.cover_rate for r in rows]) if rows else 0.0
    lines.append("")
    lines.append(f"{'TP':>4} {'Ref':>4} {'FP':>4} {'FN':>4} {'Recall':>8} {'Precision':>10} "
                 f"{'F-Measure':>10} {'AvgCover':>9}")
    lines.append(f"{report.tps:>4} {report.reference:>4} {report.fps:>4} {report.fns:>4} "
                 f"{100 * report.recall:>7.2f}% {100 * report.precision:>9.2f}% "
                 f"{100 * report.f_measure:>9.2f}% {100 * mean_cover:>8.2f}%")
    return "\n".join(lines) + "\n"
