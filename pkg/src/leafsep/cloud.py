"""Point-cloud container, k-d tree queries and local PCA frames.

Distances are compared in squared form, ``sum((p - q)**2) <= r*r``, with the
three coordinate terms always added in x, y, z order so every query and its
brute-force counterpart agree bit for bit.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateNeighborhood, EmptyCloud

UNLABELED = -1

# relative slack handed to cKDTree before the exact squared-distance filter
_SLACK = 1e-9


def _workers() -> int:
    try:
        return max(1, int(os.environ.get("LEAFSEP_THREADS", "1")))
    except ValueError:
        return 1


def sqdist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = a - b
    return d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1] + d[..., 2] * d[..., 2]


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Immutable point set.

    ``origin[i]`` is the index of point ``i`` in the cloud this one was
    derived from (the root cloud of a filter pipeline); a freshly created
    cloud has ``origin == arange(N)``.
    """

    positions: np.ndarray
    colors: Optional[np.ndarray] = None
    origin: Optional[np.ndarray] = field(default=None)

    def __post_init__(self):
        pos = np.ascontiguousarray(self.positions, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(pos)):
            raise ValueError("point coordinates must be finite")
        pos.setflags(write=False)
        object.__setattr__(self, "positions", pos)
        if self.colors is not None:
            col = np.ascontiguousarray(self.colors, dtype=np.uint8).reshape(-1, 3)
            if len(col) != len(pos):
                raise ValueError("colors and positions differ in length")
            col.setflags(write=False)
            object.__setattr__(self, "colors", col)
        if self.origin is None:
            org = np.arange(len(pos), dtype=np.int64)
        else:
            org = np.ascontiguousarray(self.origin, dtype=np.int64).reshape(-1)
            if len(org) != len(pos):
                raise ValueError("origin and positions differ in length")
        org.setflags(write=False)
        object.__setattr__(self, "origin", org)

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def has_color(self) -> bool:
        return self.colors is not None

    def subset(self, idx) -> "PointCloud":
        """Sub-cloud for an index array or boolean mask; origin is carried over."""
        idx = np.asarray(idx)
        if idx.dtype == bool:
            idx = np.flatnonzero(idx)
        idx = idx.astype(np.int64, copy=False)
        colors = None if self.colors is None else self.colors[idx]
        return PointCloud(self.positions[idx], colors, self.origin[idx])

    def reindexed(self) -> "PointCloud":
        """Same points, treated as a new root (origin reset to 0..N-1)."""
        return PointCloud(self.positions, self.colors)

    @staticmethod
    def concat(clouds) -> "PointCloud":
        clouds = list(clouds)
        if not clouds:
            return PointCloud(np.empty((0, 3)))
        pos = np.concatenate([c.positions for c in clouds])
        org = np.concatenate([c.origin for c in clouds])
        if all(c.has_color for c in clouds):
            col = np.concatenate([c.colors for c in clouds])
        else:
            col = None
        return PointCloud(pos, col, org)


@dataclass(frozen=True)
class LocalFrame:
    u: np.ndarray
    v: np.ndarray
    n: np.ndarray
    eigenvalues: np.ndarray  # descending: lambda_u, lambda_v, lambda_n

    @property
    def curvature(self) -> float:
        s = float(self.eigenvalues.sum())
        return float(self.eigenvalues[2]) / s if s > 0 else 0.0


class SpatialIndex:
    """Read-only k-d tree over one cloud."""

    def __init__(self, cloud: PointCloud):
        if len(cloud) == 0:
            raise EmptyCloud("cannot index an empty cloud")
        self.cloud = cloud
        self.points = cloud.positions
        self.tree = cKDTree(self.points)

    def __len__(self) -> int:
        return len(self.points)

    # -- radius -----------------------------------------------------------
    def radius_query(self, q: int, r: float) -> np.ndarray:
        """Sorted indices of all points within distance ``r`` of point ``q`` (self included)."""
        cand = np.asarray(
            self.tree.query_ball_point(self.points[q], r * (1 + _SLACK) + 1e-300),
            dtype=np.int64,
        )
        keep = sqdist(self.points[cand], self.points[q]) <= r * r
        return np.sort(cand[keep])

    def radius_pairs(self, r: float) -> np.ndarray:
        """All unordered pairs ``(i, j), i < j`` closer than ``r`` as an (M, 2) array."""
        pairs = self.tree.query_pairs(r * (1 + _SLACK) + 1e-300, output_type="ndarray")
        if len(pairs) == 0:
            return np.empty((0, 2), dtype=np.int64)
        pairs = pairs.astype(np.int64, copy=False)
        keep = sqdist(self.points[pairs[:, 0]], self.points[pairs[:, 1]]) <= r * r
        return pairs[keep]

    def radius_counts(self, r: float) -> np.ndarray:
        """Number of other points within ``r`` of every point."""
        pairs = self.radius_pairs(r)
        n = len(self.points)
        return np.bincount(pairs[:, 0], minlength=n) + np.bincount(pairs[:, 1], minlength=n)

    def radius_graph(self, r: float):
        """Symmetric neighbor lists (CSR ``indptr, indices``), self excluded, indices ascending."""
        pairs = self.radius_pairs(r)
        n = len(self.points)
        src = np.concatenate([pairs[:, 0], pairs[:, 1]])
        dst = np.concatenate([pairs[:, 1], pairs[:, 0]])
        order = np.lexsort((dst, src))
        src, dst = src[order], dst[order]
        indptr = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(np.bincount(src, minlength=n), out=indptr[1:])
        return indptr, dst

    # -- k nearest --------------------------------------------------------
    def knn_query(self, q: int, k: int, include_self: bool = False) -> np.ndarray:
        return self.knn_all(k, include_self=include_self, rows=np.array([q]))[0]

    def knn_all(self, k: int, include_self: bool = False, rows=None) -> np.ndarray:
        """k nearest neighbors of each row point, ordered by (distance, index).

        With ``include_self`` the query point occupies column 0 and ``k``
        further neighbors follow, giving ``k + 1`` columns.
        """
        n = len(self.points)
        if k < 0 or k > n - 1:
            raise ValueError(f"k={k} needs at least {k + 1} points, cloud has {n}")
        rows = np.arange(n) if rows is None else np.asarray(rows, dtype=np.int64)
        out = np.empty((len(rows), k), dtype=np.int64)
        todo = np.arange(len(rows))
        m = min(n, k + 1 + 4)
        while len(todo) and k > 0:
            r = rows[todo]
            _, cand = self.tree.query(self.points[r], k=m, workers=_workers())
            cand = cand.reshape(len(r), m).astype(np.int64)
            d2 = sqdist(self.points[cand], self.points[r][:, None, :])
            is_self = cand == r[:, None]
            d2_key = np.where(is_self, np.inf, d2)
            order = np.lexsort((cand, d2_key), axis=-1)
            cand = np.take_along_axis(cand, order, axis=-1)
            d2_key = np.take_along_axis(d2_key, order, axis=-1)
            # the (m-1) retrieved non-self candidates must strictly outrank anything unretrieved
            kth = d2_key[:, k - 1]
            last = d2_key[:, m - 2] if m >= 2 else kth
            safe = (m == n) | (kth * (1 + 4 * _SLACK) < last)
            out[todo[safe]] = cand[safe, :k]
            todo = todo[~safe]
            m = min(n, 2 * m)
        if include_self:
            out = np.concatenate([rows[:, None], out], axis=1)
        return out

    # -- PCA --------------------------------------------------------------
    def local_frames(self, k: int, rows=None):
        """Batched PCA of every row point's neighborhood (itself + k nearest).

        Returns ``(u, v, n, eigenvalues, degenerate)``; eigenvalues are sorted
        descending. ``degenerate`` marks neighborhoods with no spread at all.
        """
        nbr = self.knn_all(k, include_self=True, rows=rows)
        return frames_from_neighborhoods(self.points[nbr])


def frames_from_neighborhoods(pts: np.ndarray):
    """PCA frames for a stack of neighborhoods shaped (M, K, 3)."""
    centered = pts - pts.mean(axis=1, keepdims=True)
    cov = np.einsum("mki,mkj->mij", centered, centered) / pts.shape[1]
    w, vec = np.linalg.eigh(cov)
    w = np.clip(w[:, ::-1], 0.0, None)
    vec = vec[:, :, ::-1]
    u = vec[:, :, 0]
    n = vec[:, :, 2]
    flip = n[:, 2] < 0
    n = np.where(flip[:, None], -n, n)
    v = np.cross(n, u)
    scale = np.abs(pts - pts[:, :1]).max(axis=(1, 2))
    degenerate = w[:, 0] <= (1e-24 * np.maximum(scale, 1e-300) ** 2)
    degenerate |= scale == 0
    return u, v, n, w, degenerate


def build_index(cloud: PointCloud) -> SpatialIndex:
    return SpatialIndex(cloud)


def radius_count(index: SpatialIndex, q: int, r: float) -> int:
    """Number of points other than ``q`` within distance ``r`` of it."""
    return len(index.radius_query(q, r)) - 1


def local_pca(index: SpatialIndex, q: int, k: int) -> LocalFrame:
    if k < 3:
        raise ValueError("k must be at least 3")
    u, v, n, w, degenerate = index.local_frames(k, rows=np.array([q]))
    if degenerate[0]:
        raise DegenerateNeighborhood(f"all neighbors of point {q} coincide")
    return LocalFrame(u[0], v[0], n[0], w[0])


def average_spacing(cloud: PointCloud, sample_size: int = 10000, seed: int = 0) -> float:
    """Mean nearest-neighbor distance, over a seeded random sample when the cloud is large."""
    n = len(cloud)
    if n < 2:
        raise EmptyCloud("average spacing needs at least two points")
    index = SpatialIndex(cloud)
    if n <= sample_size:
        rows = np.arange(n)
    else:
        rows = np.sort(np.random.default_rng(seed).choice(n, size=sample_size, replace=False))
    nn = index.knn_all(1, rows=rows)[:, 0]
    d = np.sqrt(sqdist(cloud.positions[nn], cloud.positions[rows]))
    return float(d.mean())


def compact_labels(labels: np.ndarray) -> np.ndarray:
    """Renumber labels to 0..L-1 in order of first appearance; UNLABELED stays."""
    labels = np.asarray(labels, dtype=np.int64)
    out = np.full_like(labels, UNLABELED)
    mask = labels != UNLABELED
    if not mask.any():
        return out
    uniq, first = np.unique(labels[mask], return_index=True)
    rank = np.empty(len(uniq), dtype=np.int64)
    rank[np.argsort(first, kind="stable")] = np.arange(len(uniq))
    out[mask] = rank[np.searchsorted(uniq, labels[mask])]
    return out
