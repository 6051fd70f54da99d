"""Leaf-center labeling, facet over-segmentation and inside-out facet growth."""
from __future__ import annotations

import logging
import math
import time
from collections import deque
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .cloud import UNLABELED, PointCloud, SpatialIndex, frames_from_neighborhoods, sqdist
from .errors import ConfigError
from .joint_filter import JointFilterParams, LayerStack, multi_round_filter

log = logging.getLogger(__name__)


@dataclass
class SegParams:
    d_l: float
    d_adj: Optional[float] = None  # defaults to d_l
    seed_curvature_max: float = math.inf
    normal_angle_max: float = 20.0  # degrees
    max_facet_points: Optional[int] = None  # defaults to max(30, ceil(N_layer / 50))
    kmeans_iters: int = 5
    pca_k: int = 10

    @property
    def adjacency(self) -> float:
        return self.d_l if self.d_adj is None else self.d_adj

    def validate(self):
        if not self.d_l > 0 or not self.adjacency > 0:
            raise ConfigError("d_l and d_adj must be positive")
        if not 0 < self.normal_angle_max < 180:
            raise ConfigError("normal_angle_max must lie in (0, 180) degrees")
        if self.kmeans_iters < 0 or self.pca_k < 3:
            raise ConfigError("kmeans_iters must be >= 0 and pca_k >= 3")
        if self.max_facet_points is not None and self.max_facet_points < 1:
            raise ConfigError("max_facet_points must be positive")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["d_adj"] = self.adjacency
        if math.isinf(d["seed_curvature_max"]):
            d["seed_curvature_max"] = "inf"
        return d


# -- leaf centers -------------------------------------------------------------

def pre_segment_centers(core: PointCloud, d_l: float) -> np.ndarray:
    """Breadth-first flood fill over the ``<= d_l`` proximity graph.

    Components are numbered in order of their lowest point index.
    """
    if d_l <= 0:
        raise ConfigError("d_l must be positive")
    n = len(core)
    labels = np.full(n, UNLABELED, dtype=np.int64)
    if n == 0:
        return labels
    indptr, nbrs = SpatialIndex(core).radius_graph(d_l)
    label = 0
    for seed in range(n):
        if labels[seed] != UNLABELED:
            continue
        labels[seed] = label
        queue = deque([seed])
        while queue:
            j = queue.popleft()
            nb = nbrs[indptr[j]:indptr[j + 1]]
            fresh = nb[labels[nb] == UNLABELED]
            if len(fresh):
                labels[fresh] = label
                queue.extend(fresh.tolist())
        label += 1
    return labels


# -- facets -------------------------------------------------------------------

@dataclass
class Facet:
    members: np.ndarray
    centroid: np.ndarray
    mean_normal: np.ndarray


@dataclass
class FacetSet:
    """Facets of one layer; ``labels[i]`` is the facet holding layer point ``i``."""

    labels: np.ndarray
    facets: list[Facet] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.facets)


def _point_normals(cloud: PointCloud, k: int):
    n = len(cloud)
    if n < 3:
        return np.tile([0.0, 0.0, 1.0], (n, 1)), np.zeros(n)
    index = SpatialIndex(cloud)
    nbr = index.knn_all(min(k, n - 1), include_self=True)
    _, _, normals, w, degenerate = frames_from_neighborhoods(cloud.positions[nbr])
    total = w.sum(axis=1)
    curvature = np.divide(w[:, 2], total, out=np.zeros(n), where=total > 0)
    normals[degenerate] = [0.0, 0.0, 1.0]
    return normals, curvature


def _facet_stats(points, normals, labels, n_facets):
    counts = np.bincount(labels, minlength=n_facets).astype(float)
    centroids = np.zeros((n_facets, 3))
    np.add.at(centroids, labels, points)
    nonempty = counts > 0
    centroids[nonempty] /= counts[nonempty, None]
    # principal direction of the normals' scatter: sign-invariant mean normal
    scatter = np.zeros((n_facets, 3, 3))
    np.add.at(scatter, labels, normals[:, :, None] * normals[:, None, :])
    _, vec = np.linalg.eigh(scatter)
    mean_n = vec[:, :, 2]
    mean_n = np.where(mean_n[:, 2:3] < 0, -mean_n, mean_n)
    return centroids, mean_n, counts


def _coarse_facets(points, normals, curvature, graph, cos_max, cap, curv_max):
    n = len(points)
    indptr, nbrs = graph
    labels = np.full(n, UNLABELED, dtype=np.int64)
    order = np.lexsort((np.arange(n), curvature))
    f = 0
    for seed in order:
        if labels[seed] != UNLABELED or curvature[seed] > curv_max:
            continue
        labels[seed] = f
        size = 1
        ns = normals[seed]
        queue = deque([seed])
        while queue and size < cap:
            j = queue.popleft()
            nb = nbrs[indptr[j]:indptr[j + 1]]
            nb = nb[labels[nb] == UNLABELED]
            nb = nb[np.abs(normals[nb] @ ns) >= cos_max]
            if len(nb) == 0:
                continue
            nb = nb[: cap - size]
            labels[nb] = f
            size += len(nb)
            queue.extend(nb.tolist())
        f += 1
    leftover = np.flatnonzero(labels == UNLABELED)
    if len(leftover):
        assigned = np.flatnonzero(labels != UNLABELED)
        if len(assigned):
            _, nn = cKDTree(points[assigned]).query(points[leftover])
            labels[leftover] = labels[assigned[nn]]
        else:
            labels[leftover] = np.arange(len(leftover))
            f = len(leftover)
    return labels, f


def _kmeans_refine(points, normals, labels, n_facets, d_adj, cos_max, iters):
    pt_tree = cKDTree(points)
    for _ in range(iters):
        centroids, mean_n, counts = _facet_stats(points, normals, labels, n_facets)
        live = np.flatnonzero(counts > 0)
        pairs = pt_tree.sparse_distance_matrix(
            cKDTree(centroids[live]), 2 * d_adj, output_type="ndarray")
        pi = np.concatenate([pairs["i"].astype(np.int64), np.arange(len(points))])
        fj = np.concatenate([live[pairs["j"]], labels])
        dist = np.sqrt(sqdist(points[pi], centroids[fj]))
        align = np.abs(np.einsum("ij,ij->i", normals[pi], mean_n[fj]))
        cost = dist / d_adj + (1.0 - align)
        ok = (align >= cos_max) | (fj == labels[pi])
        pi, fj, cost = pi[ok], fj[ok], cost[ok]
        order = np.lexsort((fj, cost, pi))
        pi, fj = pi[order], fj[order]
        first = np.ones(len(pi), dtype=bool)
        first[1:] = pi[1:] != pi[:-1]
        new = labels.copy()
        new[pi[first]] = fj[first]
        if np.array_equal(new, labels):
            break
        labels = new
    return labels


def _enforce_normal_bound(normals, points, labels, cos_max):
    """Eject members deviating more than the bound from their facet's mean normal."""
    n_facets = int(labels.max()) + 1
    while True:
        _, mean_n, _ = _facet_stats(points, normals, labels, n_facets)
        align = np.abs(np.einsum("ij,ij->i", normals, mean_n[labels]))
        bad = np.flatnonzero(align < cos_max - 1e-12)
        if len(bad) == 0:
            return labels
        labels = labels.copy()
        labels[bad] = n_facets + np.arange(len(bad))
        n_facets += len(bad)


def over_segment_facets(layer: PointCloud, params: SegParams) -> FacetSet:
    """Split a boundary layer into small, locally flat facets."""
    params.validate()
    n = len(layer)
    if n == 0:
        return FacetSet(np.empty(0, dtype=np.int64), [])
    points = layer.positions
    d_adj = params.adjacency
    cap = params.max_facet_points or max(30, math.ceil(n / 50))
    cos_max = math.cos(math.radians(params.normal_angle_max))
    normals, curvature = _point_normals(layer, params.pca_k)
    graph = SpatialIndex(layer).radius_graph(d_adj)
    labels, n_facets = _coarse_facets(points, normals, curvature, graph, cos_max, cap,
                                      params.seed_curvature_max)
    labels = _kmeans_refine(points, normals, labels, n_facets, d_adj, cos_max,
                            params.kmeans_iters)
    labels = _enforce_normal_bound(normals, points, labels, cos_max)
    # drop empty facets; number the rest by lowest member index
    uniq, first = np.unique(labels, return_index=True)
    rank = np.empty(len(uniq), dtype=np.int64)
    rank[np.argsort(first)] = np.arange(len(uniq))
    labels = rank[np.searchsorted(uniq, labels)]
    centroids, mean_n, _ = _facet_stats(points, normals, labels, len(uniq))
    order = np.argsort(labels, kind="stable")
    bounds = np.searchsorted(labels[order], np.arange(len(uniq) + 1))
    facets = [Facet(order[bounds[f]:bounds[f + 1]], centroids[f], mean_n[f])
              for f in range(len(uniq))]
    return FacetSet(labels, facets)


# -- growth -------------------------------------------------------------------

def _min_by_key(groups, d2, labels):
    """Per group, the (d2, label) lexicographic minimum. Returns dict group -> (d2, label)."""
    if len(groups) == 0:
        return {}
    order = np.lexsort((labels, d2, groups))
    g, d, l = groups[order], d2[order], labels[order]
    first = np.ones(len(g), dtype=bool)
    first[1:] = g[1:] != g[:-1]
    return {int(a): (float(b), int(c)) for a, b, c in zip(g[first], d[first], l[first])}


def _grow_layer(layer: PointCloud, facets: FacetSet, lab_pos, lab_lab, d_adj, next_label):
    """Label every facet of one layer; returns per-point labels and the next free label."""
    fl = facets.labels
    n_f = len(facets)
    facet_label = np.full(n_f, UNLABELED, dtype=np.int64)
    r2 = d_adj * d_adj
    slack = d_adj * (1 + 1e-9)
    layer_tree = cKDTree(layer.positions)

    # adjacency of facets to already labeled points
    fixed = {}
    if len(lab_pos):
        pairs = layer_tree.sparse_distance_matrix(cKDTree(lab_pos), slack, output_type="ndarray")
        i = pairs["i"].astype(np.int64)
        j = pairs["j"].astype(np.int64)
        d2 = sqdist(layer.positions[i], lab_pos[j])
        keep = d2 <= r2
        fixed = _min_by_key(fl[i[keep]], d2[keep], lab_lab[j[keep]])

    # facet-facet adjacency within the layer (min inter-point distance)
    pairs = layer_tree.query_pairs(slack, output_type="ndarray").astype(np.int64)
    if len(pairs):
        d2 = sqdist(layer.positions[pairs[:, 0]], layer.positions[pairs[:, 1]])
        fa, fb = fl[pairs[:, 0]], fl[pairs[:, 1]]
        keep = (d2 <= r2) & (fa != fb)
        fa, fb, d2 = fa[keep], fb[keep], d2[keep]
        a = np.concatenate([fa, fb])
        b = np.concatenate([fb, fa])
        d2 = np.concatenate([d2, d2])
        order = np.lexsort((d2, b, a))
        a, b, d2 = a[order], b[order], d2[order]
        first = np.ones(len(a), dtype=bool)
        first[1:] = (a[1:] != a[:-1]) | (b[1:] != b[:-1])
        a, b, d2 = a[first], b[first], d2[first]
    else:
        a = b = np.empty(0, dtype=np.int64)
        d2 = np.empty(0)
    adj = [[] for _ in range(n_f)]
    for x, y, d in zip(a.tolist(), b.tolist(), d2.tolist()):
        adj[x].append((y, d))

    # sweeps: grow from labeled regions until a fixed point
    frontier = []
    for f, (_, lab) in sorted(fixed.items()):
        facet_label[f] = lab
        frontier.append(f)
    sweeps = 1 if frontier else 0
    while frontier:
        best = {}
        for g in frontier:
            lab = facet_label[g]
            for f, d in adj[g]:
                if facet_label[f] != UNLABELED:
                    continue
                cand = (d, lab)
                if f not in best or cand < best[f]:
                    best[f] = cand
        frontier = sorted(best)
        for f in frontier:
            facet_label[f] = best[f][1]
        if frontier:
            sweeps += 1

    # leftovers become new leaves, flood-filled over facet adjacency
    new_leaves = 0
    for f in range(n_f):
        if facet_label[f] != UNLABELED:
            continue
        facet_label[f] = next_label
        queue = deque([f])
        while queue:
            g = queue.popleft()
            for h, _ in adj[g]:
                if facet_label[h] == UNLABELED:
                    facet_label[h] = next_label
                    queue.append(h)
        next_label += 1
        new_leaves += 1
    log.debug("layer of %d facets: %d sweeps, %d new leaves", n_f, sweeps, new_leaves)
    return facet_label[fl] if len(fl) else np.empty(0, dtype=np.int64), next_label


def grow_facets(center_labels: np.ndarray, core: PointCloud, layers, d_adj: float,
                n_points: Optional[int] = None) -> np.ndarray:
    """Grow leaf-center labels outward through facet layers.

    ``layers`` is a sequence of ``(cloud, FacetSet)`` ordered innermost first.
    Returns labels indexed by the clouds' ``origin`` (the original point order).
    """
    layers = list(layers)
    if n_points is None:
        n_points = len(core) + sum(len(c) for c, _ in layers)
    out = np.full(n_points, UNLABELED, dtype=np.int64)
    out[core.origin] = center_labels
    lab_pos = core.positions
    lab_lab = np.asarray(center_labels, dtype=np.int64)
    next_label = int(lab_lab.max()) + 1 if len(lab_lab) else 0
    for cloud, facets in layers:
        if len(cloud) == 0:
            continue
        labels, next_label = _grow_layer(cloud, facets, lab_pos, lab_lab, d_adj, next_label)
        out[cloud.origin] = labels
        lab_pos = np.concatenate([lab_pos, cloud.positions])
        lab_lab = np.concatenate([lab_lab, labels])
    return out


# -- pipeline -----------------------------------------------------------------

@dataclass
class SegmentationResult:
    labels: np.ndarray
    stack: LayerStack
    center_labels: np.ndarray
    facet_sets: list[FacetSet]
    timings: dict = field(default_factory=dict)

    @property
    def leaf_count(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) else 0


def segment_stack(stack: LayerStack, seg: SegParams, n_points: Optional[int] = None) -> SegmentationResult:
    """Label a precomputed layer stack (core + boundary layers, outermost first)."""
    seg.validate()
    t0 = time.perf_counter()
    centers = pre_segment_centers(stack.core, seg.d_l)
    t1 = time.perf_counter()
    inner_first = list(reversed(stack.layers))
    facet_sets = [over_segment_facets(layer, seg) for layer in inner_first]
    t2 = time.perf_counter()
    labels = grow_facets(centers, stack.core, zip(inner_first, facet_sets), seg.adjacency, n_points)
    t3 = time.perf_counter()
    timings = {"centers": t1 - t0, "facets": t2 - t1, "growth": t3 - t2}
    return SegmentationResult(labels, stack, centers, facet_sets[::-1], timings)


def segment_leaves(cloud: PointCloud, joint: JointFilterParams, rounds: int,
                   seg: SegParams) -> SegmentationResult:
    """Full pipeline: multi-round joint filter, center labeling, facet growth.

    Labels are returned in the input cloud's point order.
    """
    cloud = cloud.reindexed()
    t0 = time.perf_counter()
    stack = multi_round_filter(cloud, joint, rounds)
    t1 = time.perf_counter()
    result = segment_stack(stack, seg, len(cloud))
    result.timings = {"filter": t1 - t0, **result.timings}
    return result
