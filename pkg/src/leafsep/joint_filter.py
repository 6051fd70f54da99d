"""Joint radius-outlier / surface-boundary filtering and the multi-round layer stack."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .cloud import PointCloud, SpatialIndex, average_spacing, frames_from_neighborhoods
from .errors import ConfigError, DegenerateNeighborhood

log = logging.getLogger(__name__)

TWO_PI = 2 * np.pi


@dataclass
class JointFilterParams:
    r: float
    n_threshold: int
    k: int = 20
    theta_threshold: float = 90.0  # degrees
    n_iter: int = 3

    def validate(self):
        if not self.r > 0:
            raise ConfigError("r must be positive")
        if self.n_threshold < 0:
            raise ConfigError("n_threshold must be non-negative")
        if self.k < 3:
            raise ConfigError("k must be at least 3")
        if not 0 < self.theta_threshold:
            raise ConfigError("theta_threshold must be positive")
        if self.n_iter < 1:
            raise ConfigError("n_iter must be at least 1")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LayerStack:
    """Surviving core plus the boundary removed in each round (outermost first)."""

    core: PointCloud
    layers: list[PointCloud] = field(default_factory=list)

    @property
    def round_count(self) -> int:
        return len(self.layers)

    def total_points(self) -> int:
        return len(self.core) + sum(len(l) for l in self.layers)


# -- radius-based outlier filter --------------------------------------------

def rbof_mask(cloud: PointCloud, r: float, n_threshold: int) -> np.ndarray:
    """True for points removed: fewer than ``n_threshold`` others within ``r``.

    Counts are taken against the full input cloud in one pass.
    """
    if n_threshold <= 0 or len(cloud) == 0:
        return np.zeros(len(cloud), dtype=bool)
    counts = SpatialIndex(cloud).radius_counts(r)
    return counts < n_threshold


def rbof(cloud: PointCloud, r: float, n_threshold: int):
    removed = rbof_mask(cloud, r, n_threshold)
    return cloud.subset(~removed), cloud.subset(removed)


# -- surface boundary filter ------------------------------------------------

def angle_gaps_from_neighborhoods(pts: np.ndarray) -> np.ndarray:
    """Largest circular gap (radians) between projected neighbor directions.

    ``pts`` is (M, K+1, 3) with the query point in column 0. Neighborhoods that
    cannot span a tangent plane report a full-circle gap.
    """
    u, v, n, w, degenerate = frames_from_neighborhoods(pts)
    rank_deficient = degenerate | (w[:, 1] <= 1e-12 * w[:, 0])
    d = pts[:, 1:, :] - pts[:, :1, :]
    a = np.einsum("mki,mi->mk", d, u)
    b = np.einsum("mki,mi->mk", d, v)
    theta = np.arctan2(b, a)
    # neighbors with no in-plane offset carry no direction; alias them to a valid one
    void = (a == 0) & (b == 0)
    has_dir = ~void.all(axis=1)
    if void.any():
        first = np.argmax(~void, axis=1)
        fill = theta[np.arange(len(theta)), first]
        theta = np.where(void, fill[:, None], theta)
    return _circular_gap(theta, rank_deficient | ~has_dir)


def _circular_gap(theta: np.ndarray, full: np.ndarray) -> np.ndarray:
    theta = np.sort(theta, axis=1)
    if theta.shape[1] > 1:
        inner = np.diff(theta, axis=1).max(axis=1)
    else:
        inner = np.zeros(len(theta))
    wrap = TWO_PI - (theta[:, -1] - theta[:, 0])
    gap = np.maximum(inner, wrap)
    return np.where(full, TWO_PI, gap)


def boundary_angle_gaps(index: SpatialIndex, k: int, rows=None) -> np.ndarray:
    n = len(index)
    k_eff = min(k, n - 1)
    m = n if rows is None else len(rows)
    if k_eff < 2:
        return np.full(m, TWO_PI)
    nbr = index.knn_all(k_eff, include_self=True, rows=rows)
    return angle_gaps_from_neighborhoods(index.points[nbr])


def boundary_angle_gap(index: SpatialIndex, q: int, k: int) -> float:
    """Largest angular gap (radians) around point ``q`` in its PCA tangent plane."""
    nbr = index.knn_all(min(k, len(index) - 1), include_self=True, rows=np.array([q]))
    pts = index.points[nbr]
    _, _, _, w, degenerate = frames_from_neighborhoods(pts)
    if degenerate[0] or w[0, 1] <= 1e-12 * w[0, 0]:
        raise DegenerateNeighborhood(f"neighborhood of point {q} spans no plane")
    return float(angle_gaps_from_neighborhoods(pts)[0])


def sbf_mask(cloud: PointCloud, k: int, theta_threshold: float, n_iter: int) -> np.ndarray:
    """True for points eroded by ``n_iter`` batch iterations of the boundary test."""
    limit = np.deg2rad(theta_threshold)
    removed = np.zeros(len(cloud), dtype=bool)
    alive = np.arange(len(cloud))
    for it in range(n_iter):
        if len(alive) == 0:
            break
        index = SpatialIndex(cloud.subset(alive))
        gaps = boundary_angle_gaps(index, k)
        hit = gaps > limit
        log.debug("SBF iteration %d: %d of %d points on boundary", it + 1, hit.sum(), len(alive))
        if not hit.any():
            break
        removed[alive[hit]] = True
        alive = alive[~hit]
    return removed


def sbf(cloud: PointCloud, k: int, theta_threshold: float = 90.0, n_iter: int = 3):
    removed = sbf_mask(cloud, k, theta_threshold, n_iter)
    return cloud.subset(~removed), cloud.subset(removed)


# -- composition -------------------------------------------------------------

def joint_filter_mask(cloud: PointCloud, params: JointFilterParams) -> np.ndarray:
    params.validate()
    removed = rbof_mask(cloud, params.r, params.n_threshold)
    kept = np.flatnonzero(~removed)
    if len(kept):
        eroded = sbf_mask(cloud.subset(kept), params.k, params.theta_threshold, params.n_iter)
        removed[kept[eroded]] = True
    return removed


def joint_filter(cloud: PointCloud, params: JointFilterParams):
    """One round of joint filtering: returns ``(core, boundary)`` as disjoint sub-clouds."""
    removed = joint_filter_mask(cloud, params)
    return cloud.subset(~removed), cloud.subset(removed)


def multi_round_filter(cloud: PointCloud, params: JointFilterParams, rounds: int) -> LayerStack:
    if rounds < 1:
        raise ConfigError("rounds must be at least 1")
    core = cloud
    layers = []
    for i in range(rounds):
        if len(core) == 0:
            break
        core, boundary = joint_filter(core, params)
        layers.append(boundary)
        log.info("round %d: core %d, boundary %d", i + 1, len(core), len(boundary))
    return LayerStack(core, layers)


# -- parameter heuristics ----------------------------------------------------

@dataclass
class SuggestedParams:
    joint: JointFilterParams
    d_l: float
    spacing: float
    mean_neighbors: float

    def to_dict(self) -> dict:
        return {
            "joint": self.joint.to_dict(),
            "d_l": self.d_l,
            "spacing": self.spacing,
            "mean_neighbors": self.mean_neighbors,
        }


def suggest_threshold(cloud: PointCloud, r: float, threshold_fraction: float = 0.5) -> tuple[int, float]:
    """RBOF threshold at ``threshold_fraction`` of the mean neighbor count within ``r``.

    Returns ``(n_threshold, mean_neighbors)``; the threshold stays strictly below the mean.
    """
    counts = SpatialIndex(cloud).radius_counts(r)
    mean_neighbors = float(counts.mean())
    n_threshold = max(1, int(np.floor(threshold_fraction * mean_neighbors)))
    if n_threshold >= mean_neighbors:
        n_threshold = max(0, int(np.ceil(mean_neighbors)) - 1)
    return n_threshold, mean_neighbors


def suggest_params(cloud: PointCloud, sample_size: int = 10000, seed: int = 0,
                   r_factor: float = 4.5, d_l_factor: float = 3.0,
                   threshold_fraction: float = 0.5) -> SuggestedParams:
    spacing = average_spacing(cloud, sample_size, seed)
    r = r_factor * spacing
    n_threshold, mean_neighbors = suggest_threshold(cloud, r, threshold_fraction)
    joint = JointFilterParams(r=r, n_threshold=n_threshold)
    return SuggestedParams(joint, d_l_factor * spacing, spacing, mean_neighbors)
