"""Canopy preprocessing filters and a declarative chain runner."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .cloud import PointCloud, SpatialIndex, sqdist
from .errors import ConfigError, MissingColor

log = logging.getLogger(__name__)


def region_filter(cloud: PointCloud, box_min, box_max) -> PointCloud:
    """Keep points inside the closed axis-aligned box; use +-inf for free axes."""
    lo = np.asarray(box_min, dtype=float).reshape(3)
    hi = np.asarray(box_max, dtype=float).reshape(3)
    if np.any(lo > hi):
        raise ConfigError(f"inverted box: min {lo.tolist()} > max {hi.tolist()}")
    p = cloud.positions
    mask = np.all((p >= lo) & (p <= hi), axis=1)
    return cloud.subset(mask)


def radius_outlier_mask(cloud: PointCloud, r: float, n_threshold: int) -> np.ndarray:
    """True for points with at least ``n_threshold`` other points within ``r``."""
    if r <= 0:
        raise ConfigError("radius must be positive")
    if n_threshold <= 0 or len(cloud) == 0:
        return np.ones(len(cloud), dtype=bool)
    counts = SpatialIndex(cloud).radius_counts(r)
    return counts >= n_threshold


def radius_outlier_filter(cloud: PointCloud, r: float, n_threshold: int) -> PointCloud:
    return cloud.subset(radius_outlier_mask(cloud, r, n_threshold))


def knn_mean_distance(cloud: PointCloud, k: int) -> np.ndarray:
    index = SpatialIndex(cloud)
    nbr = index.knn_all(k)
    d = np.sqrt(sqdist(cloud.positions[nbr], cloud.positions[:, None, :]))
    return d.mean(axis=1)


def statistical_knn_filter(cloud: PointCloud, k: int, std_mul: float) -> PointCloud:
    """Drop points whose mean k-NN distance exceeds mean + std_mul * std over the cloud.

    A relative slack of 1e-12 on the cut keeps clouds with a constant
    statistic (up to rounding) intact.
    """
    if k < 1 or std_mul <= 0:
        raise ConfigError("statistical filter needs k >= 1 and std_mul > 0")
    if len(cloud) <= k:
        raise ConfigError(f"statistical filter with k={k} needs more than {k} points")
    stat = knn_mean_distance(cloud, k)
    cut = stat.mean() + std_mul * stat.std()
    return cloud.subset(stat <= cut * (1 + 1e-12))


def greenness(colors: np.ndarray) -> np.ndarray:
    """Excess-green index 2g - r - b on channels scaled to [0, 1]."""
    c = np.asarray(colors, dtype=float) / 255.0
    return 2 * c[:, 1] - c[:, 0] - c[:, 2]


def color_filter(cloud: PointCloud, min_greenness: float) -> PointCloud:
    if not cloud.has_color:
        raise MissingColor("color filter needs an RGB cloud")
    if min_greenness < 0:
        raise ConfigError("min_greenness must be non-negative")
    return cloud.subset(greenness(cloud.colors) >= min_greenness)


def voxel_downsample(cloud: PointCloud, voxel_size: float) -> PointCloud:
    """Replace the points of every occupied voxel by their centroid.

    The grid starts at the cloud's min corner and spans ``ceil(extent / size)``
    cells per axis; points on the far face fall into the last cell. Output is
    ordered by voxel key and gets a fresh origin.
    """
    if voxel_size <= 0:
        raise ConfigError("voxel size must be positive")
    if len(cloud) == 0:
        return PointCloud(np.empty((0, 3)))
    p = cloud.positions
    lo = p.min(axis=0)
    extent = p.max(axis=0) - lo
    cells = np.maximum(1, np.ceil(extent / voxel_size - 1e-9)).astype(np.int64)
    key = np.floor((p - lo) / voxel_size).astype(np.int64)
    key = np.clip(key, 0, cells - 1)
    _, inverse, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    m = len(counts)
    pos = np.zeros((m, 3))
    np.add.at(pos, inverse, p)
    pos /= counts[:, None]
    colors = None
    if cloud.has_color:
        col = np.zeros((m, 3))
        np.add.at(col, inverse, cloud.colors.astype(float))
        colors = np.round(col / counts[:, None]).astype(np.uint8)
    return PointCloud(pos, colors)


# -- chains ----------------------------------------------------------------

FILTER_PARAMS = {
    "Region": {"box_min", "box_max"},
    "RadiusOutlier": {"radius", "n_threshold"},
    "StatisticalKNN": {"k", "std_mul"},
    "Color": {"min_greenness"},
    "VoxelDownsample": {"voxel_size"},
}


@dataclass
class FilterSpec:
    kind: str
    params: dict[str, Any] = field(default_factory=dict)

    def validate(self):
        if self.kind not in FILTER_PARAMS:
            raise ConfigError(f"unknown filter kind {self.kind!r}")
        allowed = FILTER_PARAMS[self.kind]
        unknown = set(self.params) - allowed
        if unknown:
            raise ConfigError(f"{self.kind}: unknown parameter(s) {sorted(unknown)}")
        missing = allowed - set(self.params)
        if missing:
            raise ConfigError(f"{self.kind}: missing parameter(s) {sorted(missing)}")
        if self.kind == "Region":
            for key in ("box_min", "box_max"):
                if len(self.params[key]) != 3:
                    raise ConfigError(f"Region.{key} needs three values")

    def apply(self, cloud: PointCloud) -> PointCloud:
        p = self.params
        if self.kind == "Region":
            lo = [float(x) if x is not None else -np.inf for x in p["box_min"]]
            hi = [float(x) if x is not None else np.inf for x in p["box_max"]]
            return region_filter(cloud, lo, hi)
        if self.kind == "RadiusOutlier":
            return radius_outlier_filter(cloud, float(p["radius"]), int(p["n_threshold"]))
        if self.kind == "StatisticalKNN":
            return statistical_knn_filter(cloud, int(p["k"]), float(p["std_mul"]))
        if self.kind == "Color":
            return color_filter(cloud, float(p["min_greenness"]))
        return voxel_downsample(cloud, float(p["voxel_size"]))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": dict(self.params)}

    @classmethod
    def from_dict(cls, d: dict) -> "FilterSpec":
        extra = set(d) - {"kind", "params"}
        if extra or "kind" not in d:
            raise ConfigError(f"filter entry needs 'kind' and 'params', got {sorted(d)}")
        spec = cls(d["kind"], dict(d.get("params") or {}))
        spec.validate()
        return spec


@dataclass
class StageCount:
    kind: str
    n_in: int
    n_out: int


def run_chain(cloud: PointCloud, chain) -> tuple[PointCloud, list[StageCount]]:
    chain = list(chain)
    for spec in chain:
        spec.validate()
    report = []
    for spec in chain:
        out = spec.apply(cloud)
        report.append(StageCount(spec.kind, len(cloud), len(out)))
        log.info("%s: %d -> %d points", spec.kind, len(cloud), len(out))
        cloud = out
    return cloud, report


# Filter orders of the four reference plants; numeric values are placeholders
# to be tuned per scene (boxes and greenness especially).
_OPEN = [None, None, None]
PRESETS = {
    "epipremnum": [
        FilterSpec("Region", {"box_min": _OPEN, "box_max": _OPEN}),
        FilterSpec("RadiusOutlier", {"radius": 0.005, "n_threshold": 5}),
        FilterSpec("StatisticalKNN", {"k": 20, "std_mul": 1.0}),
    ],
    "monstera": [
        FilterSpec("Region", {"box_min": _OPEN, "box_max": _OPEN}),
        FilterSpec("StatisticalKNN", {"k": 20, "std_mul": 1.0}),
    ],
    "calathea": [
        FilterSpec("Region", {"box_min": _OPEN, "box_max": _OPEN}),
        FilterSpec("Color", {"min_greenness": 0.1}),
        FilterSpec("RadiusOutlier", {"radius": 0.004, "n_threshold": 5}),
        FilterSpec("VoxelDownsample", {"voxel_size": 0.0015}),
    ],
    "hedera": [
        FilterSpec("Region", {"box_min": _OPEN, "box_max": _OPEN}),
        FilterSpec("RadiusOutlier", {"radius": 0.004, "n_threshold": 5}),
        FilterSpec("VoxelDownsample", {"voxel_size": 0.0015}),
    ],
}


def preset(name: str) -> list[FilterSpec]:
    try:
        return [FilterSpec(s.kind, dict(s.params)) for s in PRESETS[name]]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
