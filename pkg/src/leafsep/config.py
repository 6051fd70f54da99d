"""Pipeline configuration: nested dataclasses loaded from YAML, overridable by CLI flags."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml

from .errors import ConfigError
from .joint_filter import JointFilterParams, suggest_params, suggest_threshold
from .preprocess import FilterSpec, preset
from .segmentation import SegParams


@dataclass
class PreprocessOptions:
    preset: Optional[str] = None
    chain: list = field(default_factory=list)  # [{kind, params}]

    def filters(self) -> list[FilterSpec]:
        if self.preset and self.chain:
            raise ConfigError("give either preprocess.preset or preprocess.chain, not both")
        if self.preset:
            return preset(self.preset)
        return [FilterSpec.from_dict(d) for d in self.chain]


@dataclass
class JointOptions:
    r: Optional[float] = None  # None: suggested from average spacing
    n_threshold: Optional[int] = None
    k: int = 20
    theta_threshold: float = 90.0
    n_iter: int = 3
    rounds: int = 3
    r_factor: float = 4.5
    threshold_fraction: float = 0.5


@dataclass
class SegOptions:
    d_l: Optional[float] = None
    d_adj: Optional[float] = None
    d_l_factor: float = 3.0
    seed_curvature_max: float = math.inf
    normal_angle_max: float = 20.0
    max_facet_points: Optional[int] = None
    kmeans_iters: int = 5
    pca_k: int = 10


@dataclass
class MetricsOptions:
    tp_threshold: float = 0.70


@dataclass
class TraitOptions:
    voxel_size: Optional[float] = None
    smooth_iters: int = 3
    search_radius: Optional[float] = None
    max_surface_angle: float = 45.0
    min_points: int = 10


@dataclass
class SynthOptions:
    scene: Optional[str] = None
    spacing: Optional[float] = None
    spec: Optional[dict] = None  # full SceneSpec dict, overrides ``scene``


@dataclass
class PipelineConfig:
    input: Optional[str] = None
    output: Optional[str] = None
    gt: Optional[str] = None
    seed: int = 0
    preprocess: PreprocessOptions = field(default_factory=PreprocessOptions)
    joint: JointOptions = field(default_factory=JointOptions)
    segmentation: SegOptions = field(default_factory=SegOptions)
    metrics: MetricsOptions = field(default_factory=MetricsOptions)
    traits: TraitOptions = field(default_factory=TraitOptions)
    synth: SynthOptions = field(default_factory=SynthOptions)

    @classmethod
    def from_dict(cls, d: Optional[dict]) -> "PipelineConfig":
        return _build(cls, d or {}, "")

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        try:
            data = yaml.safe_load(Path(path).read_text())
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse config {path}: {exc}") from None
        if data is not None and not isinstance(data, dict):
            raise ConfigError("config file must hold a mapping at the top level")
        return cls.from_dict(data).validate()

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        if math.isinf(d["segmentation"]["seed_curvature_max"]):
            d["segmentation"]["seed_curvature_max"] = "inf"
        return d

    def override(self, section: Optional[str], **values) -> "PipelineConfig":
        """Apply flag values (None means 'not given') on top of the file values."""
        target = getattr(self, section) if section else self
        for key, value in values.items():
            if value is not None:
                if not hasattr(target, key):
                    raise ConfigError(f"unknown option {section}.{key}")
                setattr(target, key, value)
        return self

    def validate(self) -> "PipelineConfig":
        j, s, t = self.joint, self.segmentation, self.traits
        if j.rounds < 1:
            raise ConfigError("joint.rounds must be at least 1")
        if j.r is not None and not j.r > 0:
            raise ConfigError("joint.r must be positive")
        if j.n_threshold is not None and j.n_threshold < 0:
            raise ConfigError("joint.n_threshold must be non-negative")
        if j.k < 3 or j.n_iter < 1 or not j.theta_threshold > 0:
            raise ConfigError("joint.k >= 3, joint.n_iter >= 1 and joint.theta_threshold > 0 required")
        if not 0 < j.threshold_fraction < 1 or not j.r_factor > 0 or not s.d_l_factor > 0:
            raise ConfigError("factors must be positive and threshold_fraction in (0, 1)")
        if s.d_l is not None and not s.d_l > 0:
            raise ConfigError("segmentation.d_l must be positive")
        if not 0 < self.metrics.tp_threshold < 1:
            raise ConfigError("metrics.tp_threshold must lie in (0, 1)")
        if t.smooth_iters < 0 or (t.voxel_size is not None and not t.voxel_size > 0):
            raise ConfigError("traits.smooth_iters >= 0 and positive voxel_size required")
        self.preprocess.filters()
        return self

    # -- resolution of data-dependent defaults ------------------------------------------

    def resolve(self, cloud) -> tuple[JointFilterParams, SegParams, dict]:
        """Effective joint-filter and segmentation parameters for ``cloud``.

        Missing r, n_threshold and d_l are filled from the cloud's average spacing.
        """
        j, s = self.joint, self.segmentation
        info = {}
        if j.r is None or j.n_threshold is None or s.d_l is None:
            sug = suggest_params(cloud, seed=self.seed, r_factor=j.r_factor, d_l_factor=s.d_l_factor,
                                 threshold_fraction=j.threshold_fraction)
            info = {"spacing": sug.spacing, "mean_neighbors": sug.mean_neighbors}
            r = j.r if j.r is not None else sug.joint.r
            if j.n_threshold is not None:
                n_threshold = j.n_threshold
            elif j.r is None:
                n_threshold = sug.joint.n_threshold
            else:
                n_threshold, info["mean_neighbors"] = suggest_threshold(cloud, r, j.threshold_fraction)
            d_l = s.d_l if s.d_l is not None else sug.d_l
        else:
            r, n_threshold, d_l = j.r, j.n_threshold, s.d_l
        joint = JointFilterParams(r, int(n_threshold), j.k, j.theta_threshold, j.n_iter).validate()
        return joint, self.seg_params(d_l), info

    def seg_params(self, d_l: Optional[float] = None) -> SegParams:
        s = self.segmentation
        d_l = s.d_l if d_l is None else d_l
        if d_l is None:
            raise ConfigError("segmentation.d_l is required here")
        return SegParams(d_l, s.d_adj, s.seed_curvature_max, s.normal_angle_max, s.max_facet_points,
                         s.kmeans_iters, s.pca_k).validate()


def _build(cls, d: Any, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where or 'config'} must be a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(d) - set(fields)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where or 'config'}: {sorted(unknown)}")
    kwargs = {}
    for name, value in d.items():
        sub = _NESTED.get((cls, name))
        path = f"{where}.{name}" if where else name
        if sub is not None:
            kwargs[name] = _build(sub, value or {}, path)
        elif name == "seed_curvature_max" and value in ("inf", "Infinity"):
            kwargs[name] = math.inf
        else:
            kwargs[name] = value
    return cls(**kwargs)


_NESTED = {
    (PipelineConfig, "preprocess"): PreprocessOptions,
    (PipelineConfig, "joint"): JointOptions,
    (PipelineConfig, "segmentation"): SegOptions,
    (PipelineConfig, "metrics"): MetricsOptions,
    (PipelineConfig, "traits"): TraitOptions,
    (PipelineConfig, "synth"): SynthOptions,
}
