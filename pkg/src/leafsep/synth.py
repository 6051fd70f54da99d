"""Synthetic labeled canopy scenes with analytic leaf traits.

Leaves are elliptic outlines in a local (s, t) parameter plane, lifted to
3D by one of three shapes and placed with a rigid pose:

* ``flat``   -- (s, t, 0)
* ``strip``  -- cylindrical bend along s with radius 1/curvature (isometric)
* ``funnel`` -- paraboloid cap z = curvature * ((s - apex)^2 + t^2) / 2

Sizes are given in cm, positions and spacing in meters.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy import integrate
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from .cloud import PointCloud
from .errors import ConfigError

SHAPES = ("flat", "disc", "strip", "funnel")
LAYOUTS = ("none", "coplanar-touching", "cross-overlap", "mixed")


@dataclass
class LeafSpec:
    shape: str = "flat"
    a: float = 5.0  # semi-axis along s, cm
    b: float = 3.0  # semi-axis along t, cm
    curvature: float = 0.0  # 1/m
    apex: float = 0.0  # funnel apex offset along s, cm
    center: tuple = (0.0, 0.0, 0.0)  # m
    rotation: tuple = (0.0, 0.0, 0.0)  # xyz Euler angles, degrees
    spacing: float = 0.001  # m
    noise: float = 0.0  # m, along the surface normal
    jitter: float = 0.15  # fraction of spacing

    def validate(self):
        if self.shape not in SHAPES:
            raise ConfigError(f"unknown leaf shape {self.shape!r}")
        if self.a <= 0 or self.b <= 0 or self.spacing <= 0:
            raise ConfigError("leaf axes and spacing must be positive")
        if self.noise < 0 or not 0 <= self.jitter < 0.5:
            raise ConfigError("noise must be >= 0 and jitter in [0, 0.5)")
        if self.shape == "strip" and 2 * self.a / 100 * abs(self.curvature) >= 2 * math.pi:
            raise ConfigError("strip bend wraps past a full turn and intersects itself")
        return self


@dataclass
class SceneSpec:
    leaves: list = field(default_factory=list)
    layout: str = "none"
    contact_width: float = 0.0  # m; points this close to another leaf are thinned
    contact_density: float = 0.5
    seed: int = 0

    def validate(self):
        if self.layout not in LAYOUTS:
            raise ConfigError(f"unknown layout {self.layout!r}")
        if not self.leaves:
            raise ConfigError("scene needs at least one leaf")
        for leaf in self.leaves:
            leaf.validate()
        if self.contact_width < 0 or not 0 < self.contact_density <= 1:
            raise ConfigError("contact_width >= 0 and contact_density in (0, 1] required")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["leaves"] = [asdict(l) for l in self.leaves]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ConfigError(f"unknown scene keys {sorted(unknown)}")
        leaves = []
        for entry in d.pop("leaves", []):
            bad = set(entry) - set(LeafSpec.__dataclass_fields__)
            if bad:
                raise ConfigError(f"unknown leaf keys {sorted(bad)}")
            leaves.append(LeafSpec(**entry))
        return cls(leaves=leaves, **d).validate()


@dataclass
class LeafTruth:
    area: float  # cm^2
    length: float  # cm
    width: float  # cm


@dataclass
class Scene:
    cloud: PointCloud
    labels: np.ndarray
    traits: list
    contact: np.ndarray  # True for points inside a thinned contact strip

    def leaf(self, i: int) -> PointCloud:
        return self.cloud.subset(self.labels == i)


# -- geometry -----------------------------------------------------------------

def _outline(a, b, step):
    """Boundary samples of the ellipse at roughly uniform arc-length ``step``."""
    phi = np.linspace(0, 2 * np.pi, 4096, endpoint=False)
    ring = np.c_[a * np.cos(phi), b * np.sin(phi)]
    seg = np.linalg.norm(np.diff(np.vstack([ring, ring[:1]]), axis=0), axis=1)
    arc = np.concatenate([[0], np.cumsum(seg)])
    n = max(8, int(round(arc[-1] / step)))
    targets = np.arange(n) * arc[-1] / n
    phis = np.interp(targets, arc, np.append(phi, 2 * np.pi))
    return np.c_[a * np.cos(phis), b * np.sin(phis)]


def _lift(leaf: LeafSpec, st):
    s, t = st[:, 0], st[:, 1]
    k = leaf.curvature
    if leaf.shape == "strip" and k != 0:
        R = 1.0 / k
        x, z = R * np.sin(s / R), R * (1 - np.cos(s / R))
        pos = np.c_[x, t, z]
        nrm = np.c_[-np.sin(s / R), np.zeros_like(s), np.cos(s / R)]
    elif leaf.shape == "funnel":
        apex = leaf.apex / 100
        z = 0.5 * k * ((s - apex) ** 2 + t ** 2)
        pos = np.c_[s, t, z]
        nrm = np.c_[-k * (s - apex), -k * t, np.ones_like(s)]
        nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    else:
        pos = np.c_[s, t, np.zeros_like(s)]
        nrm = np.tile([0.0, 0.0, 1.0], (len(s), 1))
    return pos, nrm


def _param_samples(leaf: LeafSpec, rng):
    """Jittered grid inside the outline plus outline samples, in (s, t) meters.

    Returns (st, grid_ij) where grid_ij is -1 for outline samples.
    """
    a, b, h = leaf.a / 100, leaf.b / 100, leaf.spacing
    boundary = _outline(a, b, h)
    n = int(math.ceil(max(a, b) / h)) + 1
    i, j = np.meshgrid(np.arange(-n, n + 1), np.arange(-n, n + 1), indexing="ij")
    ij = np.c_[i.ravel(), j.ravel()]
    st = ij * h + rng.uniform(-leaf.jitter, leaf.jitter, size=ij.shape) * h
    dense = _outline(a, b, h / 16)
    inside = (st[:, 0] / a) ** 2 + (st[:, 1] / b) ** 2 < 1
    st, ij = st[inside], ij[inside]
    dist, _ = cKDTree(dense).query(st)
    keep = dist >= 0.5 * h
    st, ij = st[keep], ij[keep]
    st = np.vstack([st, boundary])
    ij = np.vstack([ij, np.full((len(boundary), 2), -1)])
    return st, ij


def _funnel_area(leaf: LeafSpec) -> float:
    a, b, k, s0 = leaf.a / 100, leaf.b / 100, leaf.curvature, leaf.apex / 100

    def f(rho, phi):
        s, t = a * rho * np.cos(phi), b * rho * np.sin(phi)
        return a * b * rho * np.sqrt(1 + k * k * ((s - s0) ** 2 + t * t))

    val, _ = integrate.dblquad(f, 0, 2 * np.pi, 0, 1, epsabs=1e-14, epsrel=1e-10)
    return val


def analytic_traits(leaf: LeafSpec) -> LeafTruth:
    """Area of the surface and the flattened outline's length and width."""
    a, b = leaf.a, leaf.b
    if leaf.shape == "funnel" and leaf.curvature != 0:
        area = _funnel_area(leaf) * 1e4
    else:
        area = math.pi * a * b
    return LeafTruth(area, 2 * max(a, b), 2 * min(a, b))


def sample_leaf(leaf: LeafSpec, rng):
    """Points, unit normals and grid indices (-1 for outline samples) of one leaf in world frame."""
    leaf.validate()
    if leaf.shape == "disc":
        leaf = LeafSpec(**{**asdict(leaf), "b": leaf.a, "shape": "flat"})
    st, ij = _param_samples(leaf, rng)
    pos, nrm = _lift(leaf, st)
    if leaf.noise > 0:
        pos = pos + nrm * rng.normal(0, leaf.noise, size=(len(pos), 1))
    rot = Rotation.from_euler("xyz", leaf.rotation, degrees=True)
    pos = rot.apply(pos) + np.asarray(leaf.center, dtype=float)
    nrm = rot.apply(nrm)
    return pos, nrm, ij


def generate_scene(spec: SceneSpec) -> Scene:
    spec.validate()
    parts = []
    for i, leaf in enumerate(spec.leaves):
        rng = np.random.default_rng([spec.seed, i])
        parts.append(sample_leaf(leaf, rng))
    keep = [np.ones(len(p[0]), dtype=bool) for p in parts]
    contact = [np.zeros(len(p[0]), dtype=bool) for p in parts]
    if spec.contact_width > 0 and spec.layout in ("cross-overlap", "mixed") and len(parts) > 1:
        trees = [cKDTree(p[0]) for p in parts]
        for i, (pos, _, ij) in enumerate(parts):
            near = np.zeros(len(pos), dtype=bool)
            for j, tree in enumerate(trees):
                if j != i:
                    d, _ = tree.query(pos, distance_upper_bound=spec.contact_width)
                    near |= np.isfinite(d)
            contact[i] = near
            keep[i] = ~near | _thin(ij, spec.contact_density, np.random.default_rng([spec.seed, i, 1]))
    pos = np.concatenate([p[0][k] for p, k in zip(parts, keep)])
    labels = np.concatenate([np.full(k.sum(), i, dtype=np.int64) for i, k in enumerate(keep)])
    contact_mask = np.concatenate([c[k] for c, k in zip(contact, keep)])
    traits = [analytic_traits(leaf) for leaf in spec.leaves]
    return Scene(PointCloud(pos), labels, traits, contact_mask)


def _thin(ij, density, rng):
    """Keep mask realizing ``density`` on grid samples (checkerboard at 0.5)."""
    on_grid = ij[:, 0] >= 0
    if density == 0.5:
        keep = (ij[:, 0] + ij[:, 1]) % 2 == 0
    else:
        keep = rng.random(len(ij)) < density
    # outline samples: every other one
    ring = np.flatnonzero(~on_grid)
    keep[ring] = (np.arange(len(ring)) % 2 == 0) if density == 0.5 else rng.random(len(ring)) < density
    return keep


# -- named scenes used by tests, scripts and the CLI ------------------------------

def single_disc(radius_cm=5.0, spacing=0.001, noise=0.0, seed=0) -> SceneSpec:
    return SceneSpec([LeafSpec("disc", radius_cm, radius_cm, spacing=spacing, noise=noise)], seed=seed)


def coplanar_pair(spacing=0.001, seed=0) -> SceneSpec:
    """Two slender flat ellipses tip to tip on one plane, half a spacing apart."""
    a, b = 5.0, 1.2
    gap = 0.5 * spacing
    c = a / 100 + gap / 2
    return SceneSpec(
        [LeafSpec("flat", a, b, center=(-c, 0, 0), spacing=spacing),
         LeafSpec("flat", a, b, center=(c, 0, 0), spacing=spacing)],
        layout="coplanar-touching", seed=seed)


def crossed_funnels(spacing=0.001, seed=0) -> SceneSpec:
    """Two cupped leaves tilted toward each other whose tips cross.

    Points within 1 cm of the other leaf are sampled at half density.
    """
    return SceneSpec(
        [LeafSpec("funnel", 5.0, 3.0, curvature=6.0, center=(-0.044, 0, 0),
                  rotation=(0, 35, 0), spacing=spacing),
         LeafSpec("funnel", 5.0, 3.0, curvature=6.0, center=(0.044, 0, 0),
                  rotation=(0, -35, 0), spacing=spacing)],
        layout="cross-overlap", contact_width=0.01, seed=seed)


def four_funnels(spacing=0.001, seed=0) -> SceneSpec:
    """Two crossed funnel pairs side by side; each pair's tips cross on a contact curve."""
    leaves = []
    for y in (-0.045, 0.045):
        for x, tilt in ((-0.044, 35), (0.044, -35)):
            leaves.append(LeafSpec("funnel", 5.0, 3.0, curvature=6.0, center=(x, y, 0),
                                   rotation=(0, tilt, 0), spacing=spacing))
    return SceneSpec(leaves, layout="cross-overlap", contact_width=0.01, seed=seed)


def tiny_disc_next_to_leaf(spacing=0.001, seed=0) -> SceneSpec:
    """A large leaf and a small disc that three rounds of filtering consume entirely."""
    return SceneSpec(
        [LeafSpec("flat", 5.0, 3.0, center=(0, 0, 0), spacing=spacing),
         LeafSpec("disc", 0.45, 0.45, center=(0.0, 0.0, 0.02), spacing=spacing)],
        seed=seed)


def mixed_canopy(spacing=0.001, seed=0) -> SceneSpec:
    """Nine leaves: a crossed pair, a coplanar pair, a stacked pair and three free leaves."""
    h = spacing
    c = 0.05 + 0.25 * h
    leaves = [
        LeafSpec("funnel", 5.0, 3.0, curvature=6.0, center=(-0.044, 0, 0), rotation=(0, 35, 0), spacing=h),
        LeafSpec("funnel", 5.0, 3.0, curvature=6.0, center=(0.044, 0, 0), rotation=(0, -35, 0), spacing=h),
        LeafSpec("flat", 5.0, 1.2, center=(-c, 0.12, 0), spacing=h),
        LeafSpec("flat", 5.0, 1.2, center=(c, 0.12, 0), spacing=h),
        LeafSpec("strip", 5.0, 2.5, curvature=8.0, center=(-0.03, -0.12, 0), spacing=h),
        LeafSpec("flat", 4.0, 2.5, center=(0.02, -0.12, 0.03), rotation=(0, 0, 30), spacing=h),
        LeafSpec("disc", 3.0, 3.0, center=(0.2, 0.1, 0.01), spacing=h),
        LeafSpec("funnel", 4.0, 3.0, curvature=8.0, apex=1.0, center=(0.2, -0.05, 0),
                 rotation=(10, 0, 60), spacing=h),
        LeafSpec("strip", 4.0, 2.0, curvature=12.0, center=(0.2, -0.17, 0), rotation=(0, 0, -20), spacing=h),
    ]
    return SceneSpec(leaves, layout="mixed", contact_width=0.01, seed=seed)


def dense_canopy(seed=0) -> SceneSpec:
    """Two nine-leaf canopies side by side, about 60 000 points at 1 mm spacing."""
    first = mixed_canopy(seed=seed)
    second = []
    for leaf in mixed_canopy(seed=seed).leaves:
        x, y, z = leaf.center
        second.append(LeafSpec(**{**asdict(leaf), "center": (x + 0.45, y, z)}))
    return SceneSpec(first.leaves + second, layout="mixed", contact_width=0.01, seed=seed)


def trait_leaves(spacing=0.001, noise_frac=0.2) -> list:
    """Nine isolated leaves (flat, bent and cupped) for trait accuracy checks."""
    kw = dict(spacing=spacing, noise=noise_frac * spacing)
    return [
        LeafSpec("flat", 5.0, 3.0, **kw), LeafSpec("flat", 4.0, 2.0, **kw), LeafSpec("disc", 3.0, 3.0, **kw),
        LeafSpec("strip", 5.0, 2.5, curvature=8.0, **kw), LeafSpec("strip", 4.0, 2.0, curvature=12.0, **kw),
        LeafSpec("strip", 6.0, 3.0, curvature=5.0, **kw),
        LeafSpec("funnel", 5.0, 3.0, curvature=6.0, **kw), LeafSpec("funnel", 4.0, 3.0, curvature=8.0, apex=1.0, **kw),
        LeafSpec("funnel", 3.0, 2.0, curvature=10.0, **kw),
    ]


SCENES = {
    "disc": single_disc,
    "coplanar-pair": coplanar_pair,
    "crossed-funnels": crossed_funnels,
    "four-funnels": four_funnels,
    "eroded-disc": tiny_disc_next_to_leaf,
    "mixed-canopy": mixed_canopy,
    "dense-canopy": dense_canopy,
}


def named_scene(name: str, **kwargs) -> SceneSpec:
    try:
        return SCENES[name](**kwargs)
    except KeyError:
        raise ConfigError(f"unknown scene {name!r}; choose from {sorted(SCENES)}") from None
