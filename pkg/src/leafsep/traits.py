"""Per-leaf area, length and width.

Clouds are in meters; traits are reported in cm and cm^2.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from .cloud import PointCloud, SpatialIndex, average_spacing, frames_from_neighborhoods, sqdist
from .errors import DegenerateSurface, TooSparse
from .preprocess import voxel_downsample

TWO_PI = 2 * math.pi


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(self.triangles) and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise ValueError("triangle index out of range")

    def triangle_areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.triangles[:, i]] for i in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


@dataclass
class LeafTraits:
    area: float  # cm^2
    length: float  # cm
    width: float  # cm


# -- smoothing ---------------------------------------------------------------------

def _oriented_normals(points: np.ndarray, k: int):
    """Per-point PCA frames with normals flipped toward the cloud's dominant normal."""
    index = SpatialIndex(PointCloud(points))
    k = min(k, len(points) - 1)
    nbr = index.knn_all(k, include_self=True)
    u, v, n, _, _ = frames_from_neighborhoods(points[nbr])
    _, _, gn, _, _ = frames_from_neighborhoods(points[None])
    flip = n @ gn[0] < 0
    n = np.where(flip[:, None], -n, n)
    v = np.cross(n, u)
    return u, v, n, nbr


def smooth_and_downsample(leaf: PointCloud, voxel_size: Optional[float], smooth_iters: int = 3,
                          k: int = 10, strength: float = 0.5) -> PointCloud:
    """Voxel-downsample, then relax each point toward its k-NN centroid.

    Only the displacement component along the local PCA normal is applied, so
    the surface is denoised without pulling the leaf rim inward.
    """
    if len(leaf) < 10:
        raise TooSparse(f"leaf has {len(leaf)} points, need at least 10")
    cloud = voxel_downsample(leaf, voxel_size) if voxel_size else leaf.reindexed()
    if len(cloud) < 10:
        raise TooSparse("too few points left after downsampling")
    p = cloud.positions.copy()
    k = min(k, len(p) - 1)
    for _ in range(smooth_iters):
        index = SpatialIndex(PointCloud(p))
        nbr = index.knn_all(k, include_self=True)
        _, _, n, _, _ = frames_from_neighborhoods(p[nbr])
        shift = p[nbr[:, 1:]].mean(axis=1) - p
        p = p + strength * np.einsum("ij,ij->i", shift, n)[:, None] * n
    return PointCloud(p, cloud.colors, cloud.origin)


# -- greedy projection triangulation ----------------------------------------------------

def _sector(frame_u, frame_v, origin, a, b):
    """Angular interval (start, width) spanned at ``origin`` by the edges to a and b."""
    da, db = a - origin, b - origin
    ta = math.atan2(da @ frame_v, da @ frame_u)
    tb = math.atan2(db @ frame_v, db @ frame_u)
    w = (tb - ta) % TWO_PI
    if w > math.pi:
        return tb, TWO_PI - w
    return ta, w


def _overlaps(s1, w1, s2, w2, eps=1e-6):
    d = (s2 - s1) % TWO_PI
    return not (d >= w1 - eps and d + w2 <= TWO_PI + eps)


def _max_angle(p0, p1, p2):
    best = 0.0
    for a, b, c in ((p0, p1, p2), (p1, p2, p0), (p2, p0, p1)):
        e1, e2 = b - a, c - a
        cosang = e1 @ e2 / math.sqrt((e1 @ e1) * (e2 @ e2))
        best = max(best, math.acos(max(-1.0, min(1.0, cosang))))
    return best


def triangulate(leaf: PointCloud, search_radius: Optional[float] = None,
                max_surface_angle: float = 45.0, max_neighbors: int = 30,
                max_triangle_angle: float = 170.0, k: int = 10) -> TriangleMesh:
    """Greedy projection triangulation advancing from a seed point.

    Points are visited breadth first. Each one projects its neighbors within
    ``search_radius`` (normals within ``max_surface_angle``) onto its tangent
    plane; the Delaunay fan around it in that projection proposes triangles,
    which are accepted when they keep every edge manifold and do not overlap
    triangles already fanned around any of their three vertices.
    """
    p = leaf.positions
    n = len(p)
    if n < 3:
        raise DegenerateSurface("need at least three points")
    _, _, _, w, degenerate = frames_from_neighborhoods(p[None])
    if degenerate[0] or w[0, 1] <= 1e-12 * w[0, 0]:
        raise DegenerateSurface("points are collinear or coincident")
    if search_radius is None:
        search_radius = 3.0 * average_spacing(leaf)
    u, v, nrm, _ = _oriented_normals(p, k) if n > 3 else (None, None, None, None)
    if u is None:
        # three points: one shared frame
        _, _, gn, _, _ = frames_from_neighborhoods(p[None])
        u = np.tile(p[1] - p[0], (n, 1))
        u /= np.linalg.norm(u[0])
        nrm = np.tile(gn[0], (n, 1))
        v = np.cross(nrm, u)
    index = SpatialIndex(PointCloud(p))
    cos_surface = math.cos(math.radians(max_surface_angle))
    max_tri = math.radians(max_triangle_angle)
    r2 = search_radius * search_radius
    tie_w = (np.arange(n, dtype=np.uint64) * np.uint64(2654435761) % np.uint64(2 ** 32)) / 2.0 ** 32
    tie_eps = 1e-9 * r2

    tris = {}
    edge_use = {}
    sectors = [[] for _ in range(n)]
    queued = np.zeros(n, dtype=bool)

    def try_add(i, a, b):
        key = tuple(sorted((i, a, b)))
        if key in tris:
            return
        pa, pb, pi = p[a], p[b], p[i]
        if sqdist(pa, pb) > r2:
            return
        if np.linalg.norm(np.cross(pa - pi, pb - pi)) <= 1e-18:
            return
        if _max_angle(pi, pa, pb) > max_tri:
            return
        for e in ((min(i, a), max(i, a)), (min(i, b), max(i, b)), (min(a, b), max(a, b))):
            if edge_use.get(e, 0) >= 2:
                return
        new = []
        for w_, x, y in ((i, a, b), (a, b, i), (b, i, a)):
            s, wd = _sector(u[w_], v[w_], p[w_], p[x], p[y])
            for s2, w2 in sectors[w_]:
                if _overlaps(s, wd, s2, w2):
                    return
            new.append((w_, s, wd))
        tris[key] = (i, a, b)
        for e in ((min(i, a), max(i, a)), (min(i, b), max(i, b)), (min(a, b), max(a, b))):
            edge_use[e] = edge_use.get(e, 0) + 1
        for w_, s, wd in new:
            sectors[w_].append((s, wd))

    def fan(i):
        cand = index.radius_query(i, search_radius)
        cand = cand[cand != i]
        if len(cand) > max_neighbors:
            d2 = sqdist(p[cand], p[i])
            cand = cand[np.lexsort((cand, d2))[:max_neighbors]]
        cand = cand[np.abs(nrm[cand] @ nrm[i]) >= cos_surface]
        if len(cand) < 2:
            return cand, []
        if len(cand) == 2:
            return cand, [(int(cand[0]), int(cand[1]))]
        d = p[cand] - p[i]
        xy = np.c_[d @ u[i], d @ v[i]]
        pts2 = np.vstack([[0.0, 0.0], xy])
        # Delaunay as the lower hull of the paraboloid lift; the index-keyed
        # perturbation resolves cocircular ties identically in every umbrella
        ids = np.r_[i, cand]
        lift = (pts2 * pts2).sum(axis=1) + tie_eps * tie_w[ids]
        try:
            hull = ConvexHull(np.c_[pts2, lift])
        except (QhullError, ValueError):
            return cand, []
        lower = hull.simplices[hull.equations[:, 2] < -1e-9]
        ring = lower[(lower == 0).any(axis=1)]
        out = []
        for s in ring:
            others = [int(x) for x in s if x != 0]
            a, b = cand[others[0] - 1], cand[others[1] - 1]
            out.append((int(a), int(b)))
        # visit the fan in angular order around i
        ang = [math.atan2(*(xy[list(cand).index(a)][::-1])) for a, _ in out]
        out = [t for _, t in sorted(zip(ang, out))]
        return cand, out

    for seed in range(n):
        if queued[seed]:
            continue
        queued[seed] = True
        front = deque([seed])
        while front:
            i = front.popleft()
            cand, triangles = fan(i)
            for a, b in triangles:
                try_add(i, a, b)
            for a, b in triangles:
                for j in (a, b):
                    if not queued[j]:
                        queued[j] = True
                        front.append(j)
    for loop in _hole_loops(list(tris), p, 6.0 * search_radius):
        for t in _ear_clip(p, loop, nrm[loop].sum(axis=0)):
            key = tuple(sorted(t))
            if key not in tris:
                tris[key] = t
    _close_small_gaps(tris, p, nrm)
    faces = np.array(sorted(tris.values(), key=lambda t: tuple(sorted(t))), dtype=np.int64).reshape(-1, 3)
    return TriangleMesh(p.copy(), faces)


def _hole_loops(tris, p, max_perimeter):
    """Closed loops of once-used edges shorter than ``max_perimeter``.

    Conflicting umbrella choices can leave small holes inside the mesh; the
    outer boundary of a leaf is far longer than the perimeter bound. Loops
    through vertices with more than two open edges are skipped.
    """
    use = {}
    for t in tris:
        for a, b in ((t[0], t[1]), (t[1], t[2]), (t[0], t[2])):
            use[a, b] = use.get((a, b), 0) + 1
    adj = {}
    for (a, b), c in use.items():
        if c == 1:
            adj.setdefault(a, []).append(b)
            adj.setdefault(b, []).append(a)
    seen = set()
    loops = []
    for start in sorted(adj):
        if start in seen:
            continue
        loop, prev, cur, ok = [start], None, start, True
        seen.add(start)
        while True:
            nb = adj[cur]
            if len(nb) != 2:
                ok = False
            nxt = [x for x in nb if x != prev]
            if not nxt:
                ok = False
                break
            prev, cur = cur, nxt[0]
            if cur == start:
                break
            if cur in seen:
                ok = False
                break
            seen.add(cur)
            loop.append(cur)
        if not ok or len(loop) < 3:
            continue
        q = p[loop]
        if np.linalg.norm(q - np.roll(q, -1, axis=0), axis=1).sum() <= max_perimeter:
            loops.append(loop)
    return loops


def _close_small_gaps(tris, p, nrm, max_passes=5):
    """Fill triangular and quadrilateral gaps bounded by open edges.

    A candidate triangle must lie on the open side of each of its open edges
    and may not reuse a closed edge, so the outer boundary never grows outward.
    """
    for _ in range(max_passes):
        third = {}
        for t in tris:
            for a, b, c in ((t[0], t[1], t[2]), (t[1], t[2], t[0]), (t[0], t[2], t[1])):
                third.setdefault((a, b), []).append(c)
        adj = {}
        for (a, b), v in third.items():
            if len(v) == 1:
                adj.setdefault(a, set()).add(b)
                adj.setdefault(b, set()).add(a)

        def fits(tri):
            for a, b, c in ((tri[0], tri[1], tri[2]), (tri[1], tri[2], tri[0]), (tri[0], tri[2], tri[1])):
                used = third.get((min(a, b), max(a, b)), [])
                if len(used) >= 2:
                    return False
                if used:
                    n = nrm[a] + nrm[b]
                    d = p[b] - p[a]
                    if (np.cross(d, p[used[0]] - p[a]) @ n) * (np.cross(d, p[c] - p[a]) @ n) >= 0:
                        return False
            return True

        added = []
        for a in sorted(adj):
            for b in sorted(x for x in adj[a] if x > a):
                for c in sorted(adj[a] & adj[b]):
                    if c > b:
                        added.append((a, b, c))
                for c in sorted(adj[b] - {a}):
                    for d in sorted((adj[c] & adj[a]) - {b}):
                        if sqdist(p[a], p[c]) <= sqdist(p[b], p[d]):
                            added.append(((a, b, c), (a, c, d)))
                        else:
                            added.append(((a, b, d), (b, c, d)))
        fresh = False
        for cand in added:
            group = cand if isinstance(cand[0], tuple) else (cand,)
            keys = [tuple(sorted(t)) for t in group]
            if any(k in tris for k in keys) or not all(fits(k) for k in keys):
                continue
            for k in keys:
                tris[k] = k
                for a, b in ((k[0], k[1]), (k[1], k[2]), (k[0], k[2])):
                    third.setdefault((a, b), []).append(k[2] if (a, b) == (k[0], k[1]) else
                                                          k[0] if (a, b) == (k[1], k[2]) else k[1])
            fresh = True
        if not fresh:
            return


def _ear_clip(p, loop, normal):
    """Triangulate a small polygon by ear clipping in the plane orthogonal to ``normal``."""
    m = normal / (np.linalg.norm(normal) or 1.0)
    helper = np.eye(3)[np.argmin(np.abs(m))]
    e1 = np.cross(m, helper)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(m, e1)
    xy = {v: np.array([p[v] @ e1, p[v] @ e2]) for v in loop}
    poly = list(loop)
    area2 = sum(xy[a][0] * xy[b][1] - xy[b][0] * xy[a][1] for a, b in zip(poly, poly[1:] + poly[:1]))
    if area2 < 0:
        poly.reverse()

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    out = []
    while len(poly) > 3:
        best = None
        for k in range(len(poly)):
            a, b, c = poly[k - 1], poly[k], poly[(k + 1) % len(poly)]
            if cross(xy[a], xy[b], xy[c]) <= 0:
                continue
            if any(cross(xy[a], xy[b], xy[v]) >= 0 and cross(xy[b], xy[c], xy[v]) >= 0
                   and cross(xy[c], xy[a], xy[v]) >= 0 for v in poly if v not in (a, b, c)):
                continue
            score = _max_angle(p[a], p[b], p[c])
            if best is None or score < best[0]:
                best = (score, k)
        if best is None:
            return []
        k = best[1]
        out.append((poly[k - 1], poly[k], poly[(k + 1) % len(poly)]))
        del poly[k]
    out.append(tuple(poly))
    return out


def leaf_area(mesh: TriangleMesh) -> float:
    """Sum of triangle areas in cm^2 (mesh in meters)."""
    return float(mesh.triangle_areas().sum() * 1e4)


def leaf_length_width(leaf: PointCloud, k: int = 10) -> tuple[float, float]:
    """Extents (cm) along the in-plane principal axes after projecting on the mean-normal plane."""
    p = leaf.positions
    if len(p) < 3:
        raise DegenerateSurface("need at least three points")
    _, _, _, w, degenerate = frames_from_neighborhoods(p[None])
    if degenerate[0] or w[0, 1] <= 1e-12 * w[0, 0]:
        raise DegenerateSurface("points are collinear or coincident")
    _, _, nrm, _ = _oriented_normals(p, k)
    m = nrm.mean(axis=0)
    m /= np.linalg.norm(m)
    # in-plane basis
    helper = np.eye(3)[np.argmin(np.abs(m))]
    e1 = np.cross(m, helper)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(m, e1)
    c = p - p.mean(axis=0)
    xy = np.c_[c @ e1, c @ e2]
    cov = xy.T @ xy / len(xy)
    _, vec = np.linalg.eigh(cov)
    major, minor = vec[:, 1], vec[:, 0]
    a = xy @ major
    b = xy @ minor
    length = (a.max() - a.min()) * 100
    width = (b.max() - b.min()) * 100
    if width > length:
        length, width = width, length
    return float(length), float(width)


def estimate_traits(leaf: PointCloud, voxel_size: Optional[float] = None, smooth_iters: int = 3,
                    search_radius: Optional[float] = None, max_surface_angle: float = 45.0,
                    return_mesh: bool = False):
    """Area, length and width of one segmented leaf, all measured on the smoothed cloud."""
    smooth = smooth_and_downsample(leaf, voxel_size, smooth_iters)
    mesh = triangulate(smooth, search_radius, max_surface_angle)
    length, width = leaf_length_width(smooth)
    traits = LeafTraits(leaf_area(mesh), length, width)
    return (traits, mesh) if return_mesh else traits
