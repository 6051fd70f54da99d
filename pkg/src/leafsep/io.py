"""PLY reading/writing, labeled-cloud export and layer-stack persistence."""
from __future__ import annotations

import colorsys
import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .cloud import UNLABELED, PointCloud
from .errors import ParseError, UnsupportedFormat
from .joint_filter import LayerStack

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}
_FORMATS = {"ascii": None, "binary_little_endian": "<", "binary_big_endian": ">"}


@dataclass
class PlyData:
    """Vertex properties of a PLY file, one array per property."""

    properties: dict
    fmt: str

    def __len__(self):
        return len(next(iter(self.properties.values()))) if self.properties else 0


def _parse_header(f):
    first = f.readline()
    if first.strip() != b"ply":
        raise ParseError("missing 'ply' magic", line=1)
    fmt = None
    elements = []  # [name, count, [(prop, type)]]
    lineno = 1
    while True:
        raw = f.readline()
        lineno += 1
        if not raw:
            raise ParseError("header not terminated by end_header", line=lineno)
        words = raw.decode("ascii", errors="replace").split()
        if not words or words[0] in ("comment", "obj_info"):
            continue
        key = words[0]
        if key == "end_header":
            break
        if key == "format":
            if len(words) != 3 or words[1] not in _FORMATS:
                raise UnsupportedFormat(f"line {lineno}: unsupported PLY format {' '.join(words[1:])!r}")
            fmt = words[1]
        elif key == "element":
            if len(words) != 3 or not words[2].isdigit():
                raise ParseError(f"malformed element declaration {raw.strip()!r}", line=lineno)
            elements.append([words[1], int(words[2]), []])
        elif key == "property":
            if not elements:
                raise ParseError("property before any element", line=lineno)
            if len(words) > 1 and words[1] == "list":
                if elements[-1][0] == "vertex":
                    raise UnsupportedFormat(f"line {lineno}: list properties are not supported on vertices")
                continue  # only the vertex element is read
            if len(words) != 3 or words[1] not in _PLY_TYPES:
                if elements[-1][0] != "vertex":
                    continue
                raise ParseError(f"unknown property type in {raw.strip()!r}", line=lineno)
            elements[-1][2].append((words[2], _PLY_TYPES[words[1]]))
        else:
            raise ParseError(f"unexpected header keyword {key!r}", line=lineno)
    if fmt is None:
        raise ParseError("no format line in header", line=lineno)
    if not elements or elements[0][0] != "vertex":
        raise UnsupportedFormat("first element must be 'vertex'")
    return fmt, elements[0], lineno


def read_ply_data(path) -> PlyData:
    with open(path, "rb") as f:
        fmt, (_, count, props), header_lines = _parse_header(f)
        if fmt == "ascii":
            arrays = {name: np.empty(count, dtype=t) for name, t in props}
            for row in range(count):
                raw = f.readline()
                lineno = header_lines + row + 1
                words = raw.split()
                if len(words) < len(props):
                    raise ParseError(f"expected {len(props)} values, got {len(words)}", line=lineno)
                for (name, t), w in zip(props, words):
                    try:
                        arrays[name][row] = float(w) if t[0] == "f" else int(w)
                    except (ValueError, OverflowError):
                        raise ParseError(f"bad value {w.decode(errors='replace')!r} for {name}",
                                         line=lineno) from None
        else:
            order = _FORMATS[fmt]
            dtype = np.dtype([(name, order + t) for name, t in props])
            buf = f.read(dtype.itemsize * count)
            if len(buf) < dtype.itemsize * count:
                raise ParseError(f"binary body truncated: expected {count} vertices")
            rec = np.frombuffer(buf, dtype=dtype, count=count)
            arrays = {name: rec[name].astype(rec[name].dtype.newbyteorder("=")) for name, _ in props}
    return PlyData(arrays, fmt)


def read_ply(path) -> PointCloud:
    data = read_ply_data(path)
    p = data.properties
    missing = [c for c in "xyz" if c not in p]
    if missing:
        raise ParseError(f"vertex element lacks {missing}")
    pos = np.c_[p["x"], p["y"], p["z"]].astype(np.float64)
    colors = None
    if all(c in p for c in ("red", "green", "blue")):
        colors = np.c_[p["red"], p["green"], p["blue"]].astype(np.uint8)
    origin = p["index"].astype(np.int64) if "index" in p else None
    return PointCloud(pos, colors, origin)


def read_labels(path) -> np.ndarray:
    data = read_ply_data(path)
    if "label" not in data.properties:
        raise ParseError("vertex element has no 'label' property")
    return data.properties["label"].astype(np.int64)


def write_ply(path, cloud: PointCloud, binary: bool = True, labels: Optional[np.ndarray] = None,
              with_index: bool = False, colors: Optional[np.ndarray] = None):
    """Write xyz (double) plus optional rgb, int32 ``label`` and int32 ``index`` properties."""
    n = len(cloud)
    cols = [("x", "f8", cloud.positions[:, 0]), ("y", "f8", cloud.positions[:, 1]),
            ("z", "f8", cloud.positions[:, 2])]
    rgb = colors if colors is not None else cloud.colors
    if rgb is not None:
        rgb = np.asarray(rgb, dtype=np.uint8)
        cols += [("red", "u1", rgb[:, 0]), ("green", "u1", rgb[:, 1]), ("blue", "u1", rgb[:, 2])]
    if labels is not None:
        cols.append(("label", "i4", np.asarray(labels, dtype=np.int32)))
    if with_index:
        cols.append(("index", "i4", cloud.origin.astype(np.int32)))
    names = {"f8": "double", "u1": "uchar", "i4": "int"}
    fmt = "binary_little_endian" if binary else "ascii"
    header = ["ply", f"format {fmt} 1.0", f"element vertex {n}"]
    header += [f"property {names[t]} {name}" for name, t, _ in cols]
    header.append("end_header")
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            rec = np.empty(n, dtype=[(name, "<" + t) for name, t, _ in cols])
            for name, _, arr in cols:
                rec[name] = arr
            f.write(rec.tobytes())
        else:
            lines = []
            for i in range(n):
                lines.append(" ".join(repr(float(arr[i])) if t == "f8" else str(int(arr[i]))
                                      for _, t, arr in cols))
            f.write(("\n".join(lines) + ("\n" if lines else "")).encode("ascii"))


def label_colors(labels: np.ndarray) -> np.ndarray:
    """Deterministic per-label colors: hues stepped by the golden ratio, gray for unlabeled."""
    labels = np.asarray(labels, dtype=np.int64)
    out = np.full((len(labels), 3), 128, dtype=np.uint8)
    for lab in np.unique(labels):
        if lab == UNLABELED:
            continue
        hue = (int(lab) * 0.618033988749895) % 1.0
        rgb = colorsys.hsv_to_rgb(hue, 0.65, 0.95)
        out[labels == lab] = np.round(np.array(rgb) * 255).astype(np.uint8)
    return out


def write_labeled_ply(path, cloud: PointCloud, labels: np.ndarray, binary: bool = True):
    write_ply(path, cloud, binary=binary, labels=labels, colors=label_colors(labels))


# -- layer stacks ------------------------------------------------------------------

def write_layer_stack(directory, stack: LayerStack, n_points: int, params: Optional[dict] = None) -> Path:
    """Core and per-round boundary PLYs (with an ``index`` property) plus a JSON manifest."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_ply(d / "core.ply", stack.core, with_index=True)
    names = []
    for i, layer in enumerate(stack.layers, start=1):
        name = f"layer_{i:02d}.ply"
        write_ply(d / name, layer, with_index=True)
        names.append(name)
    manifest = {"n_points": n_points, "core": "core.ply", "layers": names,
                "counts": {"core": len(stack.core), "layers": [len(l) for l in stack.layers]},
                "params": params or {}}
    path = d / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def read_layer_stack(manifest_path):
    """Returns (stack, n_points, params) from a manifest written by :func:`write_layer_stack`."""
    path = Path(manifest_path)
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"manifest is not valid JSON: {exc.msg}", line=exc.lineno) from None
    for key in ("n_points", "core", "layers"):
        if key not in manifest:
            raise ParseError(f"manifest lacks {key!r}")
    base = path.parent
    core = read_ply(base / manifest["core"])
    layers = [read_ply(base / name) for name in manifest["layers"]]
    return LayerStack(core, layers), int(manifest["n_points"]), manifest.get("params", {})


def write_mesh_ply(path, vertices: np.ndarray, triangles: np.ndarray):
    """ASCII PLY with a vertex element and a face element of vertex-index lists."""
    vertices = np.asarray(vertices, dtype=float)
    triangles = np.asarray(triangles, dtype=np.int64)
    lines = ["ply", "format ascii 1.0", f"element vertex {len(vertices)}",
             "property double x", "property double y", "property double z",
             f"element face {len(triangles)}", "property list uchar int vertex_indices", "end_header"]
    lines += [f"{x!r} {y!r} {z!r}" for x, y, z in vertices.tolist()]
    lines += [f"3 {a} {b} {c}" for a, b, c in triangles.tolist()]
    Path(path).write_text("\n".join(lines) + "\n")


# -- plain-text xyz / xyzrgb ----------------------------------------------------------

def read_xyz(path) -> PointCloud:
    """Whitespace-separated rows of ``x y z`` or ``x y z r g b`` (colors 0-255)."""
    rows, colors, width = [], [], None
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            words = line.split()
            if not words or words[0].startswith("#"):
                continue
            if width is None:
                width = len(words)
                if width not in (3, 6):
                    raise ParseError(f"expected 3 or 6 columns, got {width}", line=lineno)
            elif len(words) != width:
                raise ParseError(f"expected {width} columns, got {len(words)}", line=lineno)
            try:
                rows.append([float(w) for w in words[:3]])
                if width == 6:
                    rgb = [int(w) for w in words[3:]]
                    if min(rgb) < 0 or max(rgb) > 255:
                        raise ValueError
                    colors.append(rgb)
            except ValueError:
                raise ParseError(f"bad value in {line.strip()!r}", line=lineno) from None
    pos = np.array(rows, dtype=np.float64).reshape(-1, 3)
    return PointCloud(pos, np.array(colors, dtype=np.uint8) if width == 6 else None)


def write_xyz(path, cloud: PointCloud):
    lines = []
    for i, (x, y, z) in enumerate(cloud.positions.tolist()):
        row = f"{x!r} {y!r} {z!r}"
        if cloud.colors is not None:
            r, g, b = cloud.colors[i].tolist()
            row += f" {r} {g} {b}"
        lines.append(row)
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


FORMATS = ("ply-ascii", "ply-binary-LE", "xyz", "xyzrgb", "labeled-ply")


def read_cloud(path):
    """Load a cloud by file extension; returns ``(cloud, labels or None)``."""
    path = Path(path)
    ext = path.suffix.lower()
    if ext == ".ply":
        data = read_ply_data(path)
        labels = data.properties["label"].astype(np.int64) if "label" in data.properties else None
        return read_ply(path), labels
    if ext in (".xyz", ".txt", ".xyzrgb"):
        return read_xyz(path), None
    raise UnsupportedFormat(f"unknown point cloud extension {ext!r}")


def write_cloud(path, cloud: PointCloud, labels: Optional[np.ndarray] = None, fmt: Optional[str] = None):
    """Write in one of ``FORMATS``; the default follows the extension (binary PLY for .ply)."""
    if fmt is None:
        ext = Path(path).suffix.lower()
        if ext == ".ply":
            fmt = "labeled-ply" if labels is not None else "ply-binary-LE"
        elif ext in (".xyz", ".txt", ".xyzrgb"):
            fmt = "xyzrgb" if cloud.colors is not None else "xyz"
        else:
            raise UnsupportedFormat(f"unknown point cloud extension {ext!r}")
    if fmt == "labeled-ply":
        if labels is None:
            raise ValueError("labeled-ply output needs labels")
        write_labeled_ply(path, cloud, labels)
    elif fmt in ("ply-ascii", "ply-binary-LE"):
        write_ply(path, cloud, binary=fmt == "ply-binary-LE", labels=labels)
    elif fmt == "xyz":
        write_xyz(path, PointCloud(cloud.positions))
    elif fmt == "xyzrgb":
        if cloud.colors is None:
            raise ValueError("xyzrgb output needs colors")
        write_xyz(path, cloud)
    else:
        raise UnsupportedFormat(f"unknown output format {fmt!r}")


def write_json(path, obj):
    text = json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n"
    if str(path) == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, os.PathLike):
        return str(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")
