"""Command-line front end: ``leafsep <command> [options]``.

Every command writes a JSON run report holding the effective parameters,
per-stage point counts and wall time. Exit codes: 0 success, 1 usage or
configuration error, 2 I/O error, 3 computation error.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .cloud import PointCloud
from .config import PipelineConfig
from .errors import ConfigError, LeafSepError, ParseError, UnsupportedFormat
from .io import (read_cloud, read_labels, read_layer_stack, write_cloud, write_json, write_labeled_ply,
                 write_layer_stack, write_mesh_ply)
from .joint_filter import multi_round_filter
from .metrics import format_csv, format_text, leaf_level, match_regions, point_level
from .preprocess import run_chain
from .segmentation import segment_stack
from .synth import SceneSpec, generate_scene, named_scene
from .traits import estimate_traits

log = logging.getLogger("leafsep")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_COMPUTE = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- helpers ----------------------------------------------------------------------------

def _load_config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    cfg.override(None, input=getattr(args, "input", None), output=getattr(args, "output", None),
                 seed=getattr(args, "seed", None))
    return cfg


def _report_path(args, default_from):
    if args.report:
        return args.report
    if default_from is None:
        return None
    p = Path(default_from)
    return str(p.with_name(p.stem + ".report.json")) if p.suffix else str(p / "report.json")


def _need(value, what):
    if value is None:
        raise UsageError(f"missing {what}")
    return value


def _emit(args, cfg, command, started, out_hint, **payload):
    report = {"command": command, "version": __version__, "config": cfg.to_dict(),
              "wall_time_s": time.perf_counter() - started, **payload}
    path = _report_path(args, out_hint)
    if path:
        write_json(path, report)
    return report


# -- commands -------------------------------------------------------------------------------

def cmd_preprocess(args):
    t0 = time.perf_counter()
    cfg = _load_config(args)
    cfg.override("preprocess", preset=args.preset)
    if args.preset:
        cfg.preprocess.chain = []
    cfg.validate()
    cloud, _ = read_cloud(_need(cfg.input, "--input"))
    out, stages = run_chain(cloud, cfg.preprocess.filters())
    write_cloud(_need(cfg.output, "--output"), out.reindexed())
    _emit(args, cfg, "preprocess", t0, cfg.output,
          filters=[f.to_dict() for f in cfg.preprocess.filters()],
          stages=[vars(s) for s in stages], n_in=len(cloud), n_out=len(out))


def _joint_overrides(cfg, args):
    cfg.override("joint", r=args.r, n_threshold=args.n_threshold, k=args.k,
                 theta_threshold=args.theta, n_iter=args.n_iter, rounds=args.rounds,
                 threshold_fraction=args.threshold_fraction)


def _seg_overrides(cfg, args):
    cfg.override("segmentation", d_l=args.d_l, d_adj=args.d_adj, normal_angle_max=args.normal_angle)


def cmd_filter(args):
    t0 = time.perf_counter()
    cfg = _load_config(args)
    _joint_overrides(cfg, args)
    cfg.validate()
    cloud, _ = read_cloud(_need(cfg.input, "--input"))
    cloud = cloud.reindexed()
    joint, seg, info = cfg.resolve(cloud)
    t1 = time.perf_counter()
    stack = multi_round_filter(cloud, joint, cfg.joint.rounds)
    t2 = time.perf_counter()
    params = {"joint": joint.to_dict(), "rounds": cfg.joint.rounds, "segmentation": seg.to_dict()}
    out_dir = _need(cfg.output, "--output")
    manifest = write_layer_stack(out_dir, stack, len(cloud), params)
    _emit(args, cfg, "filter", t0, out_dir, effective=params, suggested=info,
          manifest=str(manifest), n_points=len(cloud), core=len(stack.core),
          layers=[len(l) for l in stack.layers], timings={"filter": t2 - t1})


def cmd_segment(args):
    t0 = time.perf_counter()
    cfg = _load_config(args)
    _joint_overrides(cfg, args)
    _seg_overrides(cfg, args)
    cfg.validate()
    timings = {}
    if args.manifest:
        stack, n_points, saved = read_layer_stack(args.manifest)
        cloud = None
        stored = saved.get("segmentation") or {}
        s = cfg.segmentation
        if s.d_l is None:
            s.d_l = _need(stored.get("d_l"), "--d-l (the manifest has none)")
        if s.d_adj is None:
            s.d_adj = stored.get("d_adj")
        seg = cfg.seg_params()
        params = {k: v for k, v in saved.items() if k != "segmentation"}
        info = {}
    else:
        cloud, _ = read_cloud(_need(cfg.input, "--input or --manifest"))
        cloud = cloud.reindexed()
        n_points = len(cloud)
        joint, seg, info = cfg.resolve(cloud)
        t1 = time.perf_counter()
        stack = multi_round_filter(cloud, joint, cfg.joint.rounds)
        timings["filter"] = time.perf_counter() - t1
        params = {"joint": joint.to_dict(), "rounds": cfg.joint.rounds}
    params["segmentation"] = seg.to_dict()
    result = segment_stack(stack, seg, n_points)
    timings.update(result.timings)
    if cloud is None:
        cloud = _stack_cloud(stack, n_points)
    out = _need(cfg.output, "--output")
    write_labeled_ply(out, cloud, result.labels)
    _emit(args, cfg, "segment", t0, out, effective=params, suggested=info, n_points=n_points,
          core=len(stack.core), layers=[len(l) for l in stack.layers],
          centers=int(result.center_labels.max()) + 1 if len(result.center_labels) else 0,
          leaves=result.leaf_count, timings=timings)


def _stack_cloud(stack, n_points):
    """Reassemble the original cloud order from a persisted layer stack."""
    pos = np.zeros((n_points, 3))
    seen = np.zeros(n_points, dtype=bool)
    for part in [stack.core, *stack.layers]:
        if len(part):
            pos[part.origin] = part.positions
            seen[part.origin] = True
    if not seen.all():
        raise ParseError("layer stack does not cover every point index")
    return PointCloud(pos)


def cmd_evaluate(args):
    t0 = time.perf_counter()
    cfg = _load_config(args)
    cfg.override(None, gt=args.gt)
    cfg.override("metrics", tp_threshold=args.tp_threshold)
    cfg.validate()
    seg = read_labels(_need(cfg.input, "--input"))
    gt = read_labels(_need(cfg.gt, "--gt"))
    matching = match_regions(seg, gt)
    rows = point_level(seg, gt, matching)
    leaves = leaf_level(seg, gt, matching, cfg.metrics.tp_threshold)
    text = format_text(rows, leaves)
    out = cfg.output
    if out:
        base = Path(out)
        base.parent.mkdir(parents=True, exist_ok=True)
        Path(str(base) + ".csv").write_text(format_csv(rows))
        Path(str(base) + ".txt").write_text(text)
    else:
        sys.stdout.write(text)
    if out and not args.report:
        args.report = out + ".json"
    _emit(args, cfg, "evaluate", t0, None,
          leaf_level=leaves.to_dict(), mean_cover=float(np.mean([r.cover_rate for r in rows])) if rows else 0.0,
          per_leaf=[{**vars(r), "cover_rate": r.cover_rate} for r in rows])


def cmd_traits(args):
    t0 = time.perf_counter()
    cfg = _load_config(args)
    cfg.override("traits", voxel_size=args.voxel_size, smooth_iters=args.smooth_iters,
                 search_radius=args.search_radius)
    cfg.validate()
    path = _need(cfg.input, "--input")
    cloud, labels = read_cloud(path)
    if labels is None:
        raise ParseError(f"{path} carries no 'label' property")
    t = cfg.traits
    rows, skipped = [], []
    if args.mesh_dir:
        Path(args.mesh_dir).mkdir(parents=True, exist_ok=True)
    for lab in np.unique(labels[labels >= 0]):
        leaf = cloud.subset(labels == lab)
        if len(leaf) < t.min_points:
            skipped.append({"label": int(lab), "reason": f"only {len(leaf)} points"})
            continue
        try:
            tr, mesh = estimate_traits(leaf, t.voxel_size, t.smooth_iters, t.search_radius,
                                       t.max_surface_angle, return_mesh=True)
        except LeafSepError as exc:
            skipped.append({"label": int(lab), "reason": str(exc)})
            continue
        rows.append({"label": int(lab), "area_cm2": tr.area, "length_cm": tr.length, "width_cm": tr.width})
        if args.mesh_dir:
            write_mesh_ply(Path(args.mesh_dir) / f"leaf_{int(lab):03d}.ply", mesh.vertices, mesh.triangles)
    out = _need(cfg.output, "--output")
    with open(out, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["label", "area_cm2", "length_cm", "width_cm"])
        for r in rows:
            w.writerow([r["label"], f"{r['area_cm2']:.6f}", f"{r['length_cm']:.6f}", f"{r['width_cm']:.6f}"])
    _emit(args, cfg, "traits", t0, out, leaves=rows, skipped=skipped)


def cmd_synth(args):
    t0 = time.perf_counter()
    cfg = _load_config(args)
    cfg.override("synth", scene=args.scene, spacing=args.spacing)
    cfg.validate()
    s = cfg.synth
    if s.spec is not None and not args.scene:
        spec = SceneSpec.from_dict({**s.spec, "seed": s.spec.get("seed", cfg.seed)})
    else:
        kw = {"seed": cfg.seed}
        if s.spacing is not None:
            kw["spacing"] = s.spacing
        try:
            spec = named_scene(_need(s.scene, "--scene"), **kw)
        except TypeError:
            raise ConfigError(f"scene {s.scene!r} does not take a spacing") from None
    scene = generate_scene(spec)
    out = _need(cfg.output, "--output")
    write_labeled_ply(out, scene.cloud, scene.labels)
    _emit(args, cfg, "synth", t0, out, scene=spec.to_dict(), n_points=len(scene.cloud),
          leaves=[{"label": i, "points": int((scene.labels == i).sum()), **vars(t)}
                  for i, t in enumerate(scene.traits)],
          contact_points=int(scene.contact.sum()))


def cmd_suggest(args):
    t0 = time.perf_counter()
    cfg = _load_config(args)
    _joint_overrides(cfg, args)
    cfg.validate()
    cloud, _ = read_cloud(_need(cfg.input, "--input"))
    joint, seg, info = cfg.resolve(cloud)
    payload = {"joint": joint.to_dict(), "rounds": cfg.joint.rounds, "segmentation": seg.to_dict(), **info}
    report = _emit(args, cfg, "suggest-params", t0, None, effective=payload)
    if not args.report:
        write_json("-", report)


# -- parser ----------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="leafsep", description="Leaf segmentation and trait estimation for plant point clouds.")
    p.add_argument("--version", action="version", version=f"leafsep {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, output_help="output path"):
        sp.add_argument("--config", help="YAML config file; flags override its values")
        sp.add_argument("--input", "-i")
        sp.add_argument("--output", "-o", help=output_help)
        sp.add_argument("--report", help="run report path (JSON)")
        sp.add_argument("--seed", type=int)

    def joint(sp):
        sp.add_argument("--r", type=float, help="RBOF radius (m)")
        sp.add_argument("--n-threshold", type=int)
        sp.add_argument("--k", type=int, help="SBF neighbor count")
        sp.add_argument("--theta", type=float, help="SBF angle threshold (deg)")
        sp.add_argument("--n-iter", type=int, help="SBF iterations per round")
        sp.add_argument("--rounds", type=int)
        sp.add_argument("--threshold-fraction", type=float)

    sp = sub.add_parser("preprocess", help="run a filter chain")
    common(sp)
    sp.add_argument("--preset", help="named filter chain")
    sp.set_defaults(func=cmd_preprocess)

    sp = sub.add_parser("filter", help="multi-round joint filter; writes a layer-stack directory")
    common(sp, "output directory")
    joint(sp)
    sp.set_defaults(func=cmd_filter)

    sp = sub.add_parser("segment", help="full leaf segmentation")
    common(sp, "labeled PLY")
    joint(sp)
    sp.add_argument("--manifest", help="resume from a layer-stack manifest")
    sp.add_argument("--d-l", type=float)
    sp.add_argument("--d-adj", type=float)
    sp.add_argument("--normal-angle", type=float)
    sp.set_defaults(func=cmd_segment)

    sp = sub.add_parser("evaluate", help="compare a segmentation with ground truth")
    common(sp, "output prefix for .csv/.txt tables")
    sp.add_argument("--gt")
    sp.add_argument("--tp-threshold", type=float)
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("traits", help="per-leaf area, length and width")
    common(sp, "CSV path")
    sp.add_argument("--voxel-size", type=float)
    sp.add_argument("--smooth-iters", type=int)
    sp.add_argument("--search-radius", type=float)
    sp.add_argument("--mesh-dir")
    sp.set_defaults(func=cmd_traits)

    sp = sub.add_parser("synth", help="generate a labeled synthetic scene")
    common(sp, "labeled PLY")
    sp.add_argument("--scene")
    sp.add_argument("--spacing", type=float)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("suggest-params", help="parameter heuristics from average spacing")
    common(sp)
    joint(sp)
    sp.set_defaults(func=cmd_suggest)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, ParseError, UnsupportedFormat) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (LeafSepError, ValueError, np.linalg.LinAlgError) as exc:
        print(f"computation error: {exc}", file=sys.stderr)
        return EXIT_COMPUTE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
