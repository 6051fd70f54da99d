"""Per-stage wall time of the segmentation pipeline on the dense synthetic canopy.

    python scripts/benchmark.py [--repeats 3]
"""
import argparse
import time

from leafsep.config import PipelineConfig
from leafsep.segmentation import segment_leaves
from leafsep.synth import dense_canopy, generate_scene


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=3)
    ap.add_argument("--rounds", type=int, default=3)
    args = ap.parse_args()

    scene = generate_scene(dense_canopy())
    joint, seg, info = PipelineConfig().resolve(scene.cloud)
    print(f"{len(scene.cloud)} points, spacing {info['spacing'] * 1000:.3f} mm, r={joint.r:.4f} "
          f"n_threshold={joint.n_threshold} d_l={seg.d_l:.4f}")
    for rep in range(args.repeats):
        t0 = time.perf_counter()
        res = segment_leaves(scene.cloud, joint, args.rounds, seg)
        total = time.perf_counter() - t0
        stages = "  ".join(f"{k} {v:.2f}s" for k, v in res.timings.items())
        print(f"run {rep + 1}: {total:.2f}s  ({stages})  leaves {res.leaf_count}")


if __name__ == "__main__":
    main()
