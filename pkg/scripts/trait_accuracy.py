"""Trait estimates against analytic truths on the synthetic trait leaves.

    python scripts/trait_accuracy.py [--spacing 0.001] [--noise 0.2]
"""
import argparse

import numpy as np

from leafsep.cloud import PointCloud
from leafsep.synth import analytic_traits, sample_leaf, trait_leaves
from leafsep.traits import estimate_traits


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--spacing", type=float, default=0.001)
    ap.add_argument("--noise", type=float, default=0.2, help="normal noise as a fraction of spacing")
    ap.add_argument("--voxel-size", type=float, default=None)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    print(f"{'shape':<7} {'area':>8} {'truth':>8} {'err%':>6} {'length':>7} {'truth':>6} {'err%':>6} "
          f"{'width':>6} {'truth':>6} {'err%':>6}")
    errs = []
    for i, leaf in enumerate(trait_leaves(args.spacing, args.noise)):
        pos, _, _ = sample_leaf(leaf, np.random.default_rng([args.seed, i]))
        t = estimate_traits(PointCloud(pos), voxel_size=args.voxel_size)
        tr = analytic_traits(leaf)
        e = [abs(t.area / tr.area - 1), abs(t.length / tr.length - 1), abs(t.width / tr.width - 1)]
        errs.append(e)
        print(f"{leaf.shape:<7} {t.area:>8.3f} {tr.area:>8.3f} {100 * e[0]:>6.2f} {t.length:>7.3f} "
              f"{tr.length:>6.2f} {100 * e[1]:>6.2f} {t.width:>6.3f} {tr.width:>6.2f} {100 * e[2]:>6.2f}")
    a, l, w = 100 * np.mean(errs, axis=0)
    print(f"mean absolute relative error: area {a:.3f}%  length {l:.2f}%  width {w:.2f}%")


if __name__ == "__main__":
    main()
