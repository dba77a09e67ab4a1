"""Resolution study of the n = 3 Dirichlet gap.

Runs the Dirichlet(alpha, alpha, alpha) -> translate sweep at several grid caps
and prints the gap table, so the dependence of the gap on the chart grid can be
inspected next to its predicted limit (0 for a translation).

    python scripts/n3_study.py [--alpha 4] [--caps 30 36 45] [--h 0.04 0.02 0.01]
"""

import argparse
import logging
import time

from entropic_gap.dirichlet import SimplexDescriptor, cauchy_spread, theorem2_sweep


def descriptors(alpha: float, shift):
    base = {"kind": "dirichlet", "alpha": [alpha] * 3, "bounds": [[0.05, 0.9], [0.05, 0.9]], "min_coord": 0.05}
    return (SimplexDescriptor.from_dict(base),
            SimplexDescriptor.from_dict({"kind": "exp-affine", "shift": list(shift), "base": base}))


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--alpha", type=float, default=4.0)
    parser.add_argument("--caps", type=int, nargs="+", default=[30, 36, 45])
    parser.add_argument("--h", type=float, nargs="+", default=[0.04, 0.02, 0.01])
    parser.add_argument("--shift", type=float, nargs=3, default=[0.4, 0.35, 0.25])
    args = parser.parse_args()
    logging.basicConfig(level=logging.ERROR)
    d0, d1 = descriptors(args.alpha, args.shift)
    print("cap  " + "  ".join(f"h={h:<8g}" for h in args.h) + "  spread   seconds")
    for cap in args.caps:
        t0 = time.perf_counter()
        sw = theorem2_sweep(d0, d1, args.h, max_resolution=cap)
        gaps = [r.gap for r in sw.rows]
        errors = {r.error for r in sw.rows if r.error}
        if errors:
            print(f"{cap:<4d} failed: {'; '.join(sorted(errors))}")
            continue
        print(f"{cap:<4d} " + "  ".join(f"{g:<10.5f}" for g in gaps)
              + f"  {cauchy_spread(gaps, len(gaps)):.4f}   {time.perf_counter() - t0:.1f}")
    print(f"predicted limit {sw.predicted_limit:.2e}")


if __name__ == "__main__":
    main()
