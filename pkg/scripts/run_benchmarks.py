#!/usr/bin/env python3
"""Run the pinned desk-scale benchmark matrix and print the two ablation
tables (weighting modes on the imbalanced set, label rules on the crowded
set) plus the easy-set sanity number.

Expect roughly ten minutes on one core.  Results are deterministic.
"""

import argparse
import sys
import time

sys.path.insert(0, "src")

from ponodet import benchmarks as B


def main() -> int:
    ap = argparse.ArgumentParser()
    ap.add_argument("--skip-easy", action="store_true")
    args = ap.parse_args()

    t0 = time.time()
    print("== weighting modes (imbalanced benchmark) ==")
    bench = B.imbalanced_benchmark()
    for mode in ("learned", "retina_norm", "unit"):
        res = B.run_cell(bench, mode=mode)
        aps = " ".join(f"ap{c}={v:.3f}" for c, v in sorted(res["per_class_ap"].items()))
        print(f"  {mode:<12} mAP {res['map']:.4f}  {aps}")

    print("== label rules (crowded benchmark) ==")
    bench = B.crowded_benchmark()
    for rule in ("AMS", "PONO", "AO"):
        res = B.run_cell(bench, label_rule=rule)
        aps = " ".join(f"ap{c}={v:.3f}" for c, v in sorted(res["per_class_ap"].items()))
        print(f"  {rule:<5} mAP {res['map']:.4f}  {aps}")

    if not args.skip_easy:
        print("== easy-set sanity ==")
        res = B.run_cell(B.easy_benchmark())
        print(f"  mAP {res['map']:.4f}")

    print(f"total {time.time() - t0:.0f}s")
    return 0


if __name__ == "__main__":
    sys.exit(main())
