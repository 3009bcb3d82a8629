"""Curve-fitting benchmark: GD, GN, LM and gradLM on the three curve families.

Prints mean function-space error per family and budget, the gradLM/LM
ratio, and writes the full grid as CSV.
"""

import argparse
import time

from diffslam.curvefit import FAMILIES, SOLVERS, SuiteConfig, curve_suite, write_csv


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n-instances", type=int, default=100)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="bench_gradlm.csv")
    args = ap.parse_args()

    cfg = SuiteConfig(n_instances=args.n_instances, seed=args.seed)
    rows = []
    t0 = time.time()
    for fam in FAMILIES:
        rows += curve_suite(fam, cfg)
    write_csv(rows, args.out)

    table = {(r["family"], r["solver"], r["max_iters"]): r["mse_f"] for r in rows}
    print(f"{'family':12s} {'iters':>5s} " + " ".join(f"{s:>9s}" for s in SOLVERS) + "  gradLM/LM")
    for fam in FAMILIES:
        for b in cfg.budgets:
            vals = [table[fam, s, b] for s in SOLVERS]
            ratio = table[fam, "gradLM", b] / table[fam, "LM", b]
            print(f"{fam:12s} {b:5d} " + " ".join(f"{v:9.4f}" for v in vals) + f"  {ratio:9.2f}")
    print(f"{len(rows)} rows -> {args.out} ({time.time() - t0:.0f}s)")


if __name__ == "__main__":
    main()
