"""Monte Carlo tables for the simulation designs over a grid of sample sizes.

For each (design, n) pair runs ``harness.run_study`` and prints mean bias,
standard deviation, mean CI length and coverage of the one-sided lower
confidence bound against the stored large-n truth. Designs without a stored
truth (``linear``) need ``--truth``.

    python3 scripts/replicate_simulations.py --designs uniform-mean logit \\
        --n 1000 4000 16000 --reps 200 --threads 4 --out tables.json
"""

import argparse
import csv
import json
import sys
import time

from breakdown.harness import TRUTH, StudyConfig, run_study


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--designs", nargs="+", default=["uniform-mean", "logit"])
    ap.add_argument("--n", nargs="+", type=int, default=[1000, 4000, 16000])
    ap.add_argument("--reps", type=int, default=200)
    ap.add_argument("--alpha", type=float, default=0.05)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--truth", type=float, help="override the stored truth (applies to every design)")
    ap.add_argument("--n-audit", type=int, default=50)
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--out", help="write all summaries as JSON")
    ap.add_argument("--rows", help="write per-replication rows as CSV")
    args = ap.parse_args(argv)

    summaries, all_rows = [], []
    header = f"{'design':<14}{'n':>8}{'bias':>10}{'sd':>10}{'ci_len':>10}{'cover':>8}{'fail':>6}{'sec':>8}"
    print(header)
    print("-" * len(header))
    for design in args.designs:
        if args.truth is None and TRUTH.get(design) is None:
            print(f"{design}: no stored truth, pass --truth", file=sys.stderr)
            continue
        for n in args.n:
            cfg = StudyConfig(design, n, replications=args.reps, alpha=args.alpha, seed=args.seed,
                              truth=args.truth, n_audit=args.n_audit, threads=args.threads)
            rows = []
            t0 = time.perf_counter()
            s = run_study(cfg, rows_out=rows)
            sec = time.perf_counter() - t0
            summaries.append(s.to_dict())
            all_rows.extend({"design": design, "n": n, **r} for r in rows)

            def num(v, spec):
                return "-" if v is None else format(v, spec)

            print(f"{design:<14}{n:>8}{num(s.mean_bias, '.4f'):>10}{num(s.sd, '.4f'):>10}"
                  f"{num(s.mean_ci_length, '.4f'):>10}{num(s.coverage, '.3f'):>8}{s.failed:>6}{sec:>8.1f}")
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(summaries, fh, indent=2)
    if args.rows and all_rows:
        with open(args.rows, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(all_rows[0]))
            w.writeheader()
            w.writerows(all_rows)
    return 0


if __name__ == "__main__":
    sys.exit(main())
