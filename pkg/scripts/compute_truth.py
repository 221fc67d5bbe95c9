"""Large-sample reference values for the three simulation designs.

Draws one n = 10^6 sample per design with ``harness.TRUTH_SEED`` and prints
the MCAR estimate, the X-marginal Hellinger bound and delta_hat as JSON.
The delta_hat values are the ones frozen into ``harness.TRUTH``.

    python3 scripts/compute_truth.py [--n 1000000] [--designs linear logit]
"""

import argparse
import json
import math
import sys
import time

from breakdown.data import hellinger_lower_bound, mcar_estimate
from breakdown.harness import DESIGNS, TRUTH_SEED, draw, estimate_design, get_design, logit_index_mcar
from breakdown.inference import EstimateOptions


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=1_000_000)
    ap.add_argument("--seed", type=int, default=TRUTH_SEED)
    ap.add_argument("--designs", nargs="+", default=sorted(DESIGNS))
    ap.add_argument("--n-audit", type=int, default=50)
    args = ap.parse_args(argv)
    out = {}
    for name in args.designs:
        t0 = time.perf_counter()
        sample = draw(name, args.n, args.seed)
        b_mcar = mcar_estimate(sample, get_design(name).model())
        res = estimate_design(sample, name, opts=EstimateOptions(n_audit=args.n_audit))
        row = {
            "n": args.n,
            "seed": args.seed,
            "p_hat": sample.p_hat,
            "b_mcar": b_mcar.tolist(),
            "hellinger_x": hellinger_lower_bound(sample),
            "delta_hat": res.delta_hat if math.isfinite(res.delta_hat) else None,
            "b_star": res.b_star.tolist(),
            "sigma_hat": res.sigma_hat,
            "warnings": res.diagnostics.get("warnings", []),
            "seconds": round(time.perf_counter() - t0, 1),
        }
        if name == "logit":
            row["logit_index_mcar"] = logit_index_mcar(b_mcar)
        out[name] = row
        print(json.dumps({name: row}), flush=True, file=sys.stderr)
    print(json.dumps(out, indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
