"""Recall / error / modeled-cost sweeps on the planted workload.

Writes one results.tsv plus per-metric series files for each sweep:

    python3 scripts/recall_sweep.py --out runs/ --seeds 0,1,2 --jobs 4
"""

import argparse
import logging
from pathlib import Path

from csattn import harness
from csattn.sim import synthetic_workload

SWEEPS = {
    "alpha": {"alpha": [0.025, 0.05, 0.1, 0.2, 0.4]},
    "rho": {"rho": [0.02, 0.05, 0.1, 0.2, 0.5, 1.0]},
    "centroids": {"centroids": [16, 32, 64, 128]},
    "m": {"m": [2, 4, 8, 16]},
    "tau": {"tau": [1, 2, 3], "alpha": 0.1, "backoff_threshold": 1.1},
    "schedules": {"cells": [
        {"rho": 0.05, "period": 1},
        {"rho": 0.15, "period": 1},
        {"rho": 0.15, "period": 4},
        {"rho": 0.20, "period": 8},
    ]},
}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("runs"))
    ap.add_argument("--prefill-len", type=int, default=8192)
    ap.add_argument("--d", type=int, default=64)
    ap.add_argument("--clusters", type=int, default=256)
    ap.add_argument("--steps", type=int, default=128)
    ap.add_argument("--seeds", default="0")
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--only", choices=sorted(SWEEPS), action="append")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    seeds = [int(s) for s in args.seeds.split(",")]
    w = synthetic_workload(args.prefill_len, args.d, args.clusters, decode_len=args.steps, seed=seeds[0])
    for name in args.only or SWEEPS:
        cells = harness.expand_grid(SWEEPS[name], {"steps": args.steps})
        results = harness.sweep(cells, w, seeds, jobs=args.jobs)
        out = args.out / name
        out.mkdir(parents=True, exist_ok=True)
        harness.write_results(out / "results.tsv", results)
        harness.write_series(out, results, x_param=None if name != "schedules" else "period")
        print(f"== {name}")
        for r in results:
            print(f"  {r.config_id:40s} recall {r.mean_recall:.4f}  err {r.mean_output_error:.4f}  "
                  f"cost p50/p99 {r.p50_cost:.2f}/{r.p99_cost:.2f}  bytes {r.index_bytes}")


if __name__ == "__main__":
    main()
