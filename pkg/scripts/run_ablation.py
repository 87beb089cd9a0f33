#!/usr/bin/env python3
"""Component ablation on the fixture dataset: baseline, +BSP, +GSP, +GSP+SR.

Roughly two minutes per seed on a laptop; results land in --out as JSON + CSV.
"""

import argparse

from spdg.evaluate import run_ablation, write_report_json


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--dataset", default="data/fixture")
    ap.add_argument("--seeds", default="0,1,2,3,4")
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--out", default="results/ablation.json")
    args = ap.parse_args()

    seeds = [int(s) for s in args.seeds.split(",")]
    table = run_ablation(args.dataset, seeds, threads=args.threads)
    write_report_json(table, args.out)
    print(f"{'row':10s} {'avg acc':>8s}")
    for row in table["rows"]:
        print(f"{row['row']:10s} {row['average_accuracy']:8.3f}")
    print(f"full table at {args.out}")


if __name__ == "__main__":
    main()
