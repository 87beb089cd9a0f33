#!/usr/bin/env python3
"""Train the report-fixture model and emit the image-vs-style-text similarity CSV."""

import argparse
from pathlib import Path

from spdg import datagen
from spdg.evaluate import style_similarity_report, write_similarity_csv
from spdg.trainer import RunConfig, train_style_prompter


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--dataset", default="data/fixture")
    ap.add_argument("--seed", type=int, default=2)
    ap.add_argument("--held-out", default="sketch")
    ap.add_argument("--out-dir", default="results/report_fixture")
    args = ap.parse_args()

    ds = datagen.load(args.dataset)
    cfg = RunConfig(seed=args.seed, held_out_domain=args.held_out, out_dir=args.out_dir)
    result = train_style_prompter(cfg, dataset=ds)
    print("val accuracies:", [round(v, 3) for v in result.val_accuracies])

    held = ds.domains.index(args.held_out)
    idx = ds.domain_indices(held)
    matrix = style_similarity_report(
        result.bundle, result.prompter, ds.x[idx], ds.class_ids[idx],
        [ds.domains[d] for d in ds.domain_ids[idx]], ds.classes,
        image_ids=[int(i) for i in idx])
    csv_path = Path(args.out_dir) / "similarity_report.csv"
    write_similarity_csv(matrix, csv_path)
    means = matrix.column_means()
    print(f"column means over held-out '{args.held_out}' images:")
    for col in matrix.columns:
        marker = "  <-- matched domain" if col == args.held_out else ""
        print(f"  {col:14s} {means[col]:+.4f}{marker}")
    print(f"csv at {csv_path}")


if __name__ == "__main__":
    main()
