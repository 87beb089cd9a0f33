"""Command-line surface.

Every subcommand exits 0 on success; failures print a machine-readable JSON
object {"error": code, "message": ...} on stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import datagen
from .encoders import load_bundle
from .errors import ConfigError, SpdgError
from .evaluate import (
    evaluate_cross_category,
    evaluate_leave_one_out,
    run_ablation,
    style_similarity_report,
    write_report_csv,
    write_report_json,
    write_similarity_csv,
)
from .gradcheck import run_objective_check, run_primitive_checks
from .inference import infer
from .prompter import load_checkpoint
from .trainer import RunConfig, train_style_prompter


def _common_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--out-dir", type=str, default=None)
    parser.add_argument("--precision", choices=["f64", "f32"], default="f64")
    parser.add_argument("--threads", type=int, default=1)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spdg", description="Style-prompted domain generalization harness")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic multi-domain dataset")
    _common_flags(p)
    p.add_argument("--n-per-cell", type=int, default=60)
    p.add_argument("--dx", type=int, default=32)
    p.add_argument("--style-strength", type=float, default=0.8)
    p.add_argument("--noise-std", type=float, default=0.15)
    p.add_argument("--classes", type=str, default=None, help="comma-separated class names")
    p.add_argument("--domains", type=str, default=None, help="comma-separated domain names")

    p = sub.add_parser("train", help="train a style prompter")
    _common_flags(p)
    p.add_argument("--config", type=str, default=None, help="RunConfig JSON path")
    p.add_argument("--dataset", type=str, default=None)
    p.add_argument("--held-out", type=str, default=None)
    p.add_argument("--prompter", choices=["basic", "gaussian"], default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--mc-samples", type=int, default=None)
    p.add_argument("--no-style-reg", action="store_true")
    p.add_argument("--select-best", action="store_true")

    p = sub.add_parser("eval-lodo", help="leave-one-domain-out evaluation matrix")
    _common_flags(p)
    p.add_argument("--matrix", type=str, default=None, help="JSON: dataset, methods, seeds, config")
    p.add_argument("--dataset", type=str, default=None)
    p.add_argument("--methods", type=str, default="baseline_C,gsp_sr")
    p.add_argument("--seeds", type=str, default="0")

    p = sub.add_parser("eval-crosscat", help="disjoint-category, disjoint-domain evaluation")
    _common_flags(p)
    p.add_argument("--train-config", type=str, required=True)
    p.add_argument("--test-data", type=str, required=True)

    p = sub.add_parser("infer", help="classify one sample from a dataset")
    _common_flags(p)
    p.add_argument("--checkpoint", type=str, required=True)
    p.add_argument("--bundle", type=str, required=True)
    p.add_argument("--dataset", type=str, required=True)
    p.add_argument("--index", type=int, required=True)

    p = sub.add_parser("similarity-report", help="image vs domain-style text similarities")
    _common_flags(p)
    p.add_argument("--checkpoint", type=str, required=True)
    p.add_argument("--bundle", type=str, required=True)
    p.add_argument("--dataset", type=str, required=True)
    p.add_argument("--domain", type=str, default=None, help="restrict to one domain's samples")

    p = sub.add_parser("grad-check", help="run the gradient verification suite")
    _common_flags(p)
    p.add_argument("--primitive-inputs", type=int, default=20)
    p.add_argument("--primitive-tol", type=float, default=1e-6)
    p.add_argument("--objective-tol", type=float, default=1e-4)

    p = sub.add_parser("ablation", help="emit the four-row component table")
    _common_flags(p)
    p.add_argument("--dataset", type=str, required=True)
    p.add_argument("--seeds", type=str, default="0")

    return parser


def _need_out_dir(args) -> Path:
    if not args.out_dir:
        raise ConfigError("--out-dir is required for this command")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _cmd_gen_data(args) -> int:
    out = _need_out_dir(args)
    classes = args.classes.split(",") if args.classes else None
    domains = args.domains.split(",") if args.domains else None
    ds = datagen.generate(
        n_per_cell=args.n_per_cell, d_x=args.dx, style_strength=args.style_strength,
        noise_std=args.noise_std, seed=args.seed if args.seed is not None else 0,
        classes=classes, domains=domains,
    )
    if args.precision == "f32":
        ds.x = ds.x.astype(np.float32)
    datagen.save(ds, out)
    print(json.dumps({"dataset": str(out), "samples": len(ds),
                      "classes": ds.classes, "domains": ds.domains}))
    return 0


def _load_run_config(args) -> RunConfig:
    if args.config:
        cfg = RunConfig.from_dict(json.loads(Path(args.config).read_text()))
    else:
        cfg = RunConfig()
    updates = {}
    if args.dataset is not None:
        updates["dataset"] = args.dataset
    if args.held_out is not None:
        updates["held_out_domain"] = args.held_out
    if args.prompter is not None:
        updates["prompter_kind"] = args.prompter
    if args.epochs is not None:
        updates["epochs"] = args.epochs
    if args.batch_size is not None:
        updates["batch_size"] = args.batch_size
    if args.mc_samples is not None:
        updates["mc_samples"] = args.mc_samples
    if args.no_style_reg:
        updates["use_style_reg"] = False
    if args.select_best:
        updates["select_best"] = True
    if args.seed is not None:
        updates["seed"] = args.seed
    if args.out_dir is not None:
        updates["out_dir"] = args.out_dir
    updates["precision"] = args.precision
    return replace(cfg, **updates)


def _cmd_train(args) -> int:
    cfg = _load_run_config(args)
    if not cfg.out_dir:
        raise ConfigError("--out-dir (or out_dir in the config) is required for train")
    result = train_style_prompter(cfg)
    print(json.dumps({
        "final_checkpoint": result.final_dir,
        "metrics": result.metrics_path,
        "val_accuracies": result.val_accuracies,
        "encoder_checksum": result.encoder_checksum,
        "config_hash": cfg.config_hash(),
    }))
    return 0


def _cmd_eval_lodo(args) -> int:
    out = _need_out_dir(args)
    if args.matrix:
        matrix = json.loads(Path(args.matrix).read_text())
        dataset = matrix["dataset"]
        methods = matrix.get("methods", ["baseline_C", "gsp_sr"])
        seeds = matrix.get("seeds", [0])
        base = RunConfig.from_dict(matrix.get("config", {}))
    else:
        if not args.dataset:
            raise ConfigError("eval-lodo needs --matrix or --dataset")
        dataset = args.dataset
        methods = [m.strip() for m in args.methods.split(",") if m.strip()]
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
        base = RunConfig()
    report = evaluate_leave_one_out(dataset, methods, seeds, base=base, threads=args.threads)
    write_report_json(report.to_dict(), out / "lodo_report.json")
    write_report_csv(report, out / "lodo_report.csv")
    print(json.dumps({"report": str(out / "lodo_report.json"),
                      "averages": {m: r.average for m, r in report.methods.items()},
                      "partial": report.partial}))
    return 0 if not report.partial else 4


def _cmd_eval_crosscat(args) -> int:
    out = _need_out_dir(args)
    cfg = RunConfig.from_dict(json.loads(Path(args.train_config).read_text()))
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    report = evaluate_cross_category(cfg, cfg.dataset, args.test_data)
    write_report_json(report.to_dict(), out / "crosscat_report.json")
    write_report_csv(report, out / "crosscat_report.csv")
    print(json.dumps({"report": str(out / "crosscat_report.json"),
                      "averages": {m: r.average for m, r in report.methods.items()}}))
    return 0


def _cmd_infer(args) -> int:
    prompter, _ = load_checkpoint(args.checkpoint)
    bundle = load_bundle(args.bundle)
    ds = datagen.load(args.dataset)
    if not (0 <= args.index < len(ds)):
        raise ConfigError(f"index {args.index} outside dataset of {len(ds)} samples")
    pred, scores = infer(bundle, prompter, ds.x[args.index], ds.classes)
    print(json.dumps({
        "index": args.index,
        "predicted_class": pred,
        "true_class": ds.classes[ds.class_ids[args.index]],
        "true_domain": ds.domains[ds.domain_ids[args.index]],
        "scores": {cls: float(s) for cls, s in zip(ds.classes, scores)},
    }))
    return 0


def _cmd_similarity_report(args) -> int:
    out = _need_out_dir(args)
    prompter, _ = load_checkpoint(args.checkpoint)
    bundle = load_bundle(args.bundle)
    ds = datagen.load(args.dataset)
    if args.domain is not None:
        if args.domain not in ds.domains:
            raise ConfigError(f"domain {args.domain!r} not in dataset domains {ds.domains}")
        idx = ds.domain_indices(ds.domains.index(args.domain))
    else:
        idx = np.arange(len(ds))
    matrix = style_similarity_report(
        bundle, prompter, ds.x[idx], ds.class_ids[idx],
        [ds.domains[d] for d in ds.domain_ids[idx]], ds.classes,
        image_ids=[int(i) for i in idx],
    )
    path = out / "similarity_report.csv"
    write_similarity_csv(matrix, path)
    print(json.dumps({"report": str(path), "rows": len(matrix.image_ids),
                      "column_means": matrix.column_means()}))
    return 0


def _cmd_grad_check(args) -> int:
    failures = []
    prim = run_primitive_checks(n_inputs=args.primitive_inputs, tol=args.primitive_tol)
    for name, err in sorted(prim.items()):
        status = "ok" if err < args.primitive_tol else "FAIL"
        if status == "FAIL":
            failures.append(name)
        print(f"primitive {name}: max_rel_err={err:.3e} [{status}]")
    obj, elapsed = run_objective_check(tol=args.objective_tol)
    for name, err in obj.items():
        status = "ok" if err < args.objective_tol else "FAIL"
        if status == "FAIL":
            failures.append(f"objective:{name}")
        print(f"objective d/d{name}: max_rel_err={err:.3e} [{status}]")
    print(f"objective check elapsed: {elapsed:.2f}s")
    if failures:
        raise SpdgError(f"gradient checks failed: {failures}")
    return 0


def _cmd_ablation(args) -> int:
    out = _need_out_dir(args)
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    table = run_ablation(args.dataset, seeds, threads=args.threads)
    write_report_json(table, out / "ablation.json")
    with open(out / "ablation.csv", "w") as fh:
        fh.write("row,method,average_accuracy,config_hash\n")
        for row in table["rows"]:
            fh.write(f"{row['row']},{row['method']},{row['average_accuracy']:.6f},{row['config_hash'] or ''}\n")
    print(json.dumps({"table": str(out / "ablation.json"),
                      "rows": {r["row"]: r["average_accuracy"] for r in table["rows"]}}))
    return 0 if not table["partial"] else 4


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "eval-lodo": _cmd_eval_lodo,
    "eval-crosscat": _cmd_eval_crosscat,
    "infer": _cmd_infer,
    "similarity-report": _cmd_similarity_report,
    "grad-check": _cmd_grad_check,
    "ablation": _cmd_ablation,
}


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except SpdgError as exc:
        sys.stderr.write(json.dumps({"error": exc.code, "message": str(exc)}) + "\n")
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        sys.stderr.write(json.dumps({"error": "internal", "message": f"{type(exc).__name__}: {exc}"}) + "\n")
        return 3


if __name__ == "__main__":
    raise SystemExit(main())
