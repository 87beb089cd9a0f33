"""Leave-one-domain-out evaluation, cross-category transfer, the component
ablation table, and the style-similarity report.

Reports are plain data: JSON summaries plus CSV tables. Accuracy aggregation
is a sum over samples, so parallel and serial fold execution agree exactly.
"""

from __future__ import annotations

import csv
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import datagen
from .encoders import (
    STYLE_WORDS,
    build_bundle,
    default_vocab,
    domain_style_text,
    encode_image,
    encode_text,
    project_image,
    tokenize,
)
from .errors import ConfigError
from .inference import accuracy, predict_batch, zero_shot_predict_batch
from .losses import prompt_text_features
from .prompter import style_for_prompt
from .tensor import Tensor
from .trainer import RunConfig, train_style_prompter

BASELINE_METHODS = ("baseline_C", "baseline_PC")
TRAINED_METHODS = {
    "bsp": {"prompter_kind": "basic", "use_style_reg": False},
    "gsp": {"prompter_kind": "gaussian", "use_style_reg": False},
    "gsp_sr": {"prompter_kind": "gaussian", "use_style_reg": True},
}
ABLATION_ROWS = [("baseline", "baseline_C"), ("+BSP", "bsp"), ("+GSP", "gsp"),
                 ("+GSP+SR", "gsp_sr")]


@dataclass
class MethodResult:
    name: str
    per_domain: dict[str, float]
    per_domain_std: dict[str, float]
    average: float
    runs: list[dict]
    config_hash: str | None = None


@dataclass
class EvalReport:
    domains: list[str]
    methods: dict[str, MethodResult]
    metadata: dict = field(default_factory=dict)
    partial: bool = False
    failures: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "domains": self.domains,
            "methods": {
                name: {
                    "per_domain": m.per_domain,
                    "per_domain_std": m.per_domain_std,
                    "average": m.average,
                    "runs": m.runs,
                    "config_hash": m.config_hash,
                }
                for name, m in self.methods.items()
            },
            "metadata": self.metadata,
            "partial": self.partial,
            "failures": self.failures,
        }


def method_config(base: RunConfig, method: str, seed: int,
                  held_out: str | None) -> RunConfig:
    if method not in TRAINED_METHODS:
        raise ConfigError(f"unknown trained method {method!r}")
    return replace(base, seed=seed, held_out_domain=held_out, out_dir=None,
                   **TRAINED_METHODS[method])


def _evaluate_fold(dataset, base: RunConfig, method: str, seed: int,
                   held_out: str) -> float:
    """Accuracy of one method on the entire held-out domain."""
    held_id = dataset.domains.index(held_out)
    test_idx = dataset.domain_indices(held_id)
    x_test = dataset.x[test_idx]
    y_test = dataset.class_ids[test_idx]
    if method in BASELINE_METHODS:
        vocab = default_vocab(list(dataset.classes) + list(base.extra_classes))
        bundle = build_bundle(base.dims, vocab, seed=seed, logit_scale=base.logit_scale)
        template = "C" if method == "baseline_C" else "PC"
        preds, _ = zero_shot_predict_batch(bundle, x_test, dataset.classes, template)
        return accuracy(preds, y_test)
    cfg = method_config(base, method, seed, held_out)
    result = train_style_prompter(cfg, dataset=dataset)
    preds, _ = predict_batch(result.bundle, result.prompter, x_test, dataset.classes)
    return accuracy(preds, y_test)


def _lodo_task(args):
    dataset_path, base_dict, method, seed, held_out = args
    dataset = datagen.load(dataset_path)
    base = RunConfig.from_dict(base_dict)
    try:
        acc = _evaluate_fold(dataset, base, method, seed, held_out)
        return held_out, seed, method, acc, None
    except Exception as exc:  # noqa: BLE001 - per-fold failures are reported, not fatal
        return held_out, seed, method, None, f"{type(exc).__name__}: {exc}"


def evaluate_leave_one_out(dataset_path, methods, seeds, base: RunConfig | None = None,
                           dataset=None, threads: int = 1) -> EvalReport:
    """Rotate the held-out domain; per fold and seed, score each method."""
    if dataset is None:
        dataset = datagen.load(dataset_path)
    base = base if base is not None else RunConfig()
    for m in methods:
        if m not in BASELINE_METHODS and m not in TRAINED_METHODS:
            raise ConfigError(f"unknown method {m!r}")
    seeds = list(seeds)
    if not seeds:
        raise ConfigError("need at least one seed")

    tasks = [(str(dataset_path), base.to_dict(), method, seed, held_out)
             for held_out in dataset.domains for seed in seeds for method in methods]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            outcomes = list(pool.map(_lodo_task, tasks))
    else:
        outcomes = []
        for _, _, method, seed, held_out in tasks:
            try:
                acc = _evaluate_fold(dataset, base, method, seed, held_out)
                outcomes.append((held_out, seed, method, acc, None))
            except Exception as exc:  # noqa: BLE001
                outcomes.append((held_out, seed, method, None, f"{type(exc).__name__}: {exc}"))

    outcomes.sort(key=lambda r: (r[2], r[0], r[1]))
    failures = [
        {"held_out": held_out, "seed": seed, "method": method, "error": err}
        for held_out, seed, method, acc, err in outcomes if err is not None
    ]

    methods_out: dict[str, MethodResult] = {}
    for method in methods:
        runs = [
            {"held_out": held_out, "seed": seed, "accuracy": acc}
            for held_out, seed, m, acc, err in outcomes
            if m == method and err is None
        ]
        per_domain, per_std = {}, {}
        for dom in dataset.domains:
            vals = [r["accuracy"] for r in runs if r["held_out"] == dom]
            if vals:
                per_domain[dom] = float(np.mean(vals))
                per_std[dom] = float(np.std(vals))
        average = float(np.mean(list(per_domain.values()))) if per_domain else float("nan")
        cfg_hash = None
        if method in TRAINED_METHODS:
            cfg_hash = method_config(base, method, seeds[0], dataset.domains[0]).config_hash()
        methods_out[method] = MethodResult(
            name=method, per_domain=per_domain, per_domain_std=per_std,
            average=average, runs=runs, config_hash=cfg_hash,
        )

    return EvalReport(
        domains=list(dataset.domains),
        methods=methods_out,
        metadata={"dataset": str(dataset_path), "seeds": seeds,
                  "base_config_hash": base.config_hash()},
        partial=bool(failures),
        failures=failures,
    )


def evaluate_cross_category(base: RunConfig, train_dataset_path, test_dataset_path,
                            dataset=None, test_dataset=None) -> EvalReport:
    """Train on one dataset, test on another with disjoint classes and domains."""
    if dataset is None:
        dataset = datagen.load(train_dataset_path)
    if test_dataset is None:
        test_dataset = datagen.load(test_dataset_path)

    class_overlap = set(dataset.classes) & set(test_dataset.classes)
    if class_overlap:
        raise ConfigError(f"train and test class sets overlap: {sorted(class_overlap)}")
    domain_overlap = set(dataset.domains) & set(test_dataset.domains)
    if domain_overlap:
        raise ConfigError(f"train and test domain sets overlap: {sorted(domain_overlap)}")

    cfg = replace(base, held_out_domain=None, out_dir=None,
                  extra_classes=list(test_dataset.classes))
    result = train_style_prompter(cfg, dataset=dataset)

    runs_ours, runs_base = [], []
    per_ours, per_base = {}, {}
    for dom_id, dom in enumerate(test_dataset.domains):
        idx = test_dataset.domain_indices(dom_id)
        x_test, y_test = test_dataset.x[idx], test_dataset.class_ids[idx]
        preds, _ = predict_batch(result.bundle, result.prompter, x_test, test_dataset.classes)
        acc = accuracy(preds, y_test)
        per_ours[dom] = acc
        runs_ours.append({"held_out": dom, "seed": cfg.seed, "accuracy": acc})
        zs_preds, _ = zero_shot_predict_batch(result.bundle, x_test, test_dataset.classes, "C")
        zs_acc = accuracy(zs_preds, y_test)
        per_base[dom] = zs_acc
        runs_base.append({"held_out": dom, "seed": cfg.seed, "accuracy": zs_acc})

    methods = {
        "ours": MethodResult(
            name="ours", per_domain=per_ours,
            per_domain_std={d: 0.0 for d in per_ours},
            average=float(np.mean(list(per_ours.values()))),
            runs=runs_ours, config_hash=cfg.config_hash(),
        ),
        "baseline_C": MethodResult(
            name="baseline_C", per_domain=per_base,
            per_domain_std={d: 0.0 for d in per_base},
            average=float(np.mean(list(per_base.values()))),
            runs=runs_base, config_hash=None,
        ),
    }
    return EvalReport(
        domains=list(test_dataset.domains), methods=methods,
        metadata={"train_dataset": str(train_dataset_path),
                  "test_dataset": str(test_dataset_path),
                  "train_classes": list(dataset.classes),
                  "test_classes": list(test_dataset.classes),
                  "seed": cfg.seed},
    )


@dataclass
class SimilarityMatrix:
    image_ids: list[int]
    true_domains: list[str]
    columns: list[str]        # style words, then "learned"
    values: np.ndarray        # (n_images, n_columns), raw cosines

    def column_means(self) -> dict[str, float]:
        return {c: float(self.values[:, j].mean()) for j, c in enumerate(self.columns)}


def style_similarity_report(bundle, prompter, x, true_class_ids, true_domain_names,
                            classes, style_words=STYLE_WORDS,
                            image_ids=None) -> SimilarityMatrix:
    """Cosine similarity of each test image against hand-crafted domain-style
    texts for its true class, plus its own learned-style prompt."""
    x = np.asarray(x, dtype=np.float64)
    true_class_ids = np.asarray(true_class_ids, dtype=np.int64)
    n = x.shape[0]
    if image_ids is None:
        image_ids = list(range(n))

    z = encode_image(bundle, x)
    zp = project_image(bundle, z)
    zp = zp / np.linalg.norm(zp, axis=1, keepdims=True)

    word_feats = {}
    for word in style_words:
        for ci, cls in enumerate(classes):
            ids = tokenize(domain_style_text(word, cls), bundle)
            emb = bundle.weights["tok_emb"][np.asarray(ids, dtype=np.int64)]
            feat = encode_text(bundle, Tensor(emb)).data
            word_feats[(word, ci)] = feat / np.linalg.norm(feat)

    styles = style_for_prompt(prompter, Tensor(z))
    learned = prompt_text_features(bundle, styles, classes).data
    learned = learned / np.linalg.norm(learned, axis=1, keepdims=True)
    n_classes = len(classes)

    columns = list(style_words) + ["learned"]
    values = np.zeros((n, len(columns)))
    for i in range(n):
        ci = int(true_class_ids[i])
        for j, word in enumerate(style_words):
            values[i, j] = zp[i] @ word_feats[(word, ci)]
        values[i, -1] = zp[i] @ learned[i * n_classes + ci]
    return SimilarityMatrix(image_ids=list(image_ids),
                            true_domains=list(true_domain_names),
                            columns=columns, values=values)


def write_similarity_csv(matrix: SimilarityMatrix, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image", "true_domain"] + matrix.columns)
        for i, image_id in enumerate(matrix.image_ids):
            writer.writerow([image_id, matrix.true_domains[i]]
                            + [f"{v:.10f}" for v in matrix.values[i]])


def run_ablation(dataset_path, seeds, base: RunConfig | None = None,
                 dataset=None, threads: int = 1) -> dict:
    """Four-row component table: zero-shot baseline, then each prompter variant."""
    report = evaluate_leave_one_out(
        dataset_path, [m for _, m in ABLATION_ROWS], seeds,
        base=base, dataset=dataset, threads=threads,
    )
    rows = []
    for label, method in ABLATION_ROWS:
        m = report.methods[method]
        rows.append({
            "row": label,
            "method": method,
            "average_accuracy": m.average,
            "per_domain": m.per_domain,
            "config_hash": m.config_hash,
        })
    return {"rows": rows, "metadata": report.metadata, "partial": report.partial,
            "failures": report.failures}


def write_report_json(payload: dict, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True))


def write_report_csv(report: EvalReport, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method"] + report.domains + ["average"])
        for name, m in report.methods.items():
            writer.writerow(
                [name]
                + [f"{m.per_domain.get(d, float('nan')):.6f}" for d in report.domains]
                + [f"{m.average:.6f}"]
            )
