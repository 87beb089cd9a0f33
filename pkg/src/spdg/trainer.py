"""Optimization loop for the style prompter.

SGD with momentum and coupled weight decay, a fixed-rate warmup epoch followed
by per-step cosine annealing to zero, domain-stratified batches, and per-domain
90/10 train/validation splits. Only prompter parameters are updated; the
encoder bundle is checksummed before and after to witness the freeze contract.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from hashlib import sha256
from pathlib import Path

import numpy as np

from . import datagen
from .encoders import EncoderDims, build_bundle, bundle_checksum, default_vocab, encode_image, save_bundle
from .errors import ConfigError, DegenerateVectorError, NormalizationError, TrainingDiverged
from .inference import accuracy, predict_batch
from .losses import (
    LossParts,
    LossWeights,
    build_reg_anchors,
    domain_discrimination_loss,
    prompted_ce_and_reg,
    total_loss,
)
from .prompter import (
    basic_forward,
    gaussian_forward,
    init_basic_prompter,
    init_gaussian_prompter,
    load_checkpoint,
    sample_styles_batch,
    save_checkpoint,
)
from .tensor import Tape, Tensor, l2_normalize


@dataclass
class RunConfig:
    prompter_kind: str = "gaussian"
    use_style_reg: bool = True
    epochs: int = 3
    batch_size: int = 12
    mc_samples: int = 40
    lr_max: float = 0.002
    lr_warmup: float = 1e-5
    momentum: float = 0.9
    weight_decay: float = 5e-4
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    dims: EncoderDims = field(default_factory=EncoderDims)
    dataset: str = ""
    held_out_domain: str | None = None
    out_dir: str | None = None
    logit_scale: float = 100.0
    val_ratio: float = 0.9
    select_best: bool = False
    precision: str = "f64"
    extra_classes: list = field(default_factory=list)

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.prompter_kind not in ("basic", "gaussian"):
            raise ConfigError(f"prompter_kind must be basic|gaussian, got {self.prompter_kind!r}")
        if self.mc_samples < 1:
            raise ConfigError(f"mc_samples must be >= 1, got {self.mc_samples}")
        if not (0.0 < self.val_ratio < 1.0):
            raise ConfigError(f"val_ratio must be in (0, 1), got {self.val_ratio}")

    def to_dict(self) -> dict:
        d = asdict(self)
        return d

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        raw = dict(raw)
        if "weights" in raw and isinstance(raw["weights"], dict):
            raw["weights"] = LossWeights(**raw["weights"])
        if "dims" in raw and isinstance(raw["dims"], dict):
            raw["dims"] = EncoderDims(**raw["dims"])
        return cls(**raw)

    def config_hash(self) -> str:
        return sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:12]


@dataclass
class OptimizerState:
    velocities: list[np.ndarray]
    step: int = 0

    @classmethod
    def for_params(cls, params) -> "OptimizerState":
        return cls(velocities=[np.zeros_like(p.data) for p in params])


def sgd_momentum_step(params, grads, state: OptimizerState, lr: float,
                      momentum: float, weight_decay: float) -> None:
    """p -= lr * v with v = momentum * v + (g + weight_decay * p).

    Decay is coupled: it joins the gradient before the velocity update and so
    is carried by momentum. Applied to every parameter, biases included.
    """
    if len(params) != len(grads) or len(params) != len(state.velocities):
        raise ConfigError("params, grads and velocities must align")
    for p, g, v in zip(params, grads, state.velocities):
        if g.shape != p.data.shape:
            raise ConfigError(f"grad shape {g.shape} does not match param shape {p.data.shape}")
        if not np.isfinite(g).all():
            raise TrainingDiverged(f"non-finite gradient at step {state.step}")
        g_eff = g + weight_decay * p.data
        v *= momentum
        v += g_eff
        p.data = p.data - lr * v
        if not np.isfinite(p.data).all():
            raise TrainingDiverged(f"non-finite parameter after step {state.step}")
    state.step += 1


@dataclass
class Schedule:
    steps_per_epoch: int
    epochs: int
    lr_warmup: float
    lr_max: float

    @property
    def total_steps(self) -> int:
        return self.steps_per_epoch * self.epochs


def lr_at(step: int, sched: Schedule) -> float:
    """Warmup epoch at a fixed rate, then cosine from lr_max to zero per step."""
    if not (0 <= step < sched.total_steps):
        raise ConfigError(f"step {step} outside schedule of {sched.total_steps} steps")
    if step < sched.steps_per_epoch:
        return sched.lr_warmup
    t = step - sched.steps_per_epoch
    t_cos = sched.total_steps - sched.steps_per_epoch
    return 0.5 * sched.lr_max * (1.0 + np.cos(np.pi * t / t_cos))


def split_train_val(indices_by_domain: dict, ratio: float, seed: int):
    """Per-domain seeded shuffle, then a ratio split. Disjoint and exhaustive."""
    if not (0.0 < ratio < 1.0):
        raise ConfigError(f"split ratio must be in (0, 1), got {ratio}")
    train, val = {}, {}
    for d in sorted(indices_by_domain):
        idx = np.asarray(indices_by_domain[d])
        if idx.size < 10:
            raise ConfigError(f"domain {d} has only {idx.size} samples, need >= 10")
        rng = np.random.default_rng([seed, int(d)])
        shuffled = idx.copy()
        rng.shuffle(shuffled)
        n_train = min(max(int(round(ratio * idx.size)), 1), idx.size - 1)
        train[d] = shuffled[:n_train]
        val[d] = shuffled[n_train:]
    return train, val


def stratified_batches(train_by_domain: dict, batch_size: int, seed: int) -> list[np.ndarray]:
    """One epoch of batches where every present domain contributes >= 2 samples.

    Domains enter a batch two samples at a time; once present, they may add
    singles. A trailing partial batch is kept only when it still satisfies the
    two-per-domain contract, which the construction guarantees, so only an
    unpairable remainder is dropped.
    """
    order = sorted(train_by_domain)
    for d in order:
        if len(train_by_domain[d]) < 2:
            raise ConfigError(f"domain {d} has fewer than 2 training samples")
    if batch_size < 2 * len(order):
        raise ConfigError(
            f"batch size {batch_size} cannot hold 2 samples from each of {len(order)} domains"
        )
    rng = np.random.default_rng(seed)
    pools = {}
    for d in order:
        pool = np.asarray(train_by_domain[d]).copy()
        rng.shuffle(pool)
        pools[d] = list(pool)

    batches = []
    while True:
        batch: list[int] = []
        present: set = set()
        while len(batch) < batch_size:
            progressed = False
            for d in order:
                if len(batch) >= batch_size:
                    break
                pool = pools[d]
                if not pool:
                    continue
                if d in present:
                    batch.append(pool.pop())
                    progressed = True
                elif len(pool) >= 2 and batch_size - len(batch) >= 2:
                    batch.append(pool.pop())
                    batch.append(pool.pop())
                    present.add(d)
                    progressed = True
            if not progressed:
                break
        if len(batch) == batch_size:
            batches.append(np.asarray(batch, dtype=np.int64))
        else:
            if len(batch) >= 2:
                batches.append(np.asarray(batch, dtype=np.int64))
            break
    if not batches:
        raise ConfigError("not enough training samples to form a single batch")
    return batches


@dataclass
class TrainResult:
    prompter: object
    bundle: object
    config: RunConfig
    metrics: list[dict]
    val_accuracies: list[float]
    encoder_checksum: str
    out_dir: str | None
    final_dir: str | None
    metrics_path: str | None


def _resolve_held_out(dataset, held_out) -> int | None:
    if held_out is None:
        return None
    if isinstance(held_out, str):
        if held_out not in dataset.domains:
            raise ConfigError(f"held-out domain {held_out!r} not in dataset domains {dataset.domains}")
        return dataset.domains.index(held_out)
    held_out = int(held_out)
    if not (0 <= held_out < len(dataset.domains)):
        raise ConfigError(f"held-out domain id {held_out} out of range")
    return held_out


def _dump_diagnostics(out_dir, step, parts_values, params):
    if out_dir is None:
        return None
    path = Path(out_dir) / f"diagnostics_step_{step}.json"
    payload = {
        "step": step,
        "losses": parts_values,
        "param_norms": {name: float(np.linalg.norm(p.data)) for name, p in params},
        "grad_norms": {
            name: (float(np.linalg.norm(p.grad)) if p.grad is not None else None)
            for name, p in params
        },
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True))
    return str(path)


def train_style_prompter(config: RunConfig, dataset=None) -> TrainResult:
    """Run the full training recipe and return the trained prompter plus logs."""
    if dataset is None:
        if not config.dataset:
            raise ConfigError("config.dataset is empty and no dataset was passed")
        dataset = datagen.load(config.dataset)

    held_out = _resolve_held_out(dataset, config.held_out_domain)
    train_domains = [d for d in range(len(dataset.domains)) if d != held_out]
    if len(train_domains) < 2:
        raise ConfigError("need at least 2 training domains")
    if config.batch_size < 2 * len(train_domains):
        raise ConfigError(
            f"batch size {config.batch_size} must be >= 2 x {len(train_domains)} training domains"
        )

    vocab = default_vocab(list(dataset.classes) + list(config.extra_classes))
    bundle = build_bundle(config.dims, vocab, seed=config.seed, logit_scale=config.logit_scale)
    checksum_before = bundle_checksum(bundle)

    if config.prompter_kind == "basic":
        prompter = init_basic_prompter(config.dims.d_i, config.dims.d_t, seed_from(config.seed, 1))
    else:
        prompter = init_gaussian_prompter(config.dims.d_i, config.dims.d_t, seed_from(config.seed, 1))
    named_params = prompter.parameters()
    params = [p for _, p in named_params]

    anchors = build_reg_anchors(bundle, dataset.classes) if config.use_style_reg else None

    indices_by_domain = {d: dataset.domain_indices(d) for d in train_domains}
    train_idx, val_idx = split_train_val(indices_by_domain, config.val_ratio, seed_from(config.seed, 0))
    val_all = np.concatenate([val_idx[d] for d in sorted(val_idx)])

    epoch_batches = [
        stratified_batches(train_idx, config.batch_size, seed_from(config.seed, 3, epoch))
        for epoch in range(config.epochs)
    ]
    steps_per_epoch = len(epoch_batches[0])
    if any(len(b) != steps_per_epoch for b in epoch_batches):
        raise AssertionError("batch count drifted between epochs")
    sched = Schedule(steps_per_epoch=steps_per_epoch, epochs=config.epochs,
                     lr_warmup=config.lr_warmup, lr_max=config.lr_max)

    mc_rng = np.random.default_rng([config.seed, 2])
    opt_state = OptimizerState.for_params(params)

    out_dir = Path(config.out_dir) if config.out_dir else None
    # the echo stored in checkpoints drops the output path, so identical runs
    # written to different directories stay byte-identical
    config_echo = {**config.to_dict(), "out_dir": None}
    metrics_fh = None
    metrics_path = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True))
        save_bundle(bundle, out_dir / "bundle")
        metrics_path = str(out_dir / "metrics.ndjson")
        metrics_fh = open(metrics_path, "w")

    metrics: list[dict] = []
    val_accuracies: list[float] = []
    best = (-1.0, -1)

    def emit(record: dict):
        metrics.append(record)
        if metrics_fh is not None:
            metrics_fh.write(json.dumps(record, sort_keys=True) + "\n")

    try:
        step = 0
        for epoch in range(config.epochs):
            for batch in epoch_batches[epoch]:
                xb = dataset.x[batch]
                labels = dataset.class_ids[batch]
                doms = dataset.domain_ids[batch]
                z = encode_image(bundle, xb)

                try:
                    with Tape() as tape:
                        zt = Tensor(z)
                        if config.prompter_kind == "gaussian":
                            mu, sigma = gaussian_forward(prompter, zt)
                            samples = sample_styles_batch(mu, sigma, config.mc_samples, mc_rng)
                            style_samples = l2_normalize(samples)
                            sample_domains = np.repeat(doms, config.mc_samples)
                            prompt_styles = mu
                        else:
                            emb = basic_forward(prompter, zt)
                            style_samples = l2_normalize(emb)
                            sample_domains = doms
                            prompt_styles = emb
                        loss_d = domain_discrimination_loss(style_samples, sample_domains,
                                                            config.weights.tau_d)
                        loss_ce, loss_reg = prompted_ce_and_reg(bundle, z, prompt_styles, labels,
                                                                dataset.classes, anchors)
                        loss = total_loss(LossParts(loss_ce=loss_ce, loss_d=loss_d,
                                                    loss_reg=loss_reg), config.weights)
                except (NormalizationError, DegenerateVectorError) as exc:
                    _dump_diagnostics(out_dir, step, {"error": str(exc)}, named_params)
                    raise TrainingDiverged(
                        f"numeric blowup in the forward pass at step {step}: {exc}"
                    ) from exc

                parts_values = {
                    "loss_total": float(loss.item()),
                    "loss_d": float(loss_d.item()),
                    "loss_reg": float(loss_reg.item()) if loss_reg is not None else 0.0,
                    "loss_ce": float(loss_ce.item()),
                }
                if not np.isfinite(parts_values["loss_total"]):
                    dump = _dump_diagnostics(out_dir, step, parts_values, named_params)
                    raise TrainingDiverged(
                        f"non-finite loss at step {step}" + (f", diagnostics at {dump}" if dump else "")
                    )

                tape.backward(loss, leaves=params)
                lr = lr_at(step, sched)
                try:
                    sgd_momentum_step(params, [p.grad for p in params], opt_state, lr,
                                      config.momentum, config.weight_decay)
                except TrainingDiverged:
                    _dump_diagnostics(out_dir, step, parts_values, named_params)
                    raise
                emit({"step": step, "epoch": epoch, "lr": float(lr), **parts_values})
                step += 1

            preds, _ = predict_batch(bundle, prompter, dataset.x[val_all], dataset.classes)
            val_acc = accuracy(preds, dataset.class_ids[val_all])
            val_accuracies.append(val_acc)
            emit({"epoch": epoch, "val_accuracy": val_acc})
            if val_acc > best[0]:
                best = (val_acc, epoch)
            if out_dir is not None:
                save_checkpoint(prompter, out_dir / "checkpoints" / f"epoch_{epoch + 1}",
                                run_config=config_echo)
    finally:
        if metrics_fh is not None:
            metrics_fh.close()

    final_dir = None
    if out_dir is not None:
        final_dir = out_dir / "final"
        if config.select_best and best[1] != config.epochs - 1:
            chosen, _ = load_checkpoint(out_dir / "checkpoints" / f"epoch_{best[1] + 1}")
            save_checkpoint(chosen, final_dir, run_config=config_echo)
            prompter = chosen
        else:
            save_checkpoint(prompter, final_dir, run_config=config_echo)
        final_dir = str(final_dir)

    checksum_after = bundle_checksum(bundle)
    if checksum_after != checksum_before:
        raise AssertionError("frozen encoder weights changed during training")

    return TrainResult(
        prompter=prompter, bundle=bundle, config=config, metrics=metrics,
        val_accuracies=val_accuracies, encoder_checksum=checksum_after,
        out_dir=str(out_dir) if out_dir else None, final_dir=final_dir,
        metrics_path=metrics_path,
    )


def seed_from(base: int, *path: int) -> np.random.SeedSequence | list[int]:
    """Derived integer seed list for independent deterministic streams."""
    return [int(base), *[int(p) for p in path]]
