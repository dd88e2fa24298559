"""Single-phase training: weights and gate logits optimized jointly under
temperature annealing, with CSV metrics/trace logging and checkpointing."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .tensor import Graph, Tensor, backward
from .cost import CostConstants, cost_constants, oracle_count
from .data import ImageDataset, iterate_batches, load_dataset
from .gates import (
    MODE_HARD_STE,
    MODE_SOFT,
    AnnealSchedule,
    ArchitectureMask,
    GateBank,
    GateSample,
    harden,
    sample_gates,
)
from .io import load_tensors, save_tensors
from .losses import PenaltyConfig, cost_penalties, feasibility_penalty, task_loss, total_loss
from .model import ModelConfig, ViTWeights, mask_gates, model_forward

GATED_CHECKPOINT_FORMAT = "gated-checkpoint/v1"


class ConfigError(ValueError):
    pass


class TrainingAborted(RuntimeError):
    pass


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    penalty: PenaltyConfig = field(default_factory=PenaltyConfig)
    anneal: AnnealSchedule = field(default_factory=AnnealSchedule)
    epochs: int = 10
    batch_size: int = 64
    learning_rate: float = 1e-3
    gate_lr_multiplier: float = 10.0
    weight_decay: float = 0.05
    seed: int = 0
    train_path: Optional[str] = None
    val_path: Optional[str] = None
    data_format: str = "cifar10_binary"
    teacher_path: Optional[str] = None
    trace_interval: int = 50
    out_dir: Optional[str] = None
    ste_switch_fraction: float = 0.5
    augment: bool = True
    gate_init: float = 3.0
    init_std: float = 0.02

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.trace_interval < 1:
            raise ConfigError("trace_interval must be >= 1")

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in (
            "epochs", "batch_size", "learning_rate", "gate_lr_multiplier",
            "weight_decay", "seed", "train_path", "val_path", "data_format",
            "teacher_path", "trace_interval", "out_dir", "ste_switch_fraction",
            "augment", "gate_init", "init_std")}
        d["model"] = self.model.to_dict()
        d["penalty"] = self.penalty.to_dict()
        d["anneal"] = {"tau_start": self.anneal.tau_start,
                       "tau_min": self.anneal.tau_min,
                       "total_steps": self.anneal.total_steps,
                       "kind": self.anneal.kind}
        return d

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        d = dict(d)
        try:
            model = ModelConfig.from_dict(d.pop("model"))
            penalty = PenaltyConfig.from_dict(d.pop("penalty", {}))
            anneal = AnnealSchedule(**d.pop("anneal", {}))
            return TrainConfig(model=model, penalty=penalty, anneal=anneal, **d)
        except KeyError as exc:
            raise ConfigError(f"missing config field: {exc.args[0]}") from exc
        except TypeError as exc:
            raise ConfigError(f"bad config: {exc}") from exc

    @staticmethod
    def from_json(path: str) -> "TrainConfig":
        try:
            with open(path) as f:
                raw = json.load(f)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        return TrainConfig.from_dict(raw)

    def to_json(self, path: str) -> None:
        from .io import atomic_write_text
        atomic_write_text(path, json.dumps(self.to_dict(), indent=2, sort_keys=True))


class AdamW:
    """Adaptive moments with decoupled weight decay."""

    def __init__(self, params: list[tuple[str, Tensor]], lr: float,
                 weight_decay: float = 0.0, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(t.data) for _, t in params]
        self.v = [np.zeros_like(t.data) for _, t in params]
        self.skipped_steps = 0

    def grads_finite(self) -> bool:
        for _, p in self.params:
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                return False
        return True

    def step(self) -> bool:
        """Apply one update; returns False (and counts a skip) on any
        non-finite gradient."""
        if not self.grads_finite():
            self.skipped_steps += 1
            return False
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for i, (_, p) in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            m = self.m[i]
            v = self.v[i]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data -= (self.lr * update).astype(p.data.dtype, copy=False)
        return True

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None


@dataclass
class TrainResult:
    weights: ViTWeights
    bank: GateBank
    config: TrainConfig
    constants: CostConstants
    val_accuracy: Optional[float]
    hardened_cost: int
    hardened_cost_fraction: float
    metrics: list[dict]
    checkpoint_path: Optional[str] = None
    metrics_path: Optional[str] = None
    trace_path: Optional[str] = None


def save_gated_checkpoint(path: str, weights: ViTWeights, bank: GateBank,
                          config: TrainConfig) -> None:
    tensors = dict(weights.state_dict())
    for name, t in bank.parameters():
        tensors[name] = t.data
    save_tensors(path, tensors, meta={"format": GATED_CHECKPOINT_FORMAT,
                                      "train_config": config.to_dict()})


def load_gated_checkpoint(path: str) -> tuple[ViTWeights, GateBank, TrainConfig]:
    from .io import CheckpointError
    tensors, meta = load_tensors(path)
    if meta.get("format") != GATED_CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a gated checkpoint "
                              f"(format={meta.get('format')!r})")
    config = TrainConfig.from_dict(meta["train_config"])
    c = config.model
    weights = ViTWeights(c, np.random.default_rng(0))
    weights.load_state_dict(tensors)
    bank = GateBank(c.layers, c.heads, c.head_dim, c.ffn_dim)
    for name, t in bank.parameters():
        if name not in tensors:
            raise CheckpointError(f"{path}: missing gate tensor {name}")
        t.data[...] = tensors[name]
    return weights, bank, config


def _float_repr(x) -> str:
    return repr(float(x))


class _CsvLog:
    """Append-only CSV with repr-stable float formatting."""

    def __init__(self, path: Optional[str], columns: list[str]):
        self.path = path
        self.columns = columns
        self.rows: list[list] = []
        if path:
            with open(path, "w") as f:
                f.write(",".join(columns) + "\n")

    def append(self, row: list) -> None:
        cells = ["" if v is None else
                 (_float_repr(v) if isinstance(v, float) else str(v))
                 for v in row]
        self.rows.append(cells)
        if self.path:
            with open(self.path, "a") as f:
                f.write(",".join(cells) + "\n")


def _trace_snapshot(trace: _CsvLog, bank: GateBank, step: int, tau: float,
                    cost_fraction: float) -> None:
    probs = bank.probabilities()
    for l in range(bank.layers):
        for h in range(bank.heads):
            trace.append([step, l, "head", f"{h}",
                          float(probs["head"][l, h]), tau, cost_fraction])
        trace.append([step, l, "block", "0",
                      float(probs["block"][l]), tau, cost_fraction])
        for h in range(bank.heads):
            for j in range(bank.head_dim):
                trace.append([step, l, "dim", f"{h}/{j}",
                              float(probs["dim"][l, h, j]), tau, cost_fraction])
        for k in range(bank.ffn_dim):
            trace.append([step, l, "neuron", f"{k}",
                          float(probs["neuron"][l, k]), tau, cost_fraction])


def evaluate(weights: ViTWeights, gates: GateSample, dataset: ImageDataset,
             batch_size: int = 256) -> float:
    """Top-1 accuracy with the given (typically hardened) gates."""
    correct = 0
    for images, labels in iterate_batches(dataset, batch_size):
        logits = model_forward(images, weights, gates)
        correct += int((logits.data.argmax(axis=1) == labels).sum())
    return correct / len(dataset)


def _teacher_logit_fn(teacher_path: str):
    from .extract import extract_dense_model
    weights, bank, config = load_gated_checkpoint(teacher_path)
    model = extract_dense_model(weights, config.model)
    return lambda images: model.forward(images)


def train(config: TrainConfig,
          train_ds: Optional[ImageDataset] = None,
          val_ds: Optional[ImageDataset] = None,
          fixed_mask: Optional[ArchitectureMask] = None) -> TrainResult:
    """Run the full anneal-and-harden loop.

    Datasets may be passed in memory; otherwise they are loaded from the
    config paths. ``fixed_mask`` freezes the gates to a constant binary
    mask (baseline runs); gate logits then receive no updates.
    """
    if train_ds is None:
        if not config.train_path:
            raise ConfigError("train_path is required")
        train_ds = load_dataset(config.train_path, config.data_format,
                                num_classes=config.model.num_classes)
    if val_ds is None and config.val_path:
        val_ds = load_dataset(config.val_path, config.data_format,
                              num_classes=config.model.num_classes)
    if train_ds.labels.max(initial=0) >= config.model.num_classes:
        raise ConfigError("dataset labels exceed model num_classes")

    out_dir = config.out_dir
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    paths = {name: os.path.join(out_dir, name) if out_dir else None
             for name in ("checkpoint.bin", "metrics.csv", "trace.csv")}

    seed_seq = np.random.SeedSequence(config.seed)
    init_rng, noise_rng, data_rng = [np.random.default_rng(s)
                                     for s in seed_seq.spawn(3)]

    c = config.model
    weights = ViTWeights(c, init_rng, init_std=config.init_std)
    bank = GateBank(c.layers, c.heads, c.head_dim, c.ffn_dim,
                    init=config.gate_init)
    constants = cost_constants(c)
    dense_total = constants.dense_prunable_total

    teacher = _teacher_logit_fn(config.teacher_path) if config.teacher_path else None

    steps_per_epoch = math.ceil(len(train_ds) / config.batch_size)
    total_steps = config.epochs * steps_per_epoch
    anneal = config.anneal
    if anneal.total_steps is None:
        anneal = AnnealSchedule(anneal.tau_start, anneal.tau_min,
                                total_steps, anneal.kind)

    opt_w = AdamW(weights.parameters(), lr=config.learning_rate,
                  weight_decay=config.weight_decay)
    # gate logits: faster learning rate, never decayed
    opt_g = AdamW(bank.parameters(),
                  lr=config.learning_rate * config.gate_lr_multiplier,
                  weight_decay=0.0)

    metrics = _CsvLog(paths["metrics.csv"],
                      ["step", "epoch", "tau", "task_loss", "L_macro", "L_micro",
                       "L_feas", "expected_cost_fraction", "val_acc"])
    trace = _CsvLog(paths["trace.csv"],
                    ["step", "layer", "family", "index", "probability", "tau",
                     "cost_fraction"])

    fixed_gates = mask_gates(fixed_mask) if fixed_mask is not None else None
    switch_step = int(config.ste_switch_fraction * total_steps)
    step = 0
    nan_streak = 0
    val_acc: Optional[float] = None

    for epoch in range(config.epochs):
        for images, labels in iterate_batches(train_ds, config.batch_size,
                                              rng=data_rng, augment=config.augment):
            tau = anneal.temperature(step)
            mode = MODE_SOFT if step < switch_step else MODE_HARD_STE
            teacher_logits = teacher(images) if teacher is not None else None

            try:
                with Graph() as graph:
                    gates = fixed_gates if fixed_gates is not None \
                        else sample_gates(bank, tau, noise_rng, mode)
                    logits = model_forward(images, weights, gates)
                    l_task = task_loss(logits, labels, teacher_logits, config.penalty)
                    l_macro, l_micro = cost_penalties(bank, constants)
                    l_feas = feasibility_penalty(bank, config.penalty)
                    loss = total_loss(l_task, l_macro, l_micro, l_feas, config.penalty)
                finite = np.isfinite(loss.data).all()
            except FloatingPointError:
                finite = False

            if not finite:
                nan_streak += 1
                if nan_streak >= 10:
                    _abort_dump(out_dir, step, bank)
                    raise TrainingAborted(
                        f"loss non-finite for {nan_streak} consecutive steps "
                        f"at step {step}")
                step += 1
                continue
            nan_streak = 0

            opt_w.zero_grad()
            opt_g.zero_grad()
            backward(graph, loss)
            opt_w.step()
            if fixed_gates is None:
                opt_g.step()
                bank.clip_logits()

            cost_fraction = float(l_macro.data + l_micro.data)
            if step % config.trace_interval == 0:
                metrics.append([step, epoch, tau, loss_item(l_task),
                                loss_item(l_macro), loss_item(l_micro),
                                loss_item(l_feas), cost_fraction, None])
                _trace_snapshot(trace, bank, step, tau, cost_fraction)
            step += 1

        if val_ds is not None:
            mask = fixed_mask if fixed_mask is not None else harden(bank, 0.5)
            val_acc = evaluate(weights, mask_gates(mask), val_ds)
            tau = anneal.temperature(min(step, total_steps))
            metrics.append([step, epoch, tau, None, None, None, None,
                            _last_cost_fraction(bank, constants), val_acc])

    # final snapshot so every gate appears exactly once at the end
    final_tau = anneal.temperature(total_steps)
    final_fraction = _last_cost_fraction(bank, constants)
    _trace_snapshot(trace, bank, total_steps, final_tau, final_fraction)

    final_mask = fixed_mask if fixed_mask is not None else harden(bank, 0.5)
    hardened = oracle_count(final_mask, constants)
    if paths["checkpoint.bin"]:
        save_gated_checkpoint(paths["checkpoint.bin"], weights, bank, config)

    return TrainResult(
        weights=weights, bank=bank, config=config, constants=constants,
        val_accuracy=val_acc, hardened_cost=hardened,
        hardened_cost_fraction=hardened / dense_total,
        metrics=metrics.rows,
        checkpoint_path=paths["checkpoint.bin"],
        metrics_path=paths["metrics.csv"],
        trace_path=paths["trace.csv"],
    )


def loss_item(t: Tensor) -> float:
    return float(t.data)


def _last_cost_fraction(bank: GateBank, constants: CostConstants) -> float:
    probs = bank.probabilities()
    num = (constants.c1 * probs["head"].sum(dtype=np.float64)
           + constants.c2 * (probs["head"][:, :, None] * probs["dim"]).sum(dtype=np.float64)
           + constants.c3 * (probs["block"][:, None] * probs["neuron"]).sum(dtype=np.float64))
    return float(num / constants.dense_prunable_total)


def _abort_dump(out_dir: Optional[str], step: int, bank: GateBank) -> None:
    dump = {
        "step": step,
        "logit_extrema": {name: [float(t.data.min()), float(t.data.max())]
                          for name, t in bank.parameters()},
    }
    if out_dir:
        from .io import atomic_write_text
        atomic_write_text(os.path.join(out_dir, "abort_dump.json"),
                          json.dumps(dump, indent=2, sort_keys=True))
