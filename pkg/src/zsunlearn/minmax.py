"""Noise-based zero-shot unlearning baseline.

Per forget class, learn a noise batch that maximizes the frozen model's
classification loss; per retain class, one that minimizes it. Fine-tuning
("impairing") the model on the pooled noise batches labeled with their
target classes erases the forget classes. No real samples are read at any
point of the unlearning path.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .data import ClassPartition
from .metrics import EvalReport
from .models import ModelBundle, evaluate, to_torch


@dataclass
class MinMaxConfig:
    noise_batch_size: int = 256
    noise_steps: int = 400
    noise_lr: float = 0.1
    lr_decay_factor: float = 0.5
    plateau_patience: int = 20
    noise_l2_weight: float = 0.01
    impair_steps: int = 1
    impair_lr: float = 0.01
    impair_batch_size: int = 256
    repair_steps: int = 0          # ablation hook; off by default
    seed: int = 0

    def __post_init__(self):
        positive = ["noise_batch_size", "noise_lr", "lr_decay_factor",
                    "impair_lr", "impair_batch_size", "plateau_patience"]
        for name in positive:
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ["noise_steps", "impair_steps", "noise_l2_weight"]:
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    def to_dict(self):
        return dict(self.__dict__)


@dataclass
class NoiseEntry:
    batch: np.ndarray
    target_label: int
    kind: str                      # "max" | "min"
    loss_history: list = field(default_factory=list)
    initial_class_loss: float = 0.0
    final_class_loss: float = 0.0
    lr_decay_steps: list = field(default_factory=list)


@dataclass
class NoiseBank:
    entries: list = field(default_factory=list)

    def labels_of(self, kind) -> set:
        return {e.target_label for e in self.entries if e.kind == kind}

    def validate(self, num_classes) -> None:
        max_labels, min_labels = self.labels_of("max"), self.labels_of("min")
        if max_labels & min_labels:
            raise ValueError(f"classes with both noise kinds: {sorted(max_labels & min_labels)}")
        missing = set(range(num_classes)) - max_labels - min_labels
        if missing:
            raise ValueError(f"classes without a noise entry: {sorted(missing)}")
        for e in self.entries:
            if not np.isfinite(e.batch).all():
                raise ValueError(f"non-finite noise for class {e.target_label}")


class TrainingAborted(RuntimeError):
    pass


def _learn_noise(model: ModelBundle, class_id: int, config: MinMaxConfig,
                 maximize: bool, seed: int) -> NoiseEntry:
    """Gradient descent on a noise batch against the frozen model."""
    torch.manual_seed(seed)
    h, w, c = model.input_shape
    noise = torch.randn(config.noise_batch_size, c, h, w, requires_grad=True)
    labels = torch.full((config.noise_batch_size,), class_id, dtype=torch.long)
    loss_fn = nn.CrossEntropyLoss()
    model.net.eval()
    for p in model.net.parameters():
        p.requires_grad_(False)

    entry = NoiseEntry(batch=np.empty(0), target_label=class_id,
                       kind="max" if maximize else "min")
    with torch.no_grad():
        entry.initial_class_loss = float(loss_fn(model.net(noise), labels))

    lr = config.noise_lr
    best = np.inf
    stall = 0
    for step in range(config.noise_steps):
        class_loss = loss_fn(model.net(noise), labels)
        if maximize:
            objective = -class_loss + config.noise_l2_weight * noise.flatten(1).norm(dim=1).mean()
        else:
            objective = class_loss
        if noise.grad is not None:
            noise.grad.zero_()
        objective.backward()
        with torch.no_grad():
            noise -= lr * noise.grad
        if not torch.isfinite(noise).all():
            raise TrainingAborted(f"noise for class {class_id} became non-finite at step {step}")
        value = float(objective)
        entry.loss_history.append(value)
        if value < best - 1e-6:
            best = value
            stall = 0
        else:
            stall += 1
            if stall >= config.plateau_patience:
                lr *= config.lr_decay_factor
                entry.lr_decay_steps.append(step)
                stall = 0
    with torch.no_grad():
        entry.final_class_loss = float(loss_fn(model.net(noise), labels))
    for p in model.net.parameters():
        p.requires_grad_(True)
    entry.batch = noise.detach().numpy()
    return entry


def learn_max_noise(model, class_id, config: MinMaxConfig, seed=None) -> NoiseEntry:
    """Error-maximizing noise for a forget class; anti-samples for impairing."""
    return _learn_noise(model, class_id, config, maximize=True,
                        seed=config.seed if seed is None else seed)


def learn_min_noise(model, class_id, config: MinMaxConfig, seed=None) -> NoiseEntry:
    """Error-minimizing noise; a data-free proxy for a retain class."""
    return _learn_noise(model, class_id, config, maximize=False,
                        seed=config.seed if seed is None else seed)


def impair(model: ModelBundle, bank: NoiseBank, config: MinMaxConfig,
           eval_partition: ClassPartition | None = None) -> ModelBundle:
    """Fine-tune a copy of the model on the shuffled noise bank.

    The input bundle is never mutated. If an evaluation partition is given,
    retain/forget accuracies before and after are recorded in the returned
    bundle's metadata.
    """
    if not bank.entries:
        raise ValueError("noise bank is empty")
    bank.validate(model.num_classes)
    out = model.clone(provenance="unlearned-minmax")
    meta = {"minmax_config": config.to_dict()}
    if eval_partition is not None:
        meta["before"] = {"retain_acc": evaluate(model, eval_partition.retain_view),
                          "forget_acc": evaluate(model, eval_partition.forget_view)}

    inputs = np.concatenate([e.batch for e in bank.entries])
    labels = np.concatenate([np.full(len(e.batch), e.target_label, dtype=np.int64)
                             for e in bank.entries])
    rng = np.random.default_rng(config.seed)
    order = rng.permutation(len(labels))
    inputs, labels = inputs[order], labels[order]

    opt = torch.optim.SGD(out.net.parameters(), lr=config.impair_lr)
    loss_fn = nn.CrossEntropyLoss()
    out.net.train()
    for _ in range(config.impair_steps):
        for start in range(0, len(labels), config.impair_batch_size):
            sl = slice(start, start + config.impair_batch_size)
            opt.zero_grad()
            loss = loss_fn(out.net(torch.from_numpy(inputs[sl])),
                           torch.from_numpy(labels[sl]))
            loss.backward()
            opt.step()
    out.net.eval()
    if eval_partition is not None:
        meta["after"] = {"retain_acc": evaluate(out, eval_partition.retain_view),
                         "forget_acc": evaluate(out, eval_partition.forget_view)}
    out.training_meta = meta
    return out


def run_minmax(model: ModelBundle, partition: ClassPartition,
               config: MinMaxConfig) -> tuple[ModelBundle, EvalReport]:
    """Full noise min-max unlearning run.

    The partition contributes only its class lists during unlearning; any
    sample read before the evaluation phase raises ZeroShotViolation.
    """
    started = time.time()
    counter = partition.base.counter
    with counter.forbid_reads("minmax-unlearn"):
        bank = NoiseBank()
        for class_id in sorted(partition.forget_classes):
            bank.entries.append(learn_max_noise(model, class_id, config,
                                                seed=config.seed * 1000 + class_id))
        for class_id in sorted(partition.retain_classes):
            bank.entries.append(learn_min_noise(model, class_id, config,
                                                seed=config.seed * 1000 + class_id))
        unlearned = impair(model, bank, config)
    unlearned.training_meta["noise_histories"] = {
        e.target_label: {"kind": e.kind, "steps": len(e.loss_history),
                         "initial_class_loss": e.initial_class_loss,
                         "final_class_loss": e.final_class_loss}
        for e in bank.entries}
    report = EvalReport(
        method="minmax",
        forget_classes=tuple(sorted(partition.forget_classes)),
        d_r_acc=evaluate(unlearned, partition.retain_view),
        d_f_acc=evaluate(unlearned, partition.forget_view),
        unlearn_phase_reads=counter.reads_in("minmax-unlearn"),
        wall_clock=time.time() - started,
        config=config.to_dict(),
    )
    report.extra["noise_bank"] = bank
    return unlearned, report
