"""Relearn-time measurement, the anamnesis index, and report assembly.

Relearn time counts fine-tuning mini-batches until a model re-enters a
percentage margin of the original model's forget-class accuracy. The
anamnesis index is the ratio of the unlearned model's relearn time to the
from-scratch (retrained) model's; values near 1 indicate good unlearning,
much below 1 residual knowledge, and much above 1 a detectable scar left
by the unlearning itself.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .models import ModelBundle, evaluate, to_torch


@dataclass
class RelearnConfig:
    margin_pct: float = 5.0
    batch_size: int = 256
    lr: float = 0.1
    momentum: float = 0.9
    lr_decay_factor: float = 0.1
    patience_epochs: int = 2
    max_epochs: int = 20
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.margin_pct < 100:
            raise ValueError("margin_pct must be in (0, 100)")
        if not 5.0 <= self.margin_pct <= 10.0:
            warnings.warn(f"margin_pct={self.margin_pct} is outside the stable 5-10 band",
                          stacklevel=3)

    def to_dict(self):
        return dict(self.__dict__)


@dataclass
class RelearnResult:
    steps: int
    reached: bool
    curve: list
    margin_pct: float
    cap: int
    target_acc: float


def steps_to_margin(curve, target_acc) -> int | None:
    """First 1-based step on a recorded curve meeting the target accuracy."""
    for i, acc in enumerate(curve):
        if acc >= target_acc:
            return i + 1
    return None


def relearn_time(model: ModelBundle, train_data, forget_classes,
                 original_acc_on_forget: float, config: RelearnConfig,
                 forget_eval=None, eval_fn=None) -> RelearnResult:
    """Mini-batch count to re-enter the margin around the original accuracy.

    Fine-tunes a copy of `model` on the full training data (forget classes
    included), evaluating forget-class accuracy after every mini-batch.
    `forget_eval` defaults to the forget-class view of the training data;
    `eval_fn(bundle, dataset) -> acc` is injectable for scripted tests.
    """
    if original_acc_on_forget <= 0:
        raise ValueError("original forget accuracy must be positive; margin undefined")
    from .data import partition  # local import avoids a cycle at module load

    eval_fn = eval_fn or evaluate
    if forget_eval is None:
        forget_eval = partition(train_data, forget_classes).forget_view
    target = original_acc_on_forget * (1.0 - config.margin_pct / 100.0)

    before_hash = model.parameter_hash()
    worker = model.clone()
    worker.net.train()
    opt = torch.optim.SGD(worker.net.parameters(), lr=config.lr, momentum=config.momentum)
    loss_fn = nn.CrossEntropyLoss()
    rng = np.random.default_rng(config.seed)

    batches_per_epoch = max(1, (len(train_data) + config.batch_size - 1) // config.batch_size)
    cap = config.max_epochs * batches_per_epoch
    curve: list[float] = []
    lr = config.lr
    best_epoch_acc = -1.0
    epochs_without_improvement = 0
    done = False
    for _ in range(config.max_epochs):
        epoch_acc = -1.0
        for images, labels in train_data.batches(config.batch_size, shuffle=True, rng=rng):
            opt.zero_grad()
            loss_fn(worker.net(to_torch(images)), torch.from_numpy(labels)).backward()
            opt.step()
            acc = eval_fn(worker, forget_eval)
            curve.append(acc)
            epoch_acc = max(epoch_acc, acc)
            if acc >= target or len(curve) >= cap:
                done = True
                break
        if done:
            break
        if epoch_acc > best_epoch_acc + 1e-9:
            best_epoch_acc = epoch_acc
            epochs_without_improvement = 0
        else:
            epochs_without_improvement += 1
            if epochs_without_improvement >= config.patience_epochs:
                lr *= config.lr_decay_factor
                for group in opt.param_groups:
                    group["lr"] = lr
                epochs_without_improvement = 0
    assert model.parameter_hash() == before_hash, "relearn mutated the evaluated model"

    steps = steps_to_margin(curve, target)
    return RelearnResult(steps=steps if steps is not None else len(curve),
                         reached=steps is not None, curve=curve,
                         margin_pct=config.margin_pct, cap=cap, target_acc=target)


@dataclass
class AINReport:
    ain: float
    unlearned: RelearnResult
    scratch: RelearnResult
    bounded: bool


def anamnesis_index(unlearned: RelearnResult, scratch: RelearnResult) -> AINReport:
    """Ratio of relearn times, unlearned over retrained-from-scratch."""
    if unlearned.margin_pct != scratch.margin_pct:
        raise ValueError("relearn runs used different margins; ratio not comparable")
    if scratch.steps == 0:
        raise ValueError("scratch relearn steps must be >= 1")
    return AINReport(ain=unlearned.steps / scratch.steps,
                     unlearned=unlearned, scratch=scratch,
                     bounded=not (unlearned.reached and scratch.reached))


def interpret_ain(ain: float, residual_below=0.5, streisand_above=2.0) -> str:
    """Map an anamnesis index to a qualitative verdict."""
    if ain < 0:
        raise ValueError("anamnesis index is nonnegative")
    if ain < residual_below:
        return "residual-information"
    if ain > streisand_above:
        return "streisand-risk"
    return "well-unlearned"


REPORT_COLUMNS = ("experiment_id", "method", "forget_classes", "d_r_acc", "d_f_acc",
                  "ain", "ain_bounded", "relearn_steps_u", "relearn_steps_s")


@dataclass
class EvalReport:
    """Result row for one unlearning experiment."""

    method: str
    forget_classes: tuple
    d_r_acc: float
    d_f_acc: float
    experiment_id: str = ""
    ain: float | None = None
    ain_bounded: bool | None = None
    relearn_steps_u: int | None = None
    relearn_steps_s: int | None = None
    mia: object = None
    inversion: object = None
    unlearn_phase_reads: int = 0
    wall_clock: float = 0.0
    config: dict = field(default_factory=dict)
    failure_stage: str | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("d_r_acc", "d_f_acc"):
            v = getattr(self, name)
            if not 0.0 <= v <= 100.0:
                raise ValueError(f"{name}={v} outside [0, 100]")

    def csv_row(self) -> dict:
        return {
            "experiment_id": self.experiment_id,
            "method": self.method,
            "forget_classes": "|".join(str(c) for c in self.forget_classes),
            "d_r_acc": f"{self.d_r_acc:.4f}",
            "d_f_acc": f"{self.d_f_acc:.4f}",
            "ain": "" if self.ain is None else f"{self.ain:.6f}",
            "ain_bounded": "" if self.ain_bounded is None else str(self.ain_bounded).lower(),
            "relearn_steps_u": "" if self.relearn_steps_u is None else str(self.relearn_steps_u),
            "relearn_steps_s": "" if self.relearn_steps_s is None else str(self.relearn_steps_s),
        }


def write_report_csv(reports, path) -> str:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=REPORT_COLUMNS)
        writer.writeheader()
        for report in reports:
            writer.writerow(report.csv_row())
    return str(path)


def read_report_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))
