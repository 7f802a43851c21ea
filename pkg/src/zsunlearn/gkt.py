"""Gated knowledge transfer: data-free unlearning by filtered distillation.

A generator is trained adversarially to produce pseudo-samples that maximize
the teacher-student output divergence; the student distills from the teacher
on those samples. A band-pass gate drops any pseudo-sample for which the
teacher assigns a forget class more than a threshold probability, so forget
class knowledge never reaches the student. The checkpoint with the best
retain accuracy among epochs with zero forget accuracy is returned.
"""

from __future__ import annotations

import copy
import time
from dataclasses import dataclass, field

import torch

from .data import ClassPartition, LabeledDataset
from .metrics import EvalReport
from .models import (ActivationTrace, GeneratorNet, ModelBundle, build_arch,
                     evaluate)


@dataclass
class GKTConfig:
    epochs: int = 4000
    generator_steps: int = 1
    student_steps: int = 10
    filter_threshold: float = 0.01
    attention_weight: float = 250.0
    temperature: float = 1.0
    generator_lr: float = 0.01
    student_lr: float = 0.01
    latent_dim: int = 100
    batch_size: int = 256
    divergence: str = "kl"
    generator_attention_term: bool = False
    eval_every: int = 10
    starvation_limit: int = 100
    prob_floor: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.filter_threshold < 1.0:
            raise ValueError("filter_threshold must be in (0, 1)")
        if self.generator_steps < 1 or self.student_steps < 1:
            raise ValueError("generator_steps and student_steps must be >= 1")
        if self.attention_weight < 0:
            raise ValueError("attention_weight must be >= 0")
        if self.divergence not in ("kl", "js"):
            raise ValueError(f"divergence must be kl or js, got {self.divergence!r}")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")

    def to_dict(self):
        return dict(self.__dict__)


def kl_divergence(p: torch.Tensor, q: torch.Tensor, floor: float = 1e-8) -> torch.Tensor:
    """Divergence of q from p, sum of p*log(p/q) over the class axis.

    Inputs are probability vectors (1-D) or row-wise batches (2-D); log
    arguments are floored to keep the result finite on sparse vectors.
    Returns a scalar for 1-D inputs, per-row values for 2-D.
    """
    if p.shape != q.shape:
        raise ValueError(f"shape mismatch: {tuple(p.shape)} vs {tuple(q.shape)}")
    terms = p * (p.clamp(min=floor).log() - q.clamp(min=floor).log())
    return terms.sum(dim=-1)


def js_divergence(p: torch.Tensor, q: torch.Tensor, floor: float = 1e-8) -> torch.Tensor:
    """Symmetrized divergence; the weaker ablation alternative to kl."""
    mid = 0.5 * (p + q)
    return 0.5 * kl_divergence(p, mid, floor) + 0.5 * kl_divergence(q, mid, floor)


_DIVERGENCES = {"kl": kl_divergence, "js": js_divergence}


def _channel_energy_map(block: torch.Tensor, eps: float) -> torch.Tensor:
    """Per-sample spatial map of mean squared channel activation, L2-normalized."""
    flat = block.pow(2).mean(dim=1).flatten(1)
    return flat / (flat.norm(dim=1, keepdim=True) + eps)


def attention_loss(trace_t: ActivationTrace, trace_s: ActivationTrace,
                   eps: float = 1e-8) -> torch.Tensor:
    """Distance between normalized channel-energy maps, summed over layers."""
    if trace_t.layer_names != trace_s.layer_names:
        raise ValueError(f"trace layers differ: {trace_t.layer_names} vs {trace_s.layer_names}")
    total = None
    for bt, bs in zip(trace_t.blocks, trace_s.blocks):
        diff = (_channel_energy_map(bt, eps) - _channel_energy_map(bs, eps)).norm(dim=1).mean()
        total = diff if total is None else total + diff
    return total


def band_pass_filter(teacher_probs: torch.Tensor, forget_classes,
                     threshold: float) -> torch.Tensor:
    """Boolean mask: a sample passes only if every forget-class probability
    is below the threshold. Empty forget set passes everything.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must be in (0, 1)")
    forget = sorted(forget_classes)
    if not forget:
        return torch.ones(len(teacher_probs), dtype=torch.bool)
    return (teacher_probs[:, forget] < threshold).all(dim=1)


@dataclass
class CurvePoint:
    epoch: int
    retain_acc: float
    forget_acc: float
    pass_rate: float


@dataclass
class GKTState:
    teacher: ModelBundle
    student: ModelBundle
    generator: GeneratorNet
    forget_classes: tuple
    generator_opt: torch.optim.Optimizer
    student_opt: torch.optim.Optimizer
    curves: list = field(default_factory=list)
    best_state: dict | None = None
    best_epoch: int = -1
    best_retain_acc: float = -1.0
    fallback_state: dict | None = None
    fallback_epoch: int = -1
    fallback_retain_acc: float = -1.0
    fallback_forget_acc: float = 0.0
    selection_failed: bool = False
    status: str = "ok"
    epochs_completed: int = 0
    consecutive_starved: int = 0
    window_passed: int = 0
    window_total: int = 0
    unlearn_phase_reads: int = 0


def init_gkt_state(teacher: ModelBundle, forget_classes, config: GKTConfig) -> GKTState:
    """Fresh randomly initialized student and generator next to a frozen teacher."""
    if teacher.provenance not in ("original", "unlearned-gkt"):
        raise ValueError(f"teacher provenance {teacher.provenance!r} is not distillable")
    torch.manual_seed(config.seed)
    student_net = build_arch(teacher.arch_id, teacher.input_shape, teacher.num_classes)
    student = ModelBundle(teacher.arch_id, student_net, teacher.num_classes,
                          teacher.input_shape, teacher.value_range, "unlearned-gkt")
    generator = GeneratorNet(config.latent_dim, teacher.input_shape, teacher.value_range)
    teacher.net.eval()
    for p in teacher.net.parameters():
        p.requires_grad_(False)
    return GKTState(
        teacher=teacher, student=student, generator=generator,
        forget_classes=tuple(sorted(forget_classes)),
        generator_opt=torch.optim.Adam(generator.parameters(), lr=config.generator_lr),
        student_opt=torch.optim.Adam(student_net.parameters(), lr=config.student_lr),
    )


def _record_gate(state: GKTState, mask: torch.Tensor) -> None:
    state.window_total += len(mask)
    state.window_passed += int(mask.sum())


def _starve(state: GKTState, steps: int = 1) -> dict:
    state.consecutive_starved += steps
    return {"skipped": True, "passed": 0}


def generator_step(state: GKTState, z: torch.Tensor, config: GKTConfig) -> dict:
    """One gradient step pushing the generator toward teacher-student disagreement.

    The teacher forward is shared between the gate and the divergence; the
    gate mask is boolean, so gradient reaches the generator only through the
    passing samples.
    """
    divergence = _DIVERGENCES[config.divergence]
    state.generator.train()
    state.student.net.eval()
    pseudo = state.generator(z)
    t_logits, t_trace = state.teacher.net.forward_with_traces(pseudo)
    gate_probs = torch.softmax(t_logits.detach(), dim=-1)
    mask = band_pass_filter(gate_probs, state.forget_classes, config.filter_threshold)
    _record_gate(state, mask)
    if not mask.any():
        return _starve(state)
    state.consecutive_starved = 0
    s_logits, s_trace = state.student.net.forward_with_traces(pseudo[mask])
    t = torch.softmax(t_logits[mask] / config.temperature, dim=-1)
    s = torch.softmax(s_logits / config.temperature, dim=-1)
    gap = divergence(t, s, config.prob_floor).mean()
    if config.generator_attention_term:
        masked_t_trace = ActivationTrace(t_trace.layer_names,
                                         [b[mask] for b in t_trace.blocks])
        gap = gap + config.attention_weight * attention_loss(masked_t_trace, s_trace)
    loss = -gap
    state.generator_opt.zero_grad()
    loss.backward()
    state.generator_opt.step()
    return {"skipped": False, "passed": int(mask.sum()),
            "divergence": float(gap.detach())}


def _pseudo_batch(state: GKTState, z: torch.Tensor, config: GKTConfig):
    """Generate and gate one pseudo-batch with teacher targets, no gradients."""
    state.generator.train()
    with torch.no_grad():
        pseudo = state.generator(z)
        t_logits, t_trace = state.teacher.net.forward_with_traces(pseudo)
        gate_probs = torch.softmax(t_logits, dim=-1)
    mask = band_pass_filter(gate_probs, state.forget_classes, config.filter_threshold)
    _record_gate(state, mask)
    if not mask.any():
        return None
    t = torch.softmax(t_logits[mask] / config.temperature, dim=-1)
    masked_trace = ActivationTrace(t_trace.layer_names, [b[mask] for b in t_trace.blocks])
    return pseudo[mask], t, masked_trace, int(mask.sum())


def _student_update(state: GKTState, passed, t_probs, t_trace, config: GKTConfig) -> dict:
    divergence = _DIVERGENCES[config.divergence]
    state.student.net.train()
    s_logits, s_trace = state.student.net.forward_with_traces(passed)
    s = torch.softmax(s_logits / config.temperature, dim=-1)
    loss = divergence(t_probs, s, config.prob_floor).mean()
    if config.attention_weight > 0:
        loss = loss + config.attention_weight * attention_loss(t_trace, s_trace)
    state.student_opt.zero_grad()
    loss.backward()
    state.student_opt.step()
    return {"skipped": False, "passed": len(passed), "loss": float(loss.detach())}


def student_step(state: GKTState, z: torch.Tensor, config: GKTConfig) -> dict:
    """One distillation step on gated pseudo-samples; the generator is untouched."""
    batch = _pseudo_batch(state, z, config)
    if batch is None:
        return _starve(state)
    state.consecutive_starved = 0
    passed, t, t_trace, _ = batch
    return _student_update(state, passed, t, t_trace, config)


def _evaluate_epoch(state: GKTState, partition: ClassPartition, epoch: int) -> CurvePoint:
    point = CurvePoint(
        epoch=epoch,
        retain_acc=evaluate(state.student, partition.retain_view),
        forget_acc=evaluate(state.student, partition.forget_view),
        pass_rate=(state.window_passed / state.window_total) if state.window_total else 0.0,
    )
    state.window_passed = state.window_total = 0
    state.curves.append(point)
    if point.forget_acc == 0.0 and point.retain_acc > state.best_retain_acc:
        state.best_retain_acc = point.retain_acc
        state.best_epoch = epoch
        state.best_state = copy.deepcopy(state.student.net.state_dict())
    if point.retain_acc > state.fallback_retain_acc:
        state.fallback_retain_acc = point.retain_acc
        state.fallback_epoch = epoch
        state.fallback_forget_acc = point.forget_acc
        state.fallback_state = copy.deepcopy(state.student.net.state_dict())
    return point


def run_gkt(teacher: ModelBundle, partition: ClassPartition,
            config: GKTConfig) -> tuple[ModelBundle, GKTState, EvalReport]:
    """Full gated-transfer run with periodic evaluation and checkpoint selection.

    The partition supplies the forget-class ids and the retain/forget views
    used for the accuracy curves; its samples are unreadable while the
    generator and student are being updated (the audit raises otherwise).
    """
    started = time.time()
    state = init_gkt_state(teacher, partition.forget_classes, config)
    teacher_hash = teacher.parameter_hash()
    counter = partition.base.counter

    for epoch in range(config.epochs):
        with counter.forbid_reads("gkt-unlearn"):
            z = torch.randn(config.batch_size, config.latent_dim)
            for _ in range(config.generator_steps):
                generator_step(state, z, config)
            # The generator and teacher are fixed across the student steps of
            # an epoch, so the gated batch and its targets are computed once.
            batch = _pseudo_batch(state, z, config)
            if batch is None:
                _starve(state, steps=config.student_steps)
            else:
                state.consecutive_starved = 0
                passed, t, t_trace, _ = batch
                for _ in range(config.student_steps):
                    _student_update(state, passed, t, t_trace, config)
        state.epochs_completed = epoch + 1
        if state.consecutive_starved >= config.starvation_limit:
            state.status = "generator_starved"
            _evaluate_epoch(state, partition, epoch)
            break
        if (epoch + 1) % config.eval_every == 0 or epoch == config.epochs - 1:
            _evaluate_epoch(state, partition, epoch)

    assert teacher.parameter_hash() == teacher_hash, "teacher was mutated during transfer"
    state.unlearn_phase_reads = counter.reads_in("gkt-unlearn")

    state.selection_failed = state.best_state is None
    selected_state = state.fallback_state if state.selection_failed else state.best_state
    selected_epoch = state.fallback_epoch if state.selection_failed else state.best_epoch
    selected_net = build_arch(teacher.arch_id, teacher.input_shape, teacher.num_classes)
    selected_net.load_state_dict(selected_state)
    selected = ModelBundle(teacher.arch_id, selected_net, teacher.num_classes,
                           teacher.input_shape, teacher.value_range, "unlearned-gkt",
                           {"gkt_config": config.to_dict(),
                            "selected_epoch": selected_epoch,
                            "selection_failed": state.selection_failed,
                            "status": state.status})
    report = EvalReport(
        method="gkt",
        forget_classes=state.forget_classes,
        d_r_acc=evaluate(selected, partition.retain_view),
        d_f_acc=evaluate(selected, partition.forget_view),
        unlearn_phase_reads=state.unlearn_phase_reads,
        wall_clock=time.time() - started,
        config=config.to_dict(),
    )
    report.extra["selected_epoch"] = selected_epoch
    report.extra["selection_failed"] = state.selection_failed
    report.extra["status"] = state.status
    return selected, state, report


class SequenceAborted(RuntimeError):
    """A sequential unlearning step could not find a zero-forget checkpoint."""


def run_sequential_gkt(teacher: ModelBundle, dataset: LabeledDataset,
                       class_sequence, config: GKTConfig) -> list[EvalReport]:
    """Unlearn classes one after another, feeding each result to the next step.

    The forget set accumulates: step k gates and evaluates on all classes
    requested so far. Aborts if any step fails to select a zero-forget
    checkpoint.
    """
    from .data import partition as make_partition

    sequence = [int(c) for c in class_sequence]
    if len(set(sequence)) != len(sequence):
        raise ValueError("class_sequence must not repeat classes")
    if len(sequence) >= dataset.num_classes:
        raise ValueError("cannot sequentially forget every class")
    reports = []
    current = teacher
    cumulative: list[int] = []
    for step, class_id in enumerate(sequence):
        cumulative.append(class_id)
        step_config = GKTConfig(**{**config.to_dict(), "seed": config.seed + step})
        part = make_partition(dataset, cumulative)
        current, _, report = run_gkt(current, part, step_config)
        report.experiment_id = f"sequential-step{step}-class{class_id}"
        reports.append(report)
        if report.extra.get("selection_failed"):
            raise SequenceAborted(
                f"step {step} (class {class_id}) found no zero-forget checkpoint")
    return reports
