"""Experiment orchestration: specs, pipelines, caching, tables, and plots.

One ExperimentSpec describes a full pipeline (train original and gold models,
unlearn, evaluate, optionally relearn/attack) deterministically from a master
seed. Artifact paths are content-addressed by spec hash, so reruns reuse
cached checkpoints and reports.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import attacks, gkt, metrics, minmax
from .data import load_dataset, partition
from .metrics import EvalReport, RelearnConfig, anamnesis_index, relearn_time
from .models import (ModelBundle, TrainConfig, evaluate, load_checkpoint,
                     save_checkpoint, train_classifier)

METHODS = ("minmax", "gkt", "retrain")

# Per-dataset defaults; the "paper" profile carries the published protocol,
# "desk" shrinks budgets to laptop scale.
_PAPER_GKT = {"epochs": 4000, "filter_threshold": 0.01, "attention_weight": 250.0,
              "generator_steps": 1, "student_steps": 10, "batch_size": 256}
PROFILE_DEFAULTS = {
    ("mnist", "paper"): {
        "train": {"epochs": 10, "batch_size": 256, "lr": 0.1},
        "minmax": {"impair_steps": 1, "impair_lr": 0.01},
        "gkt": {**_PAPER_GKT, "temperature": 1.0, "generator_lr": 0.01, "student_lr": 0.01},
    },
    ("svhn", "paper"): {
        "train": {"epochs": 10, "batch_size": 256, "lr": 0.1},
        "minmax": {"impair_steps": 3, "impair_lr": 0.001},
        "gkt": {**_PAPER_GKT, "temperature": 1.0, "generator_lr": 0.001, "student_lr": 0.001},
    },
    ("cifar10", "paper"): {
        "train": {"epochs": 40, "batch_size": 256, "lr": 0.1},
        "minmax": {"impair_steps": 2, "impair_lr": 0.01},
        "gkt": {**_PAPER_GKT, "temperature": 0.5, "generator_lr": 0.001, "student_lr": 0.001},
    },
    ("mnist", "desk"): {
        "train": {"epochs": 4, "batch_size": 256, "lr": 0.1},
        "minmax": {"impair_steps": 1, "impair_lr": 0.01},
        "gkt": {**_PAPER_GKT, "epochs": 800, "temperature": 1.0,
                "generator_lr": 0.01, "student_lr": 0.01},
    },
    ("digits", "desk"): {
        "train": {"epochs": 30, "batch_size": 128, "lr": 0.05},
        "minmax": {"impair_steps": 1, "impair_lr": 0.01},
        "gkt": {**_PAPER_GKT, "epochs": 800, "batch_size": 128, "temperature": 1.0,
                "generator_lr": 0.01, "student_lr": 0.01},
    },
}
_FALLBACK_DEFAULTS = {
    "train": {"epochs": 10, "batch_size": 128, "lr": 0.05},
    "minmax": {},
    "gkt": {"epochs": 400, "batch_size": 128, "eval_every": 10},
}


def profile_defaults(dataset_id: str, profile: str) -> dict:
    base = dataset_id.split(":")[0]
    return PROFILE_DEFAULTS.get((base, profile), _FALLBACK_DEFAULTS)


SPEC_SCHEMA_VERSION = 1


@dataclass
class ExperimentSpec:
    dataset: str
    arch_id: str
    method: str
    forget_classes: tuple
    seed: int = 0
    profile: str = "desk"
    train: dict = field(default_factory=dict)
    method_config: dict = field(default_factory=dict)
    relearn: dict = field(default_factory=dict)
    include_ain: bool = False
    include_mia: bool = False
    include_inversion: bool = False
    output_dir: str = "runs"
    schema_version: int = SPEC_SCHEMA_VERSION

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        self.forget_classes = tuple(sorted(int(c) for c in self.forget_classes))

    def canonical(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("output_dir")
        return d

    def spec_hash(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def resolved_configs(self) -> dict:
        base = profile_defaults(self.dataset, self.profile)
        train_cfg = TrainConfig(**{**base.get("train", {}), **self.train, "seed": self.seed})
        method_base = base.get(self.method, {}) if self.method != "retrain" else {}
        merged = {**method_base, **self.method_config, "seed": self.seed}
        method_cfg = None
        if self.method == "minmax":
            method_cfg = minmax.MinMaxConfig(**merged)
        elif self.method == "gkt":
            method_cfg = gkt.GKTConfig(**merged)
        relearn_cfg = RelearnConfig(**{**self.relearn, "seed": derive_seed(self.seed, "relearn")})
        return {"train": train_cfg, "method": method_cfg, "relearn": relearn_cfg}

    @classmethod
    def from_json(cls, path) -> "ExperimentSpec":
        with open(path) as f:
            raw = json.load(f)
        if raw.get("schema_version", SPEC_SCHEMA_VERSION) != SPEC_SCHEMA_VERSION:
            raise ValueError(f"unsupported spec schema version in {path}")
        return cls(**raw)

    def to_json(self, path) -> str:
        with open(path, "w") as f:
            json.dump(dataclasses.asdict(self), f, indent=2, sort_keys=True)
            f.write("\n")
        return str(path)


def derive_seed(master: int, purpose: str) -> int:
    """Deterministic sub-seed; keeps stages decoupled under one master seed."""
    digest = hashlib.sha256(f"{master}:{purpose}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


def _cache_model(path, builder) -> ModelBundle:
    if os.path.exists(path):
        return load_checkpoint(path)
    bundle = builder()
    save_checkpoint(bundle, path)
    return bundle


def _train_cache_dir(spec: ExperimentSpec) -> str:
    d = os.path.join(spec.output_dir, "cache")
    os.makedirs(d, exist_ok=True)
    return d


def get_original_model(spec: ExperimentSpec, train_data, test_data) -> ModelBundle:
    cfg = spec.resolved_configs()["train"]
    key = hashlib.sha256(json.dumps(
        ["original", spec.dataset, spec.arch_id, cfg.to_dict()], sort_keys=True
    ).encode()).hexdigest()[:16]
    path = os.path.join(_train_cache_dir(spec), f"original-{key}.ckpt")
    return _cache_model(path, lambda: train_classifier(
        train_data, spec.arch_id, cfg, eval_data=test_data, provenance="original"))


def get_retrained_model(spec: ExperimentSpec, train_data, test_data) -> ModelBundle:
    cfg = spec.resolved_configs()["train"]
    key = hashlib.sha256(json.dumps(
        ["retrained", spec.dataset, spec.arch_id, cfg.to_dict(), list(spec.forget_classes)],
        sort_keys=True).encode()).hexdigest()[:16]
    path = os.path.join(_train_cache_dir(spec), f"retrained-{key}.ckpt")
    retain_train = partition(train_data, spec.forget_classes).retain_view
    return _cache_model(path, lambda: train_classifier(
        retain_train, spec.arch_id, cfg, eval_data=test_data, provenance="retrained"))


def _attach_ain(report, spec, unlearned, original, gold, train_data, test_part):
    configs = spec.resolved_configs()
    original_forget_acc = evaluate(original, test_part.forget_view)
    relearn_cfg = configs["relearn"]
    run_u = relearn_time(unlearned, train_data, spec.forget_classes,
                         original_forget_acc, relearn_cfg,
                         forget_eval=test_part.forget_view)
    run_s = relearn_time(gold, train_data, spec.forget_classes,
                         original_forget_acc, relearn_cfg,
                         forget_eval=test_part.forget_view)
    ain = anamnesis_index(run_u, run_s)
    report.ain = ain.ain
    report.ain_bounded = ain.bounded
    report.relearn_steps_u = run_u.steps
    report.relearn_steps_s = run_s.steps


def _attach_mia(report, spec, unlearned, train_data, test_data):
    train_part = partition(train_data, spec.forget_classes)
    report.mia = attacks.membership_inference(
        unlearned, train_data, test_data,
        {"train": train_data, "test": test_data,
         "retain": train_part.retain_view, "forget": train_part.forget_view})


def _attach_inversion(report, spec, unlearned):
    cfg = attacks.InversionConfig(target_class=spec.forget_classes[0],
                                  seed=derive_seed(spec.seed, "inversion"))
    images, confidences = attacks.invert(unlearned, cfg)
    report.inversion = {"target_class": cfg.target_class,
                        "mean_self_confidence": float(np.mean(confidences)),
                        "num_attacks": cfg.num_attacks}
    report.extra["inversion_images"] = images


def run_experiment(spec: ExperimentSpec, data_root=None, force=False) -> EvalReport:
    """Execute the pipeline for one spec; reuses cached results when present."""
    out_dir = os.path.join(spec.output_dir, spec.spec_hash())
    report_path = os.path.join(out_dir, "report.json")
    if not force and os.path.exists(report_path):
        return load_report(report_path)
    os.makedirs(out_dir, exist_ok=True)
    spec.to_json(os.path.join(out_dir, "spec.json"))
    started = time.time()

    train_data = load_dataset(spec.dataset, "train", root=data_root)
    test_data = load_dataset(spec.dataset, "test", root=data_root)
    test_part = partition(test_data, spec.forget_classes)
    stage = "train-original"
    try:
        original = get_original_model(spec, train_data, test_data)
        gold = get_retrained_model(spec, train_data, test_data)
        stage = f"unlearn-{spec.method}"
        configs = spec.resolved_configs()
        if spec.method == "retrain":
            unlearned = gold
            report = EvalReport(method="retrain", forget_classes=spec.forget_classes,
                                d_r_acc=evaluate(gold, test_part.retain_view),
                                d_f_acc=evaluate(gold, test_part.forget_view),
                                config=configs["train"].to_dict())
        elif spec.method == "minmax":
            unlearned, report = minmax.run_minmax(original, test_part, configs["method"])
        else:
            unlearned, state, report = gkt.run_gkt(original, test_part, configs["method"])
            emit_curves(state, os.path.join(out_dir, "gkt"))
        save_checkpoint(unlearned, os.path.join(out_dir, "unlearned.ckpt"))

        if spec.include_ain:
            stage = "relearn-ain"
            _attach_ain(report, spec, unlearned, original, gold, train_data, test_part)
        if spec.include_mia:
            stage = "attack-mia"
            _attach_mia(report, spec, unlearned, train_data, test_data)
        if spec.include_inversion:
            stage = "attack-inversion"
            _attach_inversion(report, spec, unlearned)
    except Exception as err:
        report = EvalReport(method=spec.method, forget_classes=spec.forget_classes,
                            d_r_acc=0.0, d_f_acc=0.0, failure_stage=stage)
        report.extra["error"] = f"{type(err).__name__}: {err}"
        report.experiment_id = spec.spec_hash()
        save_report(report, report_path)
        raise
    report.experiment_id = spec.spec_hash()
    report.wall_clock = time.time() - started
    save_report(report, report_path)
    metrics.write_report_csv([report], os.path.join(out_dir, "report.csv"))
    return report


def _json_safe(value):
    if isinstance(value, (str, int, float, bool)) or value is None:
        return value
    if isinstance(value, (list, tuple)):
        return [_json_safe(v) for v in value]
    if isinstance(value, dict):
        return {str(k): _json_safe(v) for k, v in value.items()}
    if isinstance(value, (np.integer, np.floating)):
        return value.item()
    if dataclasses.is_dataclass(value):
        return _json_safe(dataclasses.asdict(value))
    return None


def save_report(report: EvalReport, path) -> str:
    payload = {k: _json_safe(v) for k, v in dataclasses.asdict(report).items()
               if k != "extra"}
    payload["extra"] = {k: _json_safe(v) for k, v in report.extra.items()
                        if _json_safe(v) is not None}
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")
    return str(path)


def load_report(path) -> EvalReport:
    with open(path) as f:
        raw = json.load(f)
    mia = raw.pop("mia", None)
    report = EvalReport(
        method=raw["method"], forget_classes=tuple(raw["forget_classes"]),
        d_r_acc=raw["d_r_acc"], d_f_acc=raw["d_f_acc"],
        experiment_id=raw.get("experiment_id", ""),
        ain=raw.get("ain"), ain_bounded=raw.get("ain_bounded"),
        relearn_steps_u=raw.get("relearn_steps_u"),
        relearn_steps_s=raw.get("relearn_steps_s"),
        inversion=raw.get("inversion"),
        unlearn_phase_reads=raw.get("unlearn_phase_reads", 0),
        wall_clock=raw.get("wall_clock", 0.0), config=raw.get("config", {}),
        failure_stage=raw.get("failure_stage"), extra=raw.get("extra", {}))
    if mia is not None:
        report.mia = attacks.MIAResult(**{k: v for k, v in mia.items()})
    return report


def report_values(report: EvalReport) -> dict:
    """The deterministic payload of a report (timings excluded)."""
    values = {
        "method": report.method,
        "forget_classes": tuple(report.forget_classes),
        "d_r_acc": report.d_r_acc,
        "d_f_acc": report.d_f_acc,
        "ain": report.ain,
        "relearn_steps_u": report.relearn_steps_u,
        "relearn_steps_s": report.relearn_steps_s,
        "unlearn_phase_reads": report.unlearn_phase_reads,
    }
    if report.mia is not None:
        values["mia"] = tuple(sorted(report.mia.attack_probabilities.items()))
    if report.inversion is not None:
        values["inversion_conf"] = report.inversion.get("mean_self_confidence")
    return values


def run_per_class_sweep(dataset: str, arch_id: str, method: str, base_spec: dict,
                        classes=None, output_dir="runs") -> list[dict]:
    """Unlearn each class independently and compare retain accuracy with the
    per-class retrained gold model. Per-class failures are isolated."""
    if classes is None:
        probe = load_dataset(dataset, "test")
        classes = range(probe.num_classes)
    classes = list(classes)
    rows = []
    for class_id in classes:
        row = {"class": class_id}
        try:
            kwargs = {**base_spec, "dataset": dataset, "arch_id": arch_id,
                      "forget_classes": (class_id,), "output_dir": output_dir}
            method_report = run_experiment(ExperimentSpec(method=method, **kwargs))
            gold_report = run_experiment(ExperimentSpec(method="retrain", **kwargs))
            row.update({
                "d_f_acc": method_report.d_f_acc,
                "d_r_acc": method_report.d_r_acc,
                "retrain_d_r_acc": gold_report.d_r_acc,
                "d_r_deviation": gold_report.d_r_acc - method_report.d_r_acc,
            })
        except Exception as err:
            row["error"] = f"{type(err).__name__}: {err}"
        rows.append(row)
    return rows


def emit_results_table(reports, csv_path, text_path=None) -> str:
    """Fixed-column CSV plus an aligned text rendering of the same rows."""
    if not reports:
        raise ValueError("no reports to emit")
    metrics.write_report_csv(reports, csv_path)
    lines = ["  ".join(f"{c:>16}" for c in metrics.REPORT_COLUMNS)]
    for report in reports:
        row = report.csv_row()
        lines.append("  ".join(f"{row[c]:>16}" for c in metrics.REPORT_COLUMNS))
    text = "\n".join(lines) + "\n"
    if text_path:
        with open(text_path, "w") as f:
            f.write(text)
    return text


def emit_curves(state, out_prefix) -> dict:
    """Write the per-epoch accuracy curves as CSV and a plot with the
    selected-checkpoint marker."""
    if not state.curves:
        raise ValueError("no curve points recorded")
    csv_path = f"{out_prefix}_curves.csv"
    with open(csv_path, "w") as f:
        f.write("epoch,d_r_acc,d_f_acc,pass_rate\n")
        for p in state.curves:
            f.write(f"{p.epoch},{p.retain_acc:.4f},{p.forget_acc:.4f},{p.pass_rate:.6f}\n")

    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    epochs = [p.epoch for p in state.curves]
    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax.plot(epochs, [p.retain_acc for p in state.curves], label="retain accuracy")
    ax.plot(epochs, [p.forget_acc for p in state.curves], label="forget accuracy")
    selected = state.fallback_epoch if state.selection_failed else state.best_epoch
    if selected >= 0:
        ax.axvline(selected, color="gray", linestyle="--",
                   label=f"selected checkpoint (epoch {selected})")
    ax.set_xlabel("epoch")
    ax.set_ylabel("accuracy (%)")
    ax.set_ylim(-2, 102)
    ax.legend(loc="center right")
    fig.tight_layout()
    png_path = f"{out_prefix}_curves.png"
    fig.savefig(png_path, dpi=120)
    plt.close(fig)
    return {"csv": csv_path, "png": png_path}
