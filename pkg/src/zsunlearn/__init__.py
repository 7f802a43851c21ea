"""Zero-shot class-level machine unlearning toolkit."""

from .data import (ClassPartition, LabeledDataset, ZeroShotViolation,
                   load_dataset, partition, synthetic_dataset)
from .gkt import (GKTConfig, GKTState, attention_loss, band_pass_filter,
                  js_divergence, kl_divergence, run_gkt, run_sequential_gkt)
from .harness import ExperimentSpec, run_experiment, run_per_class_sweep
from .metrics import (AINReport, EvalReport, RelearnConfig, RelearnResult,
                      anamnesis_index, interpret_ain, relearn_time)
from .minmax import (MinMaxConfig, NoiseBank, impair, learn_max_noise,
                     learn_min_noise, run_minmax)
from .models import (GeneratorNet, ModelBundle, TrainConfig, evaluate,
                     forward_probs, load_checkpoint, save_checkpoint,
                     train_classifier)

__version__ = "0.1.0"

__all__ = [
    "AINReport", "ClassPartition", "EvalReport", "ExperimentSpec", "GKTConfig",
    "GKTState", "GeneratorNet", "LabeledDataset", "MinMaxConfig", "ModelBundle",
    "NoiseBank", "RelearnConfig", "RelearnResult", "TrainConfig",
    "ZeroShotViolation", "anamnesis_index", "attention_loss",
    "band_pass_filter", "evaluate", "forward_probs", "impair", "interpret_ain",
    "js_divergence", "kl_divergence", "learn_max_noise", "learn_min_noise",
    "load_checkpoint", "load_dataset", "partition", "relearn_time",
    "run_experiment", "run_gkt", "run_minmax", "run_per_class_sweep",
    "run_sequential_gkt", "save_checkpoint", "synthetic_dataset",
    "train_classifier",
]
