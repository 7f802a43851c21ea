"""Privacy-leakage probes: model inversion and membership inference.

Inversion reconstructs class-representative inputs by gradient descent from
a near-zero start, with a periodic smoothing step that steers the search
toward recognizable images. Membership inference fits a binary classifier
on the entropy of the target model's output probabilities, train samples
against test samples, and reports the mean attack probability per split.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .models import ModelBundle, to_torch


def entropy(probs) -> float:
    """Shannon entropy, natural log, with 0*log(0) taken as 0."""
    p = np.asarray(probs, dtype=np.float64)
    if abs(p.sum() - 1.0) > 1e-6:
        raise ValueError(f"probabilities sum to {p.sum()}, not 1")
    nonzero = p[p > 0]
    return float(-(nonzero * np.log(nonzero)).sum())


def batch_entropies(bundle: ModelBundle, dataset, batch_size=512) -> np.ndarray:
    """Output-probability entropy of every sample in the dataset."""
    bundle.net.eval()
    values = []
    with torch.no_grad():
        for images, _ in dataset.batches(batch_size):
            probs = torch.softmax(bundle.logits(images), dim=-1).numpy()
            probs = np.clip(probs, 1e-12, 1.0)
            values.append(-(probs * np.log(probs)).sum(axis=1))
    return np.concatenate(values)


@dataclass
class InversionConfig:
    target_class: int = 0
    steps: int = 400
    lr: float = 0.1
    process_every_n: int = 20
    blur_sigma: float = 0.8
    init_noise_scale: float = 0.01
    num_attacks: int = 12
    max_restarts: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.process_every_n < 1:
            raise ValueError("process_every_n must be >= 1")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")


def _smooth_and_clip(image: np.ndarray, sigma: float, value_range) -> np.ndarray:
    from scipy.ndimage import gaussian_filter

    # Blur spatial dims only; channels stay independent.
    smoothed = gaussian_filter(image, sigma=(0, sigma, sigma, 0))
    return np.clip(smoothed, value_range[0], value_range[1])


def _single_inversion(bundle: ModelBundle, config: InversionConfig,
                      rng: np.random.Generator) -> tuple[np.ndarray, float]:
    h, w, c = bundle.input_shape
    loss_fn = nn.CrossEntropyLoss()
    label = torch.tensor([config.target_class])
    for _attempt in range(config.max_restarts + 1):
        image = (rng.standard_normal((1, h, w, c)) * config.init_noise_scale).astype(np.float32)
        ok = True
        for step in range(config.steps):
            x = torch.from_numpy(image.transpose(0, 3, 1, 2)).requires_grad_(True)
            loss = loss_fn(bundle.net(x), label)
            loss.backward()
            with torch.no_grad():
                x -= config.lr * x.grad
            image = x.detach().numpy().transpose(0, 2, 3, 1)
            if not np.isfinite(image).all():
                ok = False
                break
            if (step + 1) % config.process_every_n == 0:
                image = _smooth_and_clip(image, config.blur_sigma, bundle.value_range)
        if ok:
            image = np.clip(image, *bundle.value_range)
            with torch.no_grad():
                probs = torch.softmax(bundle.logits(image), dim=-1)
            return image[0], float(probs[0, config.target_class])
    raise RuntimeError(f"inversion diverged {config.max_restarts + 1} times")


def invert(bundle: ModelBundle, config: InversionConfig) -> tuple[np.ndarray, list]:
    """Run independent inversion attacks; returns images and the model's own
    target-class confidence on each reconstruction."""
    if config.target_class >= bundle.num_classes:
        raise ValueError(f"target_class {config.target_class} >= {bundle.num_classes}")
    before = bundle.parameter_hash()
    bundle.net.eval()
    for p in bundle.net.parameters():
        p.requires_grad_(False)
    images, confidences = [], []
    for run in range(config.num_attacks):
        rng = np.random.default_rng((config.seed, run))
        image, conf = _single_inversion(bundle, config, rng)
        images.append(image)
        confidences.append(conf)
    for p in bundle.net.parameters():
        p.requires_grad_(True)
    assert bundle.parameter_hash() == before, "inversion mutated the target model"
    return np.stack(images), confidences


def probe_confidence(probe: ModelBundle, images: np.ndarray, target_class: int) -> float:
    """Mean target-class probability an independent classifier assigns to images."""
    probe.net.eval()
    with torch.no_grad():
        probs = torch.softmax(probe.logits(images.astype(np.float32)), dim=-1)
    return float(probs[:, target_class].mean())


@dataclass
class MIAResult:
    attack_probabilities: dict
    attack_train_accuracy: float
    degenerate: bool
    weak: bool
    classifier: str = "logistic-regression on output-entropy"
    extra: dict = field(default_factory=dict)


def membership_inference(bundle: ModelBundle, train_view, test_view,
                         eval_views: dict) -> MIAResult:
    """Entropy-feature membership attack.

    Fits logistic regression with train samples labeled member and test
    samples labeled non-member, then reports the mean predicted membership
    probability on each evaluation view.
    """
    from sklearn.linear_model import LogisticRegression

    if len(train_view) == 0 or len(test_view) == 0:
        raise ValueError("train and test views must be nonempty")
    feats_train = batch_entropies(bundle, train_view)
    feats_test = batch_entropies(bundle, test_view)
    features = np.concatenate([feats_train, feats_test]).reshape(-1, 1)
    labels = np.concatenate([np.ones(len(feats_train)), np.zeros(len(feats_test))])
    degenerate = bool(np.ptp(features) < 1e-9)

    clf = LogisticRegression(max_iter=1000)
    clf.fit(features, labels)
    train_acc = float(clf.score(features, labels))
    probabilities = {}
    for name, view in eval_views.items():
        feats = batch_entropies(bundle, view).reshape(-1, 1)
        probabilities[name] = float(clf.predict_proba(feats)[:, 1].mean())
    return MIAResult(attack_probabilities=probabilities,
                     attack_train_accuracy=train_acc,
                     degenerate=degenerate,
                     weak=train_acc < 0.5)
