"""Model zoo, supervised training, evaluation, and checkpoint persistence.

Three small classifier architectures plus the upsampling generator used for
data-free knowledge transfer. A trained classifier travels as a ModelBundle:
network weights plus everything needed to rebuild and audit it (architecture
id, class count, input shape, normalization range, provenance, training
metadata).
"""

from __future__ import annotations

import copy
import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

PROVENANCES = ("original", "retrained", "unlearned-minmax", "unlearned-gkt")


class TrainingDiverged(RuntimeError):
    """Loss became non-finite during optimization."""


class CheckpointError(RuntimeError):
    pass


class ChecksumMismatch(CheckpointError):
    pass


class ArchMismatch(CheckpointError):
    pass


def to_torch(images: np.ndarray) -> torch.Tensor:
    """(N, H, W, C) float numpy -> (N, C, H, W) float32 tensor."""
    return torch.from_numpy(np.ascontiguousarray(images.transpose(0, 3, 1, 2)))


@dataclass
class ActivationTrace:
    """Per-layer activation blocks captured at an architecture's trace points."""

    layer_names: tuple
    blocks: list

    def detach(self) -> "ActivationTrace":
        return ActivationTrace(self.layer_names, [b.detach() for b in self.blocks])


def _conv_bn(c_in, c_out, stride=1):
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1),
        nn.BatchNorm2d(c_out),
        nn.ReLU(inplace=True),
    )


class AllConvNet(nn.Module):
    """All-convolutional classifier, desk-scale channel counts.

    Two stride-2 stages then a 1x1 head with global average pooling. Trace
    points are the outputs of the two downsampling stages.
    """

    trace_layers = ("stage1", "stage2")

    def __init__(self, in_channels, num_classes):
        super().__init__()
        self.stage1 = nn.Sequential(
            _conv_bn(in_channels, 48), _conv_bn(48, 48), _conv_bn(48, 48, stride=2))
        self.stage2 = nn.Sequential(
            _conv_bn(48, 96), _conv_bn(96, 96), _conv_bn(96, 96, stride=2))
        self.head = nn.Sequential(
            _conv_bn(96, 96),
            nn.Conv2d(96, 96, 1), nn.BatchNorm2d(96), nn.ReLU(inplace=True),
            nn.Conv2d(96, num_classes, 1))

    def forward(self, x):
        return self.forward_with_traces(x)[0]

    def forward_with_traces(self, x):
        a1 = self.stage1(x)
        a2 = self.stage2(a1)
        logits = self.head(a2).mean(dim=(2, 3))
        return logits, ActivationTrace(self.trace_layers, [a1, a2])


class LeNetSmall(nn.Module):
    """Two conv/pool stages and a small fully connected head."""

    trace_layers = ("pool1", "pool2")

    def __init__(self, in_channels, num_classes, input_hw):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, 8, 5, padding=2)
        self.conv2 = nn.Conv2d(8, 16, 5, padding=2)
        self.pool = nn.MaxPool2d(2)
        h, w = (input_hw[0] // 4, input_hw[1] // 4)
        self.fc1 = nn.Linear(16 * h * w, 64)
        self.fc2 = nn.Linear(64, num_classes)

    def forward(self, x):
        return self.forward_with_traces(x)[0]

    def forward_with_traces(self, x):
        a1 = self.pool(torch.relu(self.conv1(x)))
        a2 = self.pool(torch.relu(self.conv2(a1)))
        z = torch.relu(self.fc1(a2.flatten(1)))
        return self.fc2(z), ActivationTrace(self.trace_layers, [a1, a2])


class _Residual(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.block = nn.Sequential(_conv_bn(channels, channels), _conv_bn(channels, channels))

    def forward(self, x):
        return x + self.block(x)


class ResNet9Small(nn.Module):
    """Nine-layer residual classifier with halved channel widths."""

    trace_layers = ("stage1", "stage2", "stage3")

    def __init__(self, in_channels, num_classes):
        super().__init__()
        self.prep = _conv_bn(in_channels, 32)
        self.stage1 = nn.Sequential(_conv_bn(32, 64), nn.MaxPool2d(2), _Residual(64))
        self.stage2 = nn.Sequential(_conv_bn(64, 128), nn.MaxPool2d(2), _Residual(128))
        self.stage3 = nn.Sequential(_conv_bn(128, 256), nn.MaxPool2d(2))
        self.pool = nn.AdaptiveMaxPool2d(1)
        self.fc = nn.Linear(256, num_classes)

    def forward(self, x):
        return self.forward_with_traces(x)[0]

    def forward_with_traces(self, x):
        a1 = self.stage1(self.prep(x))
        a2 = self.stage2(a1)
        a3 = self.stage3(a2)
        logits = self.fc(self.pool(a3).flatten(1))
        return logits, ActivationTrace(self.trace_layers, [a1, a2, a3])


ARCH_IDS = ("allcnn-small", "lenet-small", "resnet9-small")


def build_arch(arch_id: str, input_shape, num_classes: int) -> nn.Module:
    h, w, c = input_shape
    if arch_id == "allcnn-small":
        return AllConvNet(c, num_classes)
    if arch_id == "lenet-small":
        return LeNetSmall(c, num_classes, (h, w))
    if arch_id == "resnet9-small":
        return ResNet9Small(c, num_classes)
    raise ArchMismatch(f"unknown arch_id {arch_id!r}; known: {ARCH_IDS}")


class GeneratorNet(nn.Module):
    """Latent-to-image generator: linear projection to a quarter-resolution
    feature map, two upsample+conv blocks, and a final conv bounded to the
    dataset's value range with tanh.
    """

    def __init__(self, latent_dim, output_shape, value_range=(0.0, 1.0)):
        super().__init__()
        h, w, c = output_shape
        if h % 4 or w % 4:
            raise ValueError(f"output spatial dims must be divisible by 4, got {h}x{w}")
        self.latent_dim = latent_dim
        self.output_shape = tuple(output_shape)
        self.value_range = (float(value_range[0]), float(value_range[1]))
        self.base_hw = (h // 4, w // 4)
        self.project = nn.Linear(latent_dim, 128 * self.base_hw[0] * self.base_hw[1])
        self.bn0 = nn.BatchNorm2d(128)
        self.block1 = nn.Sequential(
            nn.Upsample(scale_factor=2),
            nn.Conv2d(128, 128, 3, padding=1),
            nn.BatchNorm2d(128),
            nn.LeakyReLU(0.2, inplace=True))
        self.block2 = nn.Sequential(
            nn.Upsample(scale_factor=2),
            nn.Conv2d(128, 64, 3, padding=1),
            nn.BatchNorm2d(64),
            nn.LeakyReLU(0.2, inplace=True))
        self.to_image = nn.Sequential(
            nn.Conv2d(64, c, 3, padding=1),
            nn.BatchNorm2d(c))

    def forward(self, z):
        x = self.project(z).view(-1, 128, *self.base_hw)
        x = self.block2(self.block1(self.bn0(x)))
        x = torch.tanh(self.to_image(x))
        lo, hi = self.value_range
        return lo + (x + 1.0) * 0.5 * (hi - lo)


@dataclass
class ModelBundle:
    """A classifier plus the metadata needed to rebuild and audit it."""

    arch_id: str
    net: nn.Module
    num_classes: int
    input_shape: tuple
    value_range: tuple = (0.0, 1.0)
    provenance: str = "original"
    training_meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")

    def logits(self, images) -> torch.Tensor:
        if isinstance(images, np.ndarray):
            images = to_torch(images)
        return self.net(images)

    def parameter_hash(self) -> str:
        h = hashlib.sha256()
        for name, tensor in sorted(self.net.state_dict().items()):
            h.update(name.encode())
            h.update(tensor.detach().cpu().numpy().tobytes())
        return h.hexdigest()

    def clone(self, provenance=None) -> "ModelBundle":
        return ModelBundle(self.arch_id, copy.deepcopy(self.net), self.num_classes,
                           self.input_shape, self.value_range,
                           provenance or self.provenance, dict(self.training_meta))

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.net.parameters())


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 256
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0
    seed: int = 0

    def to_dict(self):
        return dict(self.__dict__)


def train_classifier(dataset, arch_id, config: TrainConfig,
                     eval_data=None, provenance="original") -> ModelBundle:
    """Train a classifier with SGD + momentum and record final accuracies.

    Raises TrainingDiverged on a non-finite loss.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    torch.manual_seed(config.seed)
    net = build_arch(arch_id, dataset.image_shape, dataset.num_classes)
    bundle = ModelBundle(arch_id, net, dataset.num_classes, dataset.image_shape,
                         dataset.value_range, provenance)
    opt = torch.optim.SGD(net.parameters(), lr=config.lr, momentum=config.momentum,
                          weight_decay=config.weight_decay)
    loss_fn = nn.CrossEntropyLoss()
    rng = np.random.default_rng(config.seed)
    net.train()
    for epoch in range(config.epochs):
        for images, labels in dataset.batches(config.batch_size, shuffle=True, rng=rng):
            opt.zero_grad()
            loss = loss_fn(net(to_torch(images)), torch.from_numpy(labels))
            if not torch.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch} (lr={config.lr})")
            loss.backward()
            opt.step()
    bundle.training_meta = {
        "config": config.to_dict(),
        "train_accuracy": evaluate(bundle, dataset),
        "trained_on": dataset.name,
    }
    if eval_data is not None:
        bundle.training_meta["test_accuracy"] = evaluate(bundle, eval_data)
    return bundle


@torch.no_grad()
def evaluate(bundle: ModelBundle, dataset, batch_size=512) -> float:
    """Top-1 accuracy as a percentage; deterministic for fixed model+data."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty view")
    was_training = bundle.net.training
    bundle.net.eval()
    correct = 0
    for images, labels in dataset.batches(batch_size):
        pred = bundle.logits(images).argmax(dim=1).numpy()
        correct += int((pred == labels).sum())
    if was_training:
        bundle.net.train()
    return 100.0 * correct / len(dataset)


def forward_probs(bundle: ModelBundle, batch, temperature=1.0) -> torch.Tensor:
    """Temperature-scaled class probabilities; rows sum to 1."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    logits = bundle.logits(batch)
    if not torch.isfinite(logits).all():
        raise ValueError("non-finite logits")
    return torch.softmax(logits / temperature, dim=-1)


_CKPT_MAGIC = b"ZSUNCKPT"
_CKPT_VERSION = 1


def save_checkpoint(bundle: ModelBundle, path) -> str:
    """Write header + parameter blob + sha256 digest; round-trip is bit-exact."""
    state = bundle.net.state_dict()
    manifest, chunks = [], []
    for name in sorted(state):
        arr = state[name].detach().cpu().numpy()
        manifest.append({"name": name, "shape": list(arr.shape), "dtype": str(arr.dtype)})
        chunks.append(np.ascontiguousarray(arr).tobytes())
    header = json.dumps({
        "format_version": _CKPT_VERSION,
        "arch_id": bundle.arch_id,
        "num_classes": bundle.num_classes,
        "input_shape": list(bundle.input_shape),
        "value_range": list(bundle.value_range),
        "provenance": bundle.provenance,
        "training_meta": bundle.training_meta,
        "tensors": manifest,
    }, sort_keys=True).encode()
    blob = b"".join(chunks)
    digest = hashlib.sha256(header + blob).digest()
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        f.write(blob)
        f.write(digest)
    return str(path)


def load_checkpoint(path, expect_arch=None) -> ModelBundle:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[: len(_CKPT_MAGIC)] != _CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (header_len,) = struct.unpack("<Q", raw[8:16])
    header_end = 16 + header_len
    header_bytes = raw[16:header_end]
    blob, digest = raw[header_end:-32], raw[-32:]
    if hashlib.sha256(header_bytes + blob).digest() != digest:
        raise ChecksumMismatch(f"{path}: checksum mismatch, file corrupted")
    header = json.loads(header_bytes)
    if header["format_version"] != _CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version")
    if expect_arch is not None and header["arch_id"] != expect_arch:
        raise ArchMismatch(f"{path}: holds {header['arch_id']!r}, expected {expect_arch!r}")
    net = build_arch(header["arch_id"], header["input_shape"], header["num_classes"])
    state, offset = {}, 0
    for entry in header["tensors"]:
        dtype = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        end = offset + count * dtype.itemsize
        arr = np.frombuffer(blob[offset:end], dtype=dtype).reshape(entry["shape"]).copy()
        state[entry["name"]] = torch.from_numpy(arr)
        offset = end
    net.load_state_dict(state)
    return ModelBundle(header["arch_id"], net, header["num_classes"],
                       tuple(header["input_shape"]), tuple(header["value_range"]),
                       header["provenance"], header["training_meta"])
