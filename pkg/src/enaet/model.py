"""Siamese encoder, classifier head and per-family transformation decoders."""
from __future__ import annotations

import contextlib
import copy
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .transforms import FAMILIES, FAMILY_DOF

BN_MOMENTUM = 0.01  # torch convention: running = 0.99 * running + 0.01 * batch


class Block(nn.Module):
    """Pre-activation residual block (two 3x3 convs)."""

    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        self.bn1 = nn.BatchNorm2d(in_ch, momentum=BN_MOMENTUM)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch, momentum=BN_MOMENTUM)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False)
        self.shortcut = None
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False)

    def forward(self, x):
        o = F.relu(self.bn1(x))
        skip = x if self.shortcut is None else self.shortcut(o)
        o = self.conv1(o)
        o = self.conv2(F.relu(self.bn2(o)))
        return o + skip


class Encoder(nn.Module):
    """Stem conv followed by three stages; the last two halve the resolution."""

    def __init__(self, in_ch: int, widths: tuple[int, int, int], mean=None, std=None):
        super().__init__()
        mean = torch.zeros(in_ch) if mean is None else torch.as_tensor(mean, dtype=torch.float32)
        std = torch.ones(in_ch) if std is None else torch.as_tensor(std, dtype=torch.float32)
        self.register_buffer("input_mean", mean.reshape(1, -1, 1, 1).clone())
        self.register_buffer("input_std", std.reshape(1, -1, 1, 1).clone())
        self.stem = nn.Conv2d(in_ch, widths[0], 3, padding=1, bias=False)
        self.stages = nn.Sequential(
            Block(widths[0], widths[0], 1),
            Block(widths[0], widths[1], 2),
            Block(widths[1], widths[2], 2),
        )
        self.out_channels = widths[2]

    def forward(self, x):
        x = (x - self.input_mean) / self.input_std
        return self.stages(self.stem(x))


class Head(nn.Module):
    """Final block + global average pool + linear layer.

    Used for the classifier and, with doubled input width, for every decoder.
    """

    def __init__(self, in_ch: int, width: int, out_dim: int):
        super().__init__()
        self.block = Block(in_ch, width, 1)
        self.bn = nn.BatchNorm2d(width, momentum=BN_MOMENTUM)
        self.fc = nn.Linear(width, out_dim)

    def forward(self, x):
        x = F.relu(self.bn(self.block(x)))
        return self.fc(x.mean(dim=(2, 3)))


class Classifier(nn.Module):
    """Encoder + classifier head; this is also the teacher's architecture."""

    def __init__(self, encoder: Encoder, head: Head):
        super().__init__()
        self.encoder = encoder
        self.head = head

    def forward(self, x):
        return self.head(self.encoder(x))


class EnAETNet(nn.Module):
    def __init__(self, in_ch: int, num_classes: int, widths=(16, 32, 64, 64), mean=None, std=None):
        super().__init__()
        if len(widths) != 4 or min(widths) < 1:
            raise ValueError(f"widths must be 4 positive ints, got {widths}")
        self.encoder = Encoder(in_ch, tuple(widths[:3]), mean, std)
        self.classifier = Head(widths[2], widths[3], num_classes)
        self.decoders = nn.ModuleList(Head(2 * widths[2], widths[3], d) for d in FAMILY_DOF)

    def student(self) -> Classifier:
        # Shares modules with self: parameters are the same tensors.
        return Classifier(self.encoder, self.classifier)

    def main_parameters(self):
        return list(self.encoder.parameters()) + list(self.classifier.parameters())


@dataclass
class ModelConfig:
    in_channels: int = 3
    num_classes: int = 4
    widths: tuple[int, int, int, int] = (16, 32, 64, 64)
    dtype: str = "float32"


@dataclass
class ModelState:
    net: EnAETNet
    teacher: Classifier
    opt_main: torch.optim.Optimizer
    opt_dec: torch.optim.Optimizer
    step: int = 0
    rngs: dict = field(default_factory=dict)

    @property
    def student(self) -> Classifier:
        return self.net.student()


def torch_dtype(name: str) -> torch.dtype:
    return {"float32": torch.float32, "float64": torch.float64}[name]


def _init_weights(module: nn.Module, gen: torch.Generator) -> None:
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1] // m.groups
            with torch.no_grad():
                m.weight.normal_(0.0, (2.0 / fan_in) ** 0.5, generator=gen)
        elif isinstance(m, nn.Linear):
            bound = 1.0 / m.in_features**0.5
            with torch.no_grad():
                m.weight.uniform_(-bound, bound, generator=gen)
                m.bias.zero_()
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


def make_optimizers(net: EnAETNet, lr_main: float, lr_dec: float, weight_decay_dec: float, momentum: float = 0.9):
    opt_main = torch.optim.Adam(net.main_parameters(), lr=lr_main)
    opt_dec = torch.optim.SGD(net.decoders.parameters(), lr=lr_dec, momentum=momentum, weight_decay=weight_decay_dec)
    return opt_main, opt_dec


def init_model(
    cfg: ModelConfig,
    seed: int,
    mean=None,
    std=None,
    lr_main: float = 0.002,
    lr_dec: float = 0.1,
    weight_decay_dec: float = 5e-4,
) -> ModelState:
    """Fan-in scaled initialization; the teacher starts as an exact copy."""
    if cfg.num_classes < 2 or cfg.in_channels < 1:
        raise ValueError("need at least 2 classes and 1 input channel")
    gen = torch.Generator().manual_seed(int(seed))
    net = EnAETNet(cfg.in_channels, cfg.num_classes, cfg.widths, mean, std)
    _init_weights(net, gen)
    net = net.to(torch_dtype(cfg.dtype))
    teacher = copy.deepcopy(net.student())
    for p in teacher.parameters():
        p.requires_grad_(False)
    opt_main, opt_dec = make_optimizers(net, lr_main, lr_dec, weight_decay_dec)
    return ModelState(net, teacher, opt_main, opt_dec)


def encode(model: Classifier | EnAETNet, images: torch.Tensor) -> torch.Tensor:
    enc = model.encoder
    expected = enc.input_mean.shape[1]
    if images.ndim != 4 or images.shape[1] != expected:
        raise ValueError(f"expected (B, {expected}, H, W) images, got {tuple(images.shape)}")
    return enc(images)


def classify_logits(model: Classifier | EnAETNet, features: torch.Tensor) -> torch.Tensor:
    head = model.head if isinstance(model, Classifier) else model.classifier
    if features.ndim != 4 or features.shape[1] != head.block.conv1.in_channels:
        raise ValueError(f"feature shape {tuple(features.shape)} does not match classifier")
    return head(features)


def classify(model: Classifier | EnAETNet, features: torch.Tensor) -> torch.Tensor:
    """Class probabilities (softmax rows)."""
    return torch.softmax(classify_logits(model, features), dim=1)


def decode_transform(net: EnAETNet, k: int, feat_orig: torch.Tensor, feat_trans: torch.Tensor) -> torch.Tensor:
    """Decoder ``k`` applied to the channel concatenation ``[feat_orig, feat_trans]``."""
    if not 0 <= k < len(FAMILIES):
        raise ValueError(f"invalid family index {k}")
    if feat_orig.shape != feat_trans.shape:
        raise ValueError("feature maps must share a shape")
    return net.decoders[k](torch.cat([feat_orig, feat_trans], dim=1))


@contextlib.contextmanager
def frozen_running_stats(module: nn.Module):
    """Batch norm keeps normalizing with batch statistics but its running averages stay put."""
    bns = [m for m in module.modules() if isinstance(m, nn.modules.batchnorm._BatchNorm)]
    saved = [m.momentum for m in bns]
    for m in bns:
        m.momentum = 0.0
    try:
        yield module
    finally:
        for m, mom in zip(bns, saved):
            m.momentum = mom


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def predict(model: Classifier, images: torch.Tensor, batch_size: int = 256) -> np.ndarray:
    """Eval-mode argmax predictions; restores the module's previous mode."""
    was_training = model.training
    model.eval()
    out = []
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            out.append(model(images[i : i + batch_size]).argmax(dim=1))
    model.train(was_training)
    return torch.cat(out).numpy() if out else np.zeros(0, dtype=np.int64)
