"""Datasets: synthetic shapes, labeled/unlabeled splits, standard augmentation.

Images are stored as ``(N, H, W, C)`` float arrays in ``[0, 1]``.  Per-channel
mean/std of the training pool is recorded in ``DatasetSplit.metadata`` and
applied inside the network, so every image seen by the transforms stays in the
unit range.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

SHAPES = ("disk", "square", "cross", "ring")


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class LabeledSet:
    images: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)


@dataclass(frozen=True)
class UnlabeledSet:
    """Images only: the unlabeled pool carries no class field at all."""

    images: np.ndarray

    def __len__(self) -> int:
        return len(self.images)


@dataclass(frozen=True)
class DatasetSplit:
    labeled: LabeledSet
    unlabeled: UnlabeledSet
    test: LabeledSet
    num_classes: int
    split_seed: int
    labeled_indices: np.ndarray = field(repr=False)
    metadata: dict = field(default_factory=dict)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.test.images.shape[1:])


def channel_stats(images: np.ndarray) -> tuple[list[float], list[float]]:
    mean = images.mean(axis=(0, 1, 2))
    std = images.std(axis=(0, 1, 2))
    std = np.where(std < 1e-6, 1.0, std)
    return mean.tolist(), std.tolist()


def split_labels(
    train: LabeledSet, test: LabeledSet, n_labels: int, seed: int, num_classes: int | None = None
) -> DatasetSplit:
    """Pick ``n_labels`` class-balanced labeled examples; the rest become unlabeled.

    Each class contributes ``n_labels // num_classes`` examples.
    """
    if num_classes is None:
        num_classes = int(max(train.labels.max(), test.labels.max())) + 1
    if n_labels < num_classes or n_labels > len(train):
        raise DataError(f"n_labels={n_labels} infeasible for {len(train)} examples / {num_classes} classes")
    per_class = n_labels // num_classes
    rng = np.random.default_rng(seed)
    chosen = []
    for c in range(num_classes):
        idx = np.flatnonzero(train.labels == c)
        if len(idx) < per_class:
            raise DataError(f"class {c} has {len(idx)} examples, need {per_class}")
        chosen.append(rng.choice(idx, size=per_class, replace=False))
    labeled_idx = np.sort(np.concatenate(chosen))
    mask = np.ones(len(train), dtype=bool)
    mask[labeled_idx] = False
    mean, std = channel_stats(train.images)
    return DatasetSplit(
        labeled=LabeledSet(train.images[labeled_idx], train.labels[labeled_idx]),
        unlabeled=UnlabeledSet(train.images[mask]),
        test=test,
        num_classes=num_classes,
        split_seed=seed,
        labeled_indices=labeled_idx,
        metadata={"mean": mean, "std": std},
    )


# --------------------------------------------------------------------------
# Standard augmentation: horizontal flip + reflect-padded translation


def standard_augment(
    image: np.ndarray,
    rng: np.random.Generator | None = None,
    max_shift: int = 4,
    flip: bool | None = None,
    shift: tuple[int, int] | None = None,
) -> np.ndarray:
    """Random horizontal flip (p=0.5) and a shift of up to ``max_shift`` pixels.

    ``flip``/``shift`` override the random draws.
    """
    if flip is None:
        flip = bool(rng.random() < 0.5)
    if shift is None:
        shift = tuple(int(v) for v in rng.integers(-max_shift, max_shift + 1, size=2))
    img = image[:, ::-1] if flip else image
    dy, dx = shift
    h, w = img.shape[:2]
    pad = max(abs(dy), abs(dx))
    if pad == 0:
        return np.array(img, copy=True)
    padded = np.pad(img, ((pad, pad), (pad, pad), (0, 0)), mode="reflect")
    return padded[pad + dy : pad + dy + h, pad + dx : pad + dx + w].copy()


def augment_batch(images: torch.Tensor, rng: np.random.Generator, max_shift: int = 4) -> torch.Tensor:
    """``standard_augment`` applied independently to each image of a ``(B, C, H, W)`` batch."""
    b, _, h, w = images.shape
    flips = rng.random(b) < 0.5
    shifts = rng.integers(-max_shift, max_shift + 1, size=(b, 2))
    x = images.clone()
    if flips.any():
        idx = torch.as_tensor(np.flatnonzero(flips))
        x[idx] = x[idx].flip(-1)
    if max_shift == 0:
        return x
    p = max_shift
    padded = F.pad(x, (p, p, p, p), mode="reflect")
    rows = torch.as_tensor(p + shifts[:, 0])[:, None] + torch.arange(h)
    cols = torch.as_tensor(p + shifts[:, 1])[:, None] + torch.arange(w)
    bi = torch.arange(b)[:, None, None]
    # (B, H, W, C) gather, then back to channels-first
    out = padded.permute(0, 2, 3, 1)[bi, rows[:, :, None], cols[:, None, :]]
    return out.permute(0, 3, 1, 2).contiguous()


# --------------------------------------------------------------------------
# Synthetic shapes


@dataclass
class SyntheticConfig:
    num_classes: int = 4
    image_size: int = 32
    channels: int = 3
    train_per_class: int = 200
    test_per_class: int = 100
    radius_range: tuple[float, float] = (0.35, 0.45)
    center_jitter: float = 0.08
    noise: float = 0.04

    def validate(self) -> None:
        if not 1 <= self.num_classes <= len(SHAPES):
            raise DataError(f"num_classes must be in [1, {len(SHAPES)}]")
        if self.image_size < 8 or self.channels not in (1, 3):
            raise DataError("image_size must be >= 8 and channels 1 or 3")
        if self.train_per_class < 1 or self.test_per_class < 1:
            raise DataError("need at least one sample per class")


def _shape_mask(shape: str, x: np.ndarray, y: np.ndarray, r: float, angle: float, edge: float) -> np.ndarray:
    """Soft coverage in [0, 1] for a shape of radius ``r`` at the origin."""
    c, s = math.cos(angle), math.sin(angle)
    u, v = c * x + s * y, -s * x + c * y
    if shape == "disk":
        d = np.hypot(u, v) - r
    elif shape == "ring":
        d = np.abs(np.hypot(u, v) - 0.7 * r) - 0.3 * r
    elif shape == "square":
        d = np.maximum(np.abs(u), np.abs(v)) - 0.8 * r
    elif shape == "cross":
        arm = 0.3 * r
        d = np.minimum(
            np.maximum(np.abs(u) - r, np.abs(v) - arm),
            np.maximum(np.abs(u) - arm, np.abs(v) - r),
        )
    else:
        raise DataError(shape)
    return np.clip(0.5 - d / edge, 0.0, 1.0)


def render_shape(cfg: SyntheticConfig, label: int, rng: np.random.Generator) -> np.ndarray:
    n = cfg.image_size
    coords = np.linspace(-1.0, 1.0, n)
    gx, gy = np.meshgrid(coords, coords)
    r = rng.uniform(*cfg.radius_range)
    cx, cy = rng.uniform(-cfg.center_jitter, cfg.center_jitter, size=2)
    angle = rng.uniform(0.0, math.pi / 2)
    mask = _shape_mask(SHAPES[label], gx - cx, gy - cy, r, angle, edge=2.0 / n)
    fg = rng.uniform(0.55, 1.0, size=cfg.channels)
    bg = rng.uniform(0.0, 0.3, size=cfg.channels)
    img = bg + mask[..., None] * (fg - bg)
    img = img + rng.normal(0.0, cfg.noise, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def make_shapes(cfg: SyntheticConfig, per_class: int, rng: np.random.Generator) -> LabeledSet:
    labels = np.repeat(np.arange(cfg.num_classes), per_class)
    rng.shuffle(labels)
    images = np.stack([render_shape(cfg, int(c), rng) for c in labels])
    return LabeledSet(images, labels.astype(np.int64))


def make_synthetic(
    cfg: SyntheticConfig | None = None, rng: np.random.Generator | int = 0, n_labels: int | None = None
) -> DatasetSplit:
    """Synthetic disk/square/cross/ring dataset split into labeled/unlabeled/test.

    ``n_labels`` defaults to 10 per class.
    """
    cfg = cfg or SyntheticConfig()
    cfg.validate()
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    train = make_shapes(cfg, cfg.train_per_class, rng)
    test = make_shapes(cfg, cfg.test_per_class, rng)
    split_seed = int(rng.integers(2**31))
    n_labels = 10 * cfg.num_classes if n_labels is None else n_labels
    split = split_labels(train, test, n_labels, split_seed, num_classes=cfg.num_classes)
    split.metadata["synthetic"] = {k: v for k, v in vars(cfg).items()}
    return split


def nearest_class_mean_accuracy(train: LabeledSet, test: LabeledSet) -> float:
    """Accuracy of a nearest-class-mean classifier on standardized grayscale pixels."""

    def feats(images):
        g = images.mean(axis=-1).reshape(len(images), -1)
        g = g - g.mean(axis=1, keepdims=True)
        return g / (g.std(axis=1, keepdims=True) + 1e-8)

    ftr, fte = feats(train.images), feats(test.images)
    classes = np.unique(train.labels)
    means = np.stack([ftr[train.labels == c].mean(axis=0) for c in classes])
    dist = ((fte[:, None, :] - means[None]) ** 2).sum(-1)
    pred = classes[dist.argmin(axis=1)]
    return float((pred == test.labels).mean())


# --------------------------------------------------------------------------
# Directory layout: images/<split>/<id>.png + labels_<split>.csv


def _save_png(path: Path, image: np.ndarray) -> None:
    from PIL import Image

    arr = np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)
    if arr.shape[-1] == 1:
        arr = arr[..., 0]
    Image.fromarray(arr).save(path)


def _load_png(path: Path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im, dtype=np.float64) / 255.0
    if arr.ndim == 2:
        arr = arr[..., None]
    return arr[..., :3]


def save_dataset(root: str | Path, splits: dict[str, LabeledSet], metadata: dict | None = None) -> None:
    """Write each split as PNGs plus a ``labels_<split>.csv`` of ``id,class`` rows."""
    root = Path(root)
    for name, ds in splits.items():
        img_dir = root / "images" / name
        img_dir.mkdir(parents=True, exist_ok=True)
        with open(root / f"labels_{name}.csv", "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["id", "class"])
            for i, (img, label) in enumerate(zip(ds.images, ds.labels)):
                _save_png(img_dir / f"{i:06d}.png", img)
                writer.writerow([f"{i:06d}", int(label)])
    if metadata is not None:
        (root / "metadata.json").write_text(json.dumps(metadata, indent=2, default=str))


def load_labeled(root: str | Path, split: str) -> LabeledSet:
    root = Path(root)
    index = root / f"labels_{split}.csv"
    if not index.exists():
        raise DataError(f"missing label index {index}")
    ids, labels = [], []
    with open(index, newline="") as f:
        for row in csv.DictReader(f):
            ids.append(row["id"])
            labels.append(int(row["class"]))
    images = np.stack([_load_png(root / "images" / split / f"{i}.png") for i in ids])
    return LabeledSet(images, np.asarray(labels, dtype=np.int64))


def load_dataset(root: str | Path, n_labels: int, seed: int) -> DatasetSplit:
    """Load ``train``/``test`` splits from a dataset directory and split labels."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset directory {root} does not exist")
    train = load_labeled(root, "train")
    test = load_labeled(root, "test")
    return split_labels(train, test, n_labels, seed)
