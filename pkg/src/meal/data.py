"""Synthetic classification datasets and their CSV format."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

KINDS = ("blobs", "rings", "spirals")


class DatasetFormatError(ValueError):
    pass


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    split: str = "train"

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or len(self.features) != len(self.labels):
            raise ValueError(f"features {self.features.shape} do not match {len(self.labels)} labels")
        if self.split not in ("train", "test"):
            raise ValueError(f"unknown split {self.split!r}")

    def __len__(self):
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) else 0


@dataclass(frozen=True)
class SyntheticSpec:
    kind: str = "spirals"
    n_per_class: int = 100
    num_classes: int = 3
    noise_sigma: float = 0.1
    seed: int = 0
    dim: int = 2

    def validate(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown dataset kind {self.kind!r}")
        if self.num_classes < 2:
            raise ValueError("need at least 2 classes")
        if self.n_per_class < 2:
            raise ValueError("need at least 2 points per class")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if self.kind in ("rings", "spirals") and self.dim != 2:
            raise ValueError(f"{self.kind} data is 2-dimensional, got dim={self.dim}")
        if self.dim < 1:
            raise ValueError("dim must be positive")


def blob_centers(num_classes: int, dim: int) -> np.ndarray:
    centers = np.zeros((num_classes, dim))
    for k in range(num_classes):
        if dim == 1:
            centers[k, 0] = 4.0 * k
        else:
            angle = 2 * math.pi * k / num_classes
            centers[k, :2] = 4.0 * math.cos(angle), 4.0 * math.sin(angle)
    return centers


def _class_points(spec: SyntheticSpec, k: int, rng: np.random.Generator) -> np.ndarray:
    n = spec.n_per_class
    if spec.kind == "blobs":
        base = np.tile(blob_centers(spec.num_classes, spec.dim)[k], (n, 1))
    elif spec.kind == "rings":
        angle = rng.uniform(0, 2 * math.pi, n)
        r = float(k + 1)
        base = np.stack([r * np.cos(angle), r * np.sin(angle)], axis=1)
    else:
        t = rng.uniform(0.05, 1.0, n)
        angle = 2 * math.pi * k / spec.num_classes + 3.0 * math.pi * t
        base = np.stack([t * np.cos(angle), t * np.sin(angle)], axis=1) * 2.0
    return base + spec.noise_sigma * rng.standard_normal(base.shape)


def gen_synthetic(spec: SyntheticSpec) -> tuple[Dataset, Dataset]:
    """Deterministic stratified 80/20 train/test split."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    n_train = (spec.n_per_class * 4) // 5
    train_x, train_y, test_x, test_y = [], [], [], []
    for k in range(spec.num_classes):
        pts = _class_points(spec, k, rng)
        train_x.append(pts[:n_train])
        test_x.append(pts[n_train:])
        train_y.append(np.full(n_train, k))
        test_y.append(np.full(spec.n_per_class - n_train, k))
    train_order = rng.permutation(n_train * spec.num_classes)
    test_order = rng.permutation((spec.n_per_class - n_train) * spec.num_classes)
    train = Dataset(np.concatenate(train_x)[train_order], np.concatenate(train_y)[train_order], "train")
    test = Dataset(np.concatenate(test_x)[test_order], np.concatenate(test_y)[test_order], "test")
    return train, test


def save_dataset(path, dataset: Dataset) -> None:
    d = dataset.dim
    lines = ["label," + ",".join(f"f{i}" for i in range(d))]
    for label, row in zip(dataset.labels, dataset.features):
        lines.append(",".join([str(int(label))] + [repr(float(v)) for v in row]))
    Path(path).write_text("\n".join(lines) + "\n")


def load_dataset(path, num_classes: Optional[int] = None, split: str = "train") -> Dataset:
    """Read a dataset CSV; errors name the offending line."""
    text = Path(path).read_text()
    lines = text.splitlines()
    if not lines or not lines[0].strip():
        raise DatasetFormatError(f"{path}: no header")
    header = lines[0].split(",")
    d = len(header) - 1
    if d < 1 or header != ["label"] + [f"f{i}" for i in range(d)]:
        raise DatasetFormatError(f"{path}:1: bad header {lines[0]!r}")
    labels, rows = [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        cells = line.split(",")
        if len(cells) != d + 1:
            raise DatasetFormatError(f"{path}:{lineno}: expected {d + 1} fields, got {len(cells)}")
        try:
            label = int(cells[0])
            values = [float(c) for c in cells[1:]]
        except ValueError as exc:
            raise DatasetFormatError(f"{path}:{lineno}: malformed row ({exc})") from None
        if label < 0 or (num_classes is not None and label >= num_classes):
            raise DatasetFormatError(f"{path}:{lineno}: label {label} out of range")
        labels.append(label)
        rows.append(values)
    features = np.array(rows, dtype=np.float64).reshape(len(rows), d)
    return Dataset(features, np.array(labels, dtype=np.int64), split)
