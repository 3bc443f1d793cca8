"""Datasets with a latent two-level class structure.

Synthetic data is drawn as superclass centers, class centers around them,
and samples around the class centers, so classes inherit a real hierarchy
the training side can try to recover. Files are plain text: one sample per
line as a label followed by tab-separated features, with an optional
"#coarse:" header recording each class's superclass.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import Rng
from .errors import ContractError, DataFormatError


def _check_contiguous(ids: np.ndarray, what: str):
    present = np.unique(ids)
    expected = np.arange(present.shape[0])
    if present.shape[0] == 0 or not np.array_equal(present, expected):
        raise ContractError(f"{what} must be exactly 0..k-1 with every id present")


@dataclass
class Dataset:
    """Feature matrix plus integer class labels.

    labels are contiguous (0..C-1, every class present). gt_coarse, when
    set, maps each class id to its superclass id, also contiguous.
    """

    features: np.ndarray
    labels: np.ndarray
    gt_coarse: Optional[np.ndarray] = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ContractError("features must be a 2-D array")
        if self.labels.shape != (self.features.shape[0],):
            raise ContractError("need exactly one label per sample")
        if self.features.shape[0] == 0:
            raise ContractError("dataset must contain at least one sample")
        if not np.isfinite(self.features).all():
            raise ContractError("features must be finite")
        _check_contiguous(self.labels, "class labels")
        if self.gt_coarse is not None:
            self.gt_coarse = np.asarray(self.gt_coarse, dtype=np.int64)
            if self.gt_coarse.shape != (self.num_classes,):
                raise ContractError("need one superclass id per class")
            _check_contiguous(self.gt_coarse, "superclass ids")

    @property
    def num_samples(self) -> int:
        return self.features.shape[0]

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def num_superclasses(self) -> Optional[int]:
        if self.gt_coarse is None:
            return None
        return int(self.gt_coarse.max()) + 1


@dataclass(frozen=True)
class SyntheticSpec:
    """Shape and spread parameters for the synthetic generator.

    Spreads must satisfy super_spread > class_spread > noise > 0 so the
    hierarchy is actually present in the geometry.
    """

    num_super: int = 8
    classes_per_super: int = 8
    samples_per_class: int = 20
    dim: int = 16
    super_spread: float = 10.0
    class_spread: float = 1.0
    noise: float = 0.3

    def __post_init__(self):
        for name in ("num_super", "classes_per_super", "samples_per_class", "dim"):
            if int(getattr(self, name)) < 1:
                raise ContractError(f"{name} must be >= 1")
        if not self.super_spread > self.class_spread > self.noise > 0.0:
            raise ContractError(
                "spreads must satisfy super_spread > class_spread > noise > 0"
            )


def generate_synthetic(spec: SyntheticSpec, rng: Rng) -> Dataset:
    """Draw a dataset with the given hierarchy.

    Classes are numbered in generation order, so class c belongs to
    superclass c // classes_per_super.
    """
    super_centers = rng.normal(
        size=(spec.num_super, spec.dim), scale=spec.super_spread
    )
    rows = []
    labels = []
    label = 0
    for s in range(spec.num_super):
        for _ in range(spec.classes_per_super):
            center = super_centers[s] + rng.normal(size=spec.dim, scale=spec.class_spread)
            rows.append(center + rng.normal(
                size=(spec.samples_per_class, spec.dim), scale=spec.noise
            ))
            labels.extend([label] * spec.samples_per_class)
            label += 1
    gt_coarse = np.repeat(np.arange(spec.num_super), spec.classes_per_super)
    return Dataset(np.concatenate(rows, axis=0), np.array(labels), gt_coarse)


def _take_classes(dataset: Dataset, classes: np.ndarray) -> Dataset:
    classes = np.sort(classes)
    new_id = np.full(dataset.num_classes, -1, dtype=np.int64)
    new_id[classes] = np.arange(classes.shape[0])
    keep = new_id[dataset.labels] >= 0
    coarse = None
    if dataset.gt_coarse is not None:
        old_coarse = dataset.gt_coarse[classes]
        # Renumber the superclasses that survive, keeping their order.
        survivors = np.unique(old_coarse)
        coarse_id = np.full(int(old_coarse.max()) + 1, -1, dtype=np.int64)
        coarse_id[survivors] = np.arange(survivors.shape[0])
        coarse = coarse_id[old_coarse]
    return Dataset(dataset.features[keep], new_id[dataset.labels[keep]], coarse)


def split_classes(dataset: Dataset, train_fraction: float, rng: Rng):
    """Split into two class-disjoint datasets by random class partition.

    Returns (train, test). round(train_fraction * C) classes go to train;
    both sides must end up non-empty. Labels are re-indexed to 0..k-1 in
    ascending order of the original ids.
    """
    c = dataset.num_classes
    n_train = int(round(train_fraction * c))
    if not 1 <= n_train <= c - 1:
        raise ContractError(
            f"train_fraction {train_fraction} leaves {n_train} of {c} classes for training"
        )
    order = rng.permutation(c)
    return (
        _take_classes(dataset, order[:n_train]),
        _take_classes(dataset, order[n_train:]),
    )


def save_dataset(dataset: Dataset, path: str):
    """Write the text format; floats use repr so loading round-trips exactly."""
    with open(path, "w", encoding="utf-8") as fh:
        if dataset.gt_coarse is not None:
            fh.write("#coarse: " + " ".join(str(c) for c in dataset.gt_coarse) + "\n")
        for label, row in zip(dataset.labels, dataset.features):
            fh.write("\t".join([str(int(label))] + [repr(float(v)) for v in row]) + "\n")


def load_dataset(path: str) -> Dataset:
    """Parse the text format, reporting the offending line on any error."""
    gt_coarse = None
    labels = []
    rows = []
    dim = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#coarse:"):
                if rows or gt_coarse is not None:
                    raise DataFormatError(
                        f"line {lineno}: #coarse header must appear once, before any sample"
                    )
                try:
                    gt_coarse = np.array([int(t) for t in line[len("#coarse:"):].split()],
                                         dtype=np.int64)
                except ValueError:
                    raise DataFormatError(f"line {lineno}: malformed #coarse header") from None
                continue
            if line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) < 2:
                raise DataFormatError(
                    f"line {lineno}: expected a label and at least one feature"
                )
            try:
                labels.append(int(parts[0]))
            except ValueError:
                raise DataFormatError(f"line {lineno}: bad label {parts[0]!r}") from None
            try:
                row = [float(t) for t in parts[1:]]
            except ValueError:
                raise DataFormatError(f"line {lineno}: bad feature value") from None
            if dim is None:
                dim = len(row)
            elif len(row) != dim:
                raise DataFormatError(
                    f"line {lineno}: expected {dim} features, found {len(row)}"
                )
            rows.append(row)
    if not rows:
        raise DataFormatError("file contains no samples")
    try:
        return Dataset(np.array(rows), np.array(labels), gt_coarse)
    except ContractError as exc:
        raise DataFormatError(str(exc)) from None
