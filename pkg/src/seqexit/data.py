"""Datasets: CSV ingestion, seeded synthetic blobs, train/val/test tags.

Labels are 0-based in memory and 1-based (``1..C``) on disk.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .artifacts import fmt
from .rng import STREAM_DATA, STREAM_SPLIT, Rng

SPLITS = ("train", "val", "test")


class SchemaError(ValueError):
    pass


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    split: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.split = np.asarray(self.split, dtype=object)
        n = self.features.shape[0]
        if self.labels.shape != (n,) or self.split.shape != (n,):
            raise ValueError("features, labels and split tags must have the same length")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("labels outside 0..num_classes-1")
        bad = set(self.split.tolist()) - set(SPLITS)
        if bad:
            raise ValueError(f"unknown split tags {sorted(bad)}")

    def __len__(self):
        return self.features.shape[0]

    @property
    def input_dim(self) -> int:
        return self.features.shape[1]

    def part(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        m = self.split == name
        return self.features[m], self.labels[m]

    def check_train_classes(self) -> None:
        present = np.unique(self.labels[self.split == "train"])
        if present.size != self.num_classes:
            missing = sorted(set(range(self.num_classes)) - set(present.tolist()))
            raise ValueError(f"classes {[c + 1 for c in missing]} absent from the train split")

    def with_validation(self, fraction: float, seed: int) -> "Dataset":
        """Tag the last ``fraction`` of a seeded shuffle of train rows as val."""
        if not 0.0 < fraction < 0.5:
            raise ValueError("validation fraction must lie in (0, 0.5)")
        train_rows = np.flatnonzero(self.split == "train")
        order = train_rows[Rng(seed, STREAM_SPLIT).permutation(train_rows.size)]
        n_val = int(round(fraction * train_rows.size))
        split = self.split.copy()
        split[order[train_rows.size - n_val:]] = "val"
        out = Dataset(self.features, self.labels, split, self.num_classes)
        out.check_train_classes()
        return out


def load_csv(path: str | Path, num_classes: int | None = None, split: str = "train") -> Dataset:
    """Read ``label,f0,f1,...`` rows; labels on disk are 1-based."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        if not header or header[0] != "label":
            raise SchemaError(f"{path}: column 1 must be 'label', got {header[:1]!r}")
        for i, name in enumerate(header[1:]):
            if name != f"f{i}":
                raise SchemaError(f"{path}: column {i + 2} must be 'f{i}', got {name!r}")
        d = len(header) - 1
        if d == 0:
            raise SchemaError(f"{path}: no feature columns")
        labels, feats = [], []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != d + 1:
                raise SchemaError(f"{path}:{lineno}: expected {d + 1} fields, got {len(row)}")
            try:
                lab = int(row[0])
                vals = [float(v) for v in row[1:]]
            except ValueError as exc:
                raise SchemaError(f"{path}:{lineno}: {exc}") from None
            if not np.all(np.isfinite(vals)):
                raise SchemaError(f"{path}:{lineno}: non-finite feature")
            labels.append(lab)
            feats.append(vals)
    labels = np.array(labels, dtype=np.int64)
    C = num_classes if num_classes is not None else int(labels.max(initial=0))
    bad = np.flatnonzero((labels < 1) | (labels > C))
    if bad.size:
        raise SchemaError(f"{path}:{bad[0] + 2}: label {labels[bad[0]]} outside 1..{C}")
    x = np.array(feats, dtype=np.float64).reshape(len(labels), d)
    return Dataset(x, labels - 1, np.full(len(labels), split, dtype=object), C)


def save_csv(ds: Dataset, path: str | Path, split: str | None = None) -> None:
    m = np.ones(len(ds), dtype=bool) if split is None else ds.split == split
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label"] + [f"f{i}" for i in range(ds.input_dim)])
        for lab, row in zip(ds.labels[m], ds.features[m]):
            w.writerow([str(int(lab) + 1)] + [fmt(v) for v in row])


def synth_blobs(seed: int, num_classes: int, dim: int, n_per_class: int, spread: float,
                coarse_groups: int = 0, fine_offset: float = 1.0, n_test_per_class: int = 0,
                center_scale: float = 1.0) -> Dataset:
    """Gaussian class clusters, optionally nested inside coarse groups.

    Without groups each class centre is ``center_scale * N(0, I)``.  With
    ``coarse_groups = G`` the classes are dealt round-robin into G groups; a
    group centre is drawn as above and each class sits ``fine_offset`` away
    from it along its own random unit direction.  Shallow features then
    separate the groups easily while the fine split needs more capacity.
    Samples are the class centre plus ``spread * N(0, I)``.
    """
    if num_classes < 2:
        raise ValueError("need at least 2 classes")
    rng = Rng(seed, STREAM_DATA)
    if coarse_groups:
        if not 1 <= coarse_groups <= num_classes:
            raise ValueError("coarse_groups must lie in 1..num_classes")
        gcent = center_scale * rng.normal((coarse_groups, dim))
        dirs = rng.normal((num_classes, dim))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        centers = gcent[np.arange(num_classes) % coarse_groups] + fine_offset * dirs
    else:
        centers = center_scale * rng.normal((num_classes, dim))
    n_total = n_per_class + n_test_per_class
    x = np.empty((num_classes * n_total, dim))
    y = np.empty(num_classes * n_total, dtype=np.int64)
    split = np.empty(num_classes * n_total, dtype=object)
    for c in range(num_classes):
        rows = slice(c * n_total, (c + 1) * n_total)
        x[rows] = centers[c] + spread * rng.normal((n_total, dim))
        y[rows] = c
        split[rows] = ["train"] * n_per_class + ["test"] * n_test_per_class
    return Dataset(x, y, split, num_classes)
