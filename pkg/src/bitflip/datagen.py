"""Deterministic synthetic datasets and CSV I/O."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .netcore import Dataset


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class BlobSpec:
    n_classes: int = 4
    centers: tuple[tuple[float, float], ...] = ((-2.0, -2.0), (2.0, -2.0), (-2.0, 2.0), (2.0, 2.0))
    std: float = 0.5
    per_class: int = 200
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "centers", tuple(tuple(float(v) for v in c) for c in self.centers))
        if len(self.centers) != self.n_classes:
            raise ValueError("need one center per class")
        if len(set(self.centers)) != len(self.centers):
            raise ValueError("blob centers must be pairwise distinct")
        if self.std < 0:
            raise ValueError("std must be non-negative")


def generate_blobs(spec: BlobSpec = BlobSpec()) -> Dataset:
    rng = np.random.default_rng(spec.seed)
    centers = np.array(spec.centers)
    X = np.concatenate([c + spec.std * rng.standard_normal((spec.per_class, 2)) for c in centers])
    y = np.repeat(np.arange(spec.n_classes), spec.per_class)
    return Dataset(X, y, spec.n_classes, "train")


def _templates(side: int) -> list[np.ndarray]:
    u = np.tile(np.linspace(0.0, 1.0, side), (side, 1))
    v = u.T
    return [
        u,  # brightens to the right
        v,  # brightens downward
        1.0 - u,
        1.0 - v,
        u * v,
        (1.0 - u) * (1.0 - v),
        u * (1.0 - v),
        (1.0 - u) * v,
    ]


@dataclass(frozen=True)
class ImageClassSpec:
    """Low-resolution grey images: one smooth template per class plus noise."""

    side: int = 8
    n_classes: int = 4
    noise_std: float = 0.1
    per_class: int = 200
    seed: int = 0
    templates: Optional[tuple] = field(default=None, repr=False)

    def __post_init__(self):
        if self.side < 2:
            raise ValueError("side must be at least 2")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")
        if self.templates is None and self.n_classes > len(_templates(2)):
            raise ValueError("at most 8 built-in templates; pass templates explicitly")

    def class_templates(self) -> np.ndarray:
        if self.templates is not None:
            t = np.asarray(self.templates, dtype=np.float64).reshape(self.n_classes, -1)
        else:
            t = np.stack([m.reshape(-1) for m in _templates(self.side)[: self.n_classes]])
        if t.shape[1] != self.side * self.side or np.any((t < 0) | (t > 1)):
            raise ValueError("templates must be side*side values in [0, 1]")
        return t


def generate_patch_classes(spec: ImageClassSpec = ImageClassSpec()) -> Dataset:
    rng = np.random.default_rng(spec.seed)
    tmpl = spec.class_templates()
    d = tmpl.shape[1]
    X = np.concatenate([t + spec.noise_std * rng.standard_normal((spec.per_class, d)) for t in tmpl])
    y = np.repeat(np.arange(spec.n_classes), spec.per_class)
    return Dataset(np.clip(X, 0.0, 1.0), y, spec.n_classes, "train", (0.0, 1.0))


def patch_mask(side: int, patch: int = 2, corner: str = "bottom-right") -> np.ndarray:
    """Binary mask of a ``patch`` x ``patch`` square in one image corner."""
    if not 1 <= patch <= side:
        raise ValueError("patch must fit inside the image")
    if corner not in {"bottom-right", "bottom-left", "top-right", "top-left"}:
        raise ValueError(f"unknown corner {corner!r}")
    m = np.zeros((side, side))
    rs = slice(side - patch, side) if corner.startswith("bottom") else slice(0, patch)
    cs = slice(side - patch, side) if corner.endswith("right") else slice(0, patch)
    m[rs, cs] = 1.0
    return m.reshape(-1)


def split_dataset(
    data: Dataset,
    fractions: Sequence[float] = (0.7, 0.15, 0.15),
    seed: int = 0,
    roles: Sequence[str] = ("train", "aux", "validation"),
) -> list[Dataset]:
    """Stratified disjoint partition; the last part takes the remainder."""
    if abs(sum(fractions) - 1.0) > 1e-9 or len(fractions) != len(roles):
        raise ValueError("fractions must sum to 1 and match roles")
    rng = np.random.default_rng(seed)
    parts: list[list[int]] = [[] for _ in fractions]
    for c in range(data.n_classes):
        idx = rng.permutation(np.flatnonzero(data.y == c))
        cuts = np.floor(np.cumsum(fractions)[:-1] * idx.size).astype(int)
        for p, chunk in zip(parts, np.split(idx, cuts)):
            p.extend(chunk.tolist())
    return [data.subset(np.sort(np.array(p, dtype=np.int64)), role) for p, role in zip(parts, roles)]


def save_csv_dataset(data: Dataset, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for x, y in zip(data.X, data.y):
            w.writerow([repr(float(v)) for v in x] + [int(y)])


def load_csv_dataset(path, d: int, n_classes: int, role: str = "train") -> Dataset:
    """Rows are ``d`` feature columns followed by an integer label."""
    path = Path(path)
    X, y = [], []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != d + 1:
                raise DatasetError(f"{path}:{lineno}: expected {d + 1} columns, got {len(row)}")
            try:
                feats = [float(c) for c in row[:d]]
                label = int(row[d])
            except ValueError as exc:
                raise DatasetError(f"{path}:{lineno}: {exc}") from None
            if not 0 <= label < n_classes:
                raise DatasetError(f"{path}:{lineno}: label {label} outside [0, {n_classes})")
            if not np.all(np.isfinite(feats)):
                raise DatasetError(f"{path}:{lineno}: non-finite feature")
            X.append(feats)
            y.append(label)
    if not y:
        raise DatasetError(f"{path}: dataset is empty")
    return Dataset(np.array(X), np.array(y), n_classes, role)
