"""Untargeted and targeted attack evaluation against the recognizer."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .recognizer import CnnModel, confusion_matrix, deep_features, predict_proba
from .wgan.models import Generator
from .wgan.train import sample

K_NEIGHBORS = 5


@dataclass
class DeepFeatureIndex:
    """Exact Euclidean k-NN over stored deep features."""

    vectors: np.ndarray
    labels: np.ndarray
    k: int = K_NEIGHBORS

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.vectors.ndim != 2 or len(self.vectors) != len(self.labels):
            raise ValueError(f"need (n, d) vectors with n labels, got {self.vectors.shape} "
                             f"and {self.labels.shape}")
        if len(self.vectors) < self.k:
            raise ValueError(f"index needs at least k={self.k} vectors, got {len(self.vectors)}")


def build_index(features: np.ndarray, labels: Sequence[int], k: int = K_NEIGHBORS) -> DeepFeatureIndex:
    return DeepFeatureIndex(features, np.asarray(labels), k)


def _vote(neighbor_labels: np.ndarray) -> int:
    """Majority label; ties go to the tied label whose member is nearest.

    ``neighbor_labels`` is ordered nearest first.
    """
    labs, counts = np.unique(neighbor_labels, return_counts=True)
    tied = set(labs[counts == counts.max()].tolist())
    for lab in neighbor_labels:
        if lab in tied:
            return int(lab)
    raise AssertionError("unreachable")


def knn_predict_many(idx: DeepFeatureIndex, queries: np.ndarray) -> np.ndarray:
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    out = np.empty(len(q), dtype=np.int64)
    for i, row in enumerate(q):
        diff = idx.vectors - row
        d2 = np.einsum("ij,ij->i", diff, diff)
        # equal distances resolve by lower stored index
        nearest = np.argsort(d2, kind="stable")[: idx.k]
        out[i] = _vote(idx.labels[nearest])
    return out


def knn_predict(idx: DeepFeatureIndex, q: np.ndarray) -> int:
    return int(knn_predict_many(idx, q)[0])


@dataclass
class AttackReport:
    kind: str
    confusion: np.ndarray  # rows: KNN pseudo-label or target, columns: recognizer prediction
    row_labels: list[str]
    col_labels: list[str]
    histogram: np.ndarray  # prediction counts per recognizer class
    n: int
    seed: int
    target: Optional[str] = None
    error_rate: Optional[float] = None
    diagonal_mass: Optional[float] = None
    extra: dict = field(default_factory=dict)

    def summary(self) -> dict:
        out = {"kind": self.kind, "seed": self.seed, "n": self.n}
        if self.target is not None:
            out["target"] = self.target
        if self.error_rate is not None:
            out["error_rate"] = self.error_rate
            out["accuracy_to_target"] = 1.0 - self.error_rate
        if self.diagonal_mass is not None:
            out["diagonal_mass"] = self.diagonal_mass
        out.update(self.extra)
        return out

    def write(self, directory: str | os.PathLike) -> list[Path]:
        """Write ``summary.csv``, ``confusion.csv`` and ``histogram.csv``."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        paths = [d / "summary.csv", d / "confusion.csv", d / "histogram.csv"]
        with open(paths[0], "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["key", "value"])
            for k, v in self.summary().items():
                w.writerow([k, repr(v) if isinstance(v, float) else v])
        with open(paths[1], "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["truth\\pred"] + self.col_labels)
            for lab, row in zip(self.row_labels, self.confusion):
                w.writerow([lab] + row.tolist())
        with open(paths[2], "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["label", "count"])
            for lab, c in zip(self.col_labels, self.histogram):
                w.writerow([lab, int(c)])
        return paths


def _samples(g, n: int, seed: int) -> np.ndarray:
    return g if isinstance(g, np.ndarray) else sample(g, n, seed)


def untargeted_eval(g: Generator | np.ndarray, rec: CnnModel, idx: DeepFeatureIndex, n: int = 1000,
                    seed: int = 0) -> AttackReport:
    """Attribute each generated patch to a speaker by k-NN in deep-feature space
    and cross-tabulate against the recognizer's argmax.

    ``g`` may also be a precomputed (n, 64, 64) stack of patches.
    """
    x = _samples(g, n, seed)
    n = len(x)
    pseudo = knn_predict_many(idx, deep_features(rec, x)) if n else np.zeros(0, dtype=np.int64)
    pred = predict_proba(rec, x).argmax(axis=1) if n else np.zeros(0, dtype=np.int64)
    rows = sorted(set(idx.labels.tolist()))
    row_of = {lab: i for i, lab in enumerate(rows)}
    cm = confusion_matrix([row_of[p] for p in pseudo], pred, len(rows), rec.n_classes)
    diag = sum(int(cm[row_of[lab], lab]) for lab in rows)
    return AttackReport(
        kind="untargeted", confusion=cm, row_labels=[rec.labels[r] for r in rows],
        col_labels=list(rec.labels), histogram=np.bincount(pred, minlength=rec.n_classes),
        n=n, seed=seed, diagonal_mass=diag / n if n else 0.0,
        extra={"other_fraction": float(np.mean(pred == rec.other_index)) if n else 0.0,
               "chance": 1.0 / len(rows)})


def targeted_eval(g: Generator | np.ndarray, rec: CnnModel, target: int | str, n: int = 1000,
                  seed: int = 0) -> AttackReport:
    """Error rate = fraction of generated patches not classified as ``target``."""
    t = rec.labels.index(target) if isinstance(target, str) else int(target)
    x = _samples(g, n, seed)
    n = len(x)
    pred = predict_proba(rec, x).argmax(axis=1) if n else np.zeros(0, dtype=np.int64)
    hist = np.bincount(pred, minlength=rec.n_classes)
    errors = int(n - hist[t])
    return AttackReport(
        kind="targeted", confusion=hist[None, :].copy(), row_labels=[rec.labels[t]],
        col_labels=list(rec.labels), histogram=hist, n=n, seed=seed, target=rec.labels[t],
        error_rate=errors / n if n else 0.0)
