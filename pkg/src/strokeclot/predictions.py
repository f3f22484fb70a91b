"""Prediction tables: pseudo-label selection, fold expansion, ensembling, submissions."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import FoldAssignment, Label
from .metrics import CLASSES

SIMPLEX_TOL = 1e-9


class SubjectCollision(ValueError):
    pass


class SubjectSetMismatch(ValueError):
    pass


@dataclass(frozen=True)
class PredictionTable:
    """Per-subject probabilities over (CE, LAA)."""

    subject_ids: tuple
    probs: np.ndarray
    model_id: str = ""

    def __post_init__(self):
        ids = tuple(str(s) for s in self.subject_ids)
        probs = np.asarray(self.probs, dtype=np.float64).reshape(len(ids), len(CLASSES))
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate subject_id in prediction table")
        if np.any(probs < 0) or np.any(probs > 1) or not np.all(np.isfinite(probs)):
            raise ValueError("probabilities must lie in [0, 1]")
        if len(ids) and np.max(np.abs(probs.sum(axis=1) - 1.0)) > SIMPLEX_TOL:
            raise ValueError("probability rows must sum to 1")
        object.__setattr__(self, "subject_ids", ids)
        object.__setattr__(self, "probs", probs)

    def __len__(self):
        return len(self.subject_ids)

    def sorted(self) -> PredictionTable:
        order = sorted(range(len(self)), key=lambda i: self.subject_ids[i])
        return PredictionTable(tuple(self.subject_ids[i] for i in order), self.probs[order], self.model_id)

    def as_dict(self) -> dict:
        return {s: tuple(p) for s, p in zip(self.subject_ids, self.probs)}


@dataclass(frozen=True)
class PseudoLabel:
    subject_id: str
    label: Label
    confidence: float


@dataclass(frozen=True)
class PseudoLabelBatch:
    rows: tuple
    threshold: float

    def __len__(self):
        return len(self.rows)

    def as_class_indices(self) -> dict:
        return {r.subject_id: CLASSES.index(r.label.value) for r in self.rows}


def select_pseudo_labels(preds: PredictionTable, threshold: float = 0.9) -> PseudoLabelBatch:
    """Keep rows whose top probability is at least ``threshold``, labelled by argmax."""
    if not 0.5 < threshold <= 1.0:
        raise ValueError(f"threshold must be in (0.5, 1], got {threshold}")
    rows = []
    for sid, p in zip(preds.subject_ids, preds.probs):
        k = int(np.argmax(p))
        if p[k] >= threshold:
            rows.append(PseudoLabel(sid, Label(CLASSES[k]), float(p[k])))
    return PseudoLabelBatch(tuple(rows), threshold)


@dataclass(frozen=True)
class FoldManifest:
    fold: int
    train: tuple
    val: tuple
    pseudo: tuple = ()

    @property
    def train_size(self) -> int:
        return len(self.train) + len(self.pseudo)


def expand_train_folds(folds: FoldAssignment, batch: PseudoLabelBatch) -> list[FoldManifest]:
    """Per-fold manifests with every pseudo-labelled subject added to training only."""
    collisions = sorted(r.subject_id for r in batch.rows if r.subject_id in folds.fold_of_patient)
    if collisions:
        raise SubjectCollision(
            f"{len(collisions)} pseudo-labelled subject(s) already in the training set, e.g. {collisions[0]!r}"
        )
    pseudo = tuple(sorted(batch.rows, key=lambda r: r.subject_id))
    return [
        FoldManifest(f, tuple(folds.train_patients(f)), tuple(folds.patients_in(f)), pseudo)
        for f in range(folds.k)
    ]


def ensemble_mean(tables) -> PredictionTable:
    """Arithmetic mean of class probabilities across models, per subject."""
    tables = list(tables)
    if not tables:
        raise ValueError("need at least one prediction table")
    ref = sorted(tables[0].subject_ids)
    stack = []
    for t in tables:
        if sorted(t.subject_ids) != ref:
            raise SubjectSetMismatch(f"model {t.model_id or '?'} covers a different subject set")
        stack.append(t.sorted().probs)
    mean = np.mean(np.stack(stack), axis=0)
    return PredictionTable(tuple(ref), mean, "ensemble")


def write_predictions(table: PredictionTable, path, id_column: str = "subject_id") -> None:
    """CSV ``<id_column>,CE,LAA`` sorted by subject.

    Probabilities are written with ``repr`` so they read back bit-exact.
    """
    t = table.sorted()
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([id_column, *CLASSES])
        for sid, p in zip(t.subject_ids, t.probs):
            writer.writerow([sid, repr(float(p[0])), repr(float(p[1]))])


def write_submission(table: PredictionTable, path) -> None:
    write_predictions(table, path, id_column="patient_id")


def load_predictions(path, model_id: str | None = None) -> PredictionTable:
    """Read a prediction or submission CSV.

    Rows must sum to one within 1e-6 (rounded writers); rows off by more
    than 1e-12 are renormalised.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        cols = reader.fieldnames or []
        id_col = next((c for c in ("subject_id", "patient_id") if c in cols), None)
        if id_col is None or any(c not in cols for c in CLASSES):
            raise ValueError(f"{path}: expected columns subject_id|patient_id,CE,LAA")
        ids, probs = [], []
        for row in reader:
            ids.append(row[id_col])
            probs.append([float(row[c]) for c in CLASSES])
    probs = np.asarray(probs, dtype=np.float64).reshape(len(ids), len(CLASSES))
    sums = probs.sum(axis=1, keepdims=True)
    if len(ids) and np.max(np.abs(sums - 1.0)) > 1e-6:
        raise ValueError(f"{path}: probability rows do not sum to 1")
    off = np.abs(sums[:, 0] - 1.0) > 1e-12 if len(ids) else np.zeros(0, bool)
    probs[off] = probs[off] / sums[off]
    return PredictionTable(tuple(ids), probs, model_id if model_id is not None else path.stem)


load_submission = load_predictions


def write_pseudo_labels(batch: PseudoLabelBatch, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["subject_id", "label", "confidence"])
        for r in sorted(batch.rows, key=lambda r: r.subject_id):
            writer.writerow([r.subject_id, r.label.value, f"{r.confidence:.10f}"])


def load_pseudo_labels(path, threshold: float = 0.0) -> PseudoLabelBatch:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        rows = tuple(
            PseudoLabel(r["subject_id"], Label(r["label"]), float(r["confidence"]))
            for r in csv.DictReader(fh)
        )
    return PseudoLabelBatch(rows, threshold)


def load_solution(path) -> dict:
    """``subject_id,label`` (or ``patient_id,label``) -> {subject: class index}."""
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        cols = reader.fieldnames or []
        id_col = next((c for c in ("subject_id", "patient_id") if c in cols), None)
        if id_col is None or "label" not in cols:
            raise ValueError(f"{path}: expected columns subject_id,label")
        out = {}
        for row in reader:
            label = "CE" if row["label"].strip() == "CA" else row["label"].strip()
            if label not in CLASSES:
                raise ValueError(f"{path}: label {label!r} is not one of {CLASSES}")
            out[row[id_col]] = CLASSES.index(label)
    return out
