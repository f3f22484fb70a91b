"""Image metadata, patient structure, class statistics and patient-level folds."""

from __future__ import annotations

import csv
import enum
import random
import warnings
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path

MAX_IMAGES_PER_PATIENT = 5


class Label(str, enum.Enum):
    CE = "CE"
    LAA = "LAA"
    OTHER = "Other"
    UNKNOWN = "Unknown"
    UNLABELED = "Unlabeled"


class DatasetKind(str, enum.Enum):
    TRAIN = "Train"
    OTHER = "Other"
    TEST = "Test"


ALLOWED_LABELS = {
    DatasetKind.TRAIN: frozenset({Label.CE, Label.LAA}),
    DatasetKind.OTHER: frozenset({Label.OTHER, Label.UNKNOWN}),
    DatasetKind.TEST: frozenset(Label),
}

# "CA" shows up in the competition write-ups as a typo for CE.
_LABEL_ALIASES = {"CA": Label.CE, "": Label.UNLABELED}

REQUIRED_COLUMNS = ("image_id", "patient_id", "image_num", "label")


class MetadataError(ValueError):
    """Base class for metadata validation failures."""


class MissingColumn(MetadataError):
    pass


class DuplicateImageId(MetadataError):
    pass


class DuplicateImageNum(MetadataError):
    pass


class IllegalLabelForKind(MetadataError):
    pass


class EmptyIndex(MetadataError):
    pass


class TooFewPatients(MetadataError):
    pass


class InconsistentPatientLabel(MetadataError):
    pass


def parse_label(value: str) -> Label:
    value = value.strip()
    if value in _LABEL_ALIASES:
        return _LABEL_ALIASES[value]
    try:
        return Label(value)
    except ValueError:
        raise MetadataError(f"unknown label {value!r}") from None


@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    patient_id: str
    image_num: int
    label: Label
    center_id: str | None = None
    path: Path | None = None


@dataclass(frozen=True)
class DatasetIndex:
    records: tuple[ImageRecord, ...]
    kind: DatasetKind = DatasetKind.TRAIN

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def patients(self) -> dict[str, list[ImageRecord]]:
        groups: dict[str, list[ImageRecord]] = defaultdict(list)
        for rec in self.records:
            groups[rec.patient_id].append(rec)
        return dict(groups)

    def patient_labels(self) -> dict[str, Label]:
        """Map each patient to its label; raises if a patient's images disagree."""
        labels: dict[str, Label] = {}
        for rec in self.records:
            prev = labels.setdefault(rec.patient_id, rec.label)
            if prev is not rec.label:
                raise InconsistentPatientLabel(
                    f"patient {rec.patient_id} has labels {prev.value} and {rec.label.value}"
                )
        return labels


def validate_index(records, kind: DatasetKind) -> DatasetIndex:
    """Check the structural invariants and return a sorted index.

    Hard errors: duplicate image ids, duplicate image_num within a patient,
    labels outside the kind's label set. More than five images for one
    patient only warns, since held-out sets are not bound by it.
    """
    kind = DatasetKind(kind)
    seen_ids: set[str] = set()
    seen_nums: set[tuple[str, int]] = set()
    allowed = ALLOWED_LABELS[kind]
    for rec in records:
        if rec.image_id in seen_ids:
            raise DuplicateImageId(f"duplicate image_id {rec.image_id!r}")
        seen_ids.add(rec.image_id)
        key = (rec.patient_id, rec.image_num)
        if key in seen_nums:
            raise DuplicateImageNum(
                f"patient {rec.patient_id!r} has two images with image_num {rec.image_num}"
            )
        seen_nums.add(key)
        if rec.image_num < 0:
            raise MetadataError(f"negative image_num for {rec.image_id!r}")
        if rec.label not in allowed:
            raise IllegalLabelForKind(
                f"label {rec.label.value!r} not allowed in a {kind.value} index ({rec.image_id})"
            )

    ordered = tuple(sorted(records, key=lambda r: (r.patient_id, r.image_num)))
    index = DatasetIndex(ordered, kind)
    oversized = [p for p, recs in index.patients().items() if len(recs) > MAX_IMAGES_PER_PATIENT]
    if oversized:
        warnings.warn(
            f"{len(oversized)} patient(s) have more than {MAX_IMAGES_PER_PATIENT} images, "
            f"e.g. {oversized[0]!r}",
            stacklevel=2,
        )
    return index


def load_metadata(path, kind=DatasetKind.TRAIN, image_dir=None) -> DatasetIndex:
    """Read a metadata CSV into a validated :class:`DatasetIndex`.

    The header must contain ``image_id, patient_id, image_num, label``;
    ``center_id`` and ``path`` are optional. When ``path`` is absent and
    ``image_dir`` is given, images are looked up as ``<image_dir>/<image_id>.tif``.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = [c.strip() for c in (reader.fieldnames or [])]
        missing = [c for c in REQUIRED_COLUMNS if c not in header]
        if missing:
            raise MissingColumn(f"{path}: missing column(s) {', '.join(missing)}")
        records = []
        for lineno, row in enumerate(reader, start=2):
            row = {k.strip(): (v or "").strip() for k, v in row.items() if k is not None}
            try:
                image_num = int(row["image_num"])
            except ValueError:
                raise MetadataError(f"{path}:{lineno}: bad image_num {row['image_num']!r}") from None
            img_path = row.get("path") or None
            if img_path is not None:
                img_path = Path(img_path)
                if not img_path.is_absolute():
                    img_path = (Path(image_dir) if image_dir else path.parent) / img_path
            elif image_dir is not None:
                img_path = Path(image_dir) / f"{row['image_id']}.tif"
            records.append(
                ImageRecord(
                    image_id=row["image_id"],
                    patient_id=row["patient_id"],
                    image_num=image_num,
                    label=parse_label(row["label"]),
                    center_id=row.get("center_id") or None,
                    path=img_path,
                )
            )
    return validate_index(records, kind)


def write_metadata(index: DatasetIndex, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["image_id", "patient_id", "image_num", "center_id", "label"])
        for r in index.records:
            writer.writerow([r.image_id, r.patient_id, r.image_num, r.center_id or "", r.label.value])


@dataclass(frozen=True)
class ClassStats:
    counts: dict[Label, int]
    rates: dict[Label, float]

    @property
    def total(self) -> int:
        return sum(self.counts.values())


def class_stats(index: DatasetIndex) -> ClassStats:
    """Per-class image counts and rates over the labels allowed for the index kind."""
    if not index.records:
        raise EmptyIndex("class statistics of an empty index")
    classes = [lab for lab in Label if lab in ALLOWED_LABELS[index.kind]]
    counts = {lab: 0 for lab in classes}
    for rec in index.records:
        counts[rec.label] += 1
    total = len(index.records)
    rates = {lab: n / total for lab, n in counts.items()}
    return ClassStats(counts, rates)


def select_last_chronological(index: DatasetIndex) -> DatasetIndex:
    """Keep one image per patient: the one with the largest ``image_num``."""
    last: dict[str, ImageRecord] = {}
    for rec in index.records:
        cur = last.get(rec.patient_id)
        if cur is None or rec.image_num > cur.image_num:
            last[rec.patient_id] = rec
    ordered = tuple(sorted(last.values(), key=lambda r: (r.patient_id, r.image_num)))
    return DatasetIndex(ordered, index.kind)


@dataclass(frozen=True)
class FoldAssignment:
    fold_of_patient: dict[str, int]
    k: int
    seed: int = 0

    def patients_in(self, fold: int) -> list[str]:
        return sorted(p for p, f in self.fold_of_patient.items() if f == fold)

    def train_patients(self, fold: int) -> list[str]:
        return sorted(p for p, f in self.fold_of_patient.items() if f != fold)


def stratified_kfold(index: DatasetIndex, k: int = 5, seed: int = 0) -> FoldAssignment:
    """Assign patients to ``k`` folds, stratified by patient label.

    Patients of each class are shuffled with a seeded ``random.Random`` and
    dealt round-robin. Each class continues dealing where the previous class
    stopped so fold sizes stay balanced as well. Every fold then holds
    ``floor(n_c / k)`` or ``ceil(n_c / k)`` patients of class ``c``.
    """
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    labels = index.patient_labels()
    by_class: dict[Label, list[str]] = defaultdict(list)
    for patient, lab in labels.items():
        by_class[lab].append(patient)
    for lab, patients in by_class.items():
        if len(patients) < k:
            raise TooFewPatients(
                f"class {lab.value} has {len(patients)} patient(s), fewer than k={k}"
            )

    rng = random.Random(seed)
    assignment: dict[str, int] = {}
    cursor = 0
    for lab in sorted(by_class, key=lambda lab: list(Label).index(lab)):
        patients = sorted(by_class[lab])
        rng.shuffle(patients)
        for patient in patients:
            assignment[patient] = cursor % k
            cursor += 1
    return FoldAssignment(dict(sorted(assignment.items())), k, seed)


def write_folds(folds: FoldAssignment, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["patient_id", "fold"])
        for patient, fold in sorted(folds.fold_of_patient.items()):
            writer.writerow([patient, fold])


def load_folds(path, seed: int = 0) -> FoldAssignment:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if not reader.fieldnames or {"patient_id", "fold"} - set(reader.fieldnames):
            raise MissingColumn(f"{path}: fold CSV needs patient_id,fold")
        mapping = {row["patient_id"]: int(row["fold"]) for row in reader}
    k = max(mapping.values()) + 1 if mapping else 0
    return FoldAssignment(mapping, k, seed)
