"""Study manifests, demographic balancing, and evaluation metrics."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

MANIFEST_HEADER = ["study_id", "age", "sex", "label", "volume_path"]

AGE_MIN = 18.0
AGE_MAX = 110.0
DEFAULT_AGE_CALIPER_YEARS = 10.0


@dataclass
class StudyRecord:
    study_id: str
    age: float
    sex: str  # "F" or "M"
    label: int  # 1 positive, 0 negative
    volume_path: str = ""

    def validate(self) -> None:
        if self.sex not in ("F", "M"):
            raise ValueError(f"{self.study_id}: sex must be F or M, got {self.sex!r}")
        if not AGE_MIN <= self.age <= AGE_MAX:
            raise ValueError(f"{self.study_id}: age {self.age} outside [{AGE_MIN}, {AGE_MAX}]")
        if self.label not in (0, 1):
            raise ValueError(f"{self.study_id}: label must be 0 or 1")


@dataclass
class Metrics:
    tp: int
    fp: int
    tn: int
    fn: int
    accuracy: float
    sensitivity: float
    specificity: float

    def to_dict(self) -> dict:
        return {
            "tp": self.tp,
            "fp": self.fp,
            "tn": self.tn,
            "fn": self.fn,
            "accuracy": self.accuracy,
            "sensitivity": self.sensitivity,
            "specificity": self.specificity,
        }


def write_manifest(path: str, records: list[StudyRecord]) -> None:
    """UTF-8, LF line endings, fixed header, one row per study."""
    seen: set[str] = set()
    for r in records:
        r.validate()
        if r.study_id in seen:
            raise ValueError(f"duplicate study_id {r.study_id}")
        seen.add(r.study_id)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for r in records:
            writer.writerow([r.study_id, f"{r.age:.1f}", r.sex, r.label, r.volume_path])


def read_manifest(path: str) -> list[StudyRecord]:
    with open(path, encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != MANIFEST_HEADER:
            raise ValueError(f"{path}: unexpected manifest header {header}")
        records = []
        for row in reader:
            if not row:
                continue
            rec = StudyRecord(
                study_id=row[0],
                age=float(row[1]),
                sex=row[2],
                label=int(row[3]),
                volume_path=row[4] if len(row) > 4 else "",
            )
            rec.validate()
            records.append(rec)
    return records


def balance_cohort(
    records: list[StudyRecord],
    age_caliper_years: float = DEFAULT_AGE_CALIPER_YEARS,
    seed: int = 0,
) -> list[StudyRecord]:
    """Greedy matched subsampling toward equal class demographics.

    Positives are visited in seeded random order; each takes the unused
    negative of the same sex with the nearest age (ties broken by lower
    study_id).  Positives with no same-sex negative within the age
    caliper are dropped.  The result interleaves each matched pair
    (positive, then its negative).
    """
    positives = [r for r in records if r.label == 1]
    negatives = [r for r in records if r.label == 0]
    if not positives or not negatives:
        raise ValueError("balance_cohort requires both classes to be non-empty")

    positives = sorted(positives, key=lambda r: r.study_id)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(positives))

    free: dict[str, list[StudyRecord]] = {"F": [], "M": []}
    for r in sorted(negatives, key=lambda r: r.study_id):
        free[r.sex].append(r)

    out: list[StudyRecord] = []
    for idx in order:
        pos = positives[idx]
        pool = free[pos.sex]
        if not pool:
            continue
        best = min(pool, key=lambda r: (abs(r.age - pos.age), r.study_id))
        if abs(best.age - pos.age) > age_caliper_years:
            continue
        pool.remove(best)
        out.append(pos)
        out.append(best)
    return out


def demographics(records: list[StudyRecord]) -> dict[int, dict[str, float]]:
    """Per-class sex proportions and population age statistics."""
    if not records:
        raise ValueError("demographics requires a non-empty record list")
    stats: dict[int, dict[str, float]] = {}
    for label in (0, 1):
        group = [r for r in records if r.label == label]
        if not group:
            continue
        ages = np.array([r.age for r in group], dtype=np.float64)
        n_female = sum(1 for r in group if r.sex == "F")
        stats[label] = {
            "count": len(group),
            "female_fraction": n_female / len(group),
            "male_fraction": (len(group) - n_female) / len(group),
            "age_mean": float(ages.mean()),
            "age_std": float(ages.std()),  # population standard deviation
        }
    return stats


def compute_metrics(predictions, labels, threshold: float = 0.5) -> Metrics:
    """Threshold probabilities and derive the confusion-matrix rates.

    A prediction >= threshold counts as positive.  When a rate's
    denominator is zero (no positives, or no negatives), that rate is
    reported as 1.0: there was nothing to get wrong.
    """
    preds = np.asarray(predictions, dtype=np.float64)
    labs = np.asarray(labels)
    if preds.shape != labs.shape:
        raise ValueError(f"length mismatch: {preds.shape} predictions vs {labs.shape} labels")
    if preds.size == 0:
        raise ValueError("compute_metrics requires non-empty input")
    if not np.all((labs == 0) | (labs == 1)):
        raise ValueError("labels must be binary")
    decided = preds >= threshold
    actual = labs == 1
    tp = int(np.sum(decided & actual))
    fp = int(np.sum(decided & ~actual))
    tn = int(np.sum(~decided & ~actual))
    fn = int(np.sum(~decided & actual))
    total = tp + fp + tn + fn
    accuracy = (tp + tn) / total
    sensitivity = tp / (tp + fn) if (tp + fn) > 0 else 1.0
    specificity = tn / (tn + fp) if (tn + fp) > 0 else 1.0
    return Metrics(
        tp=tp,
        fp=fp,
        tn=tn,
        fn=fn,
        accuracy=accuracy,
        sensitivity=sensitivity,
        specificity=specificity,
    )
