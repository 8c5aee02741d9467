"""Binary classification evaluation: confusion counts, AUROC, pooled folds.

The positive class is the tear class (label 1); scores are its predicted
probability.  Fields with a zero denominator are reported as None rather
than raised, because an undefined PPV on a small fold is data, not a bug.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path


class UndefinedMetricError(ValueError):
    """AUROC requested for a single-class label set."""


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self):
        for name in ("tp", "fp", "fn", "tn"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.tp + other.tp, self.fp + other.fp,
                               self.fn + other.fn, self.tn + other.tn)


def confusion(scores, labels, threshold: float = 0.5) -> ConfusionMatrix:
    """Count outcomes with prediction positive iff ``score >= threshold``."""
    if len(scores) != len(labels):
        raise ValueError(f"{len(scores)} scores vs {len(labels)} labels")
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must be in [0, 1], got {threshold}")
    tp = fp = fn = tn = 0
    for s, y in zip(scores, labels):
        if y not in (0, 1):
            raise ValueError(f"labels must be 0 or 1, got {y!r}")
        pred = s >= threshold
        if pred and y == 1:
            tp += 1
        elif pred and y == 0:
            fp += 1
        elif not pred and y == 1:
            fn += 1
        else:
            tn += 1
    return ConfusionMatrix(tp, fp, fn, tn)


def basic_metrics(cm: ConfusionMatrix) -> dict:
    """Accuracy, PPV, and NPV from counts; None marks a zero denominator."""
    return {
        "accuracy": (cm.tp + cm.tn) / cm.total if cm.total else None,
        "ppv": cm.tp / (cm.tp + cm.fp) if cm.tp + cm.fp else None,
        "npv": cm.tn / (cm.tn + cm.fn) if cm.tn + cm.fn else None,
    }


def auroc(scores, labels) -> tuple[float, list[tuple[float, float]]]:
    """Area under the ROC curve plus the curve's (fpr, tpr) points.

    The curve sweeps thresholds over the distinct scores and the area uses
    the trapezoid rule, which equals the probability that a random positive
    outscores a random negative with ties given half credit.
    """
    if len(scores) != len(labels):
        raise ValueError(f"{len(scores)} scores vs {len(labels)} labels")
    n_pos = sum(1 for y in labels if y == 1)
    n_neg = sum(1 for y in labels if y == 0)
    if n_pos + n_neg != len(labels):
        raise ValueError("labels must be 0 or 1")
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs at least one positive and one negative")
    points = [(0.0, 0.0)]
    tp = fp = 0
    for t in sorted(set(scores), reverse=True):
        tp = sum(1 for s, y in zip(scores, labels) if y == 1 and s >= t)
        fp = sum(1 for s, y in zip(scores, labels) if y == 0 and s >= t)
        points.append((fp / n_neg, tp / n_pos))
    area = 0.0
    for (x0, y0), (x1, y1) in zip(points, points[1:]):
        area += (x1 - x0) * (y0 + y1) / 2.0
    return area, points


@dataclass(frozen=True)
class Prediction:
    """One image's classifier output, as persisted between train and eval."""

    image_path: str
    subject_id: str
    label: int
    score: float


PREDICTIONS_HEADER = ["image_path", "subject_id", "label", "score"]


def write_predictions(preds: list[Prediction], path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(PREDICTIONS_HEADER)
        for p in preds:
            writer.writerow([p.image_path, p.subject_id, p.label, repr(float(p.score))])


def read_predictions(path) -> list[Prediction]:
    preds: list[Prediction] = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or [c.strip() for c in header] != PREDICTIONS_HEADER:
            raise ValueError(
                f"predictions CSV must have header {','.join(PREDICTIONS_HEADER)}: {path}"
            )
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 4:
                raise ValueError(f"{path} row {lineno}: expected 4 fields")
            preds.append(Prediction(row[0], row[1], int(row[2]), float(row[3])))
    return preds


@dataclass(frozen=True)
class FoldMetrics:
    fold: int | None
    cm: ConfusionMatrix
    accuracy: float | None
    auroc: float | None
    ppv: float | None
    npv: float | None

    def to_dict(self) -> dict:
        d = {"tp": self.cm.tp, "fp": self.cm.fp, "fn": self.cm.fn, "tn": self.cm.tn,
             "accuracy": self.accuracy, "auroc": self.auroc,
             "ppv": self.ppv, "npv": self.npv}
        if self.fold is not None:
            d["fold"] = self.fold
        return d


@dataclass
class EvalReport:
    """Per-fold and pooled classification metrics over k-fold test predictions."""

    per_fold: list[FoldMetrics]
    pooled: FoldMetrics
    roc_points: list[tuple[float, float]]
    auroc_mean_folds: float | None
    subject_vote_accuracy: float | None = None

    def to_json_dict(self) -> dict:
        return {
            "per_fold": [fm.to_dict() for fm in self.per_fold],
            "pooled": self.pooled.to_dict(),
            "roc": [[fpr, tpr] for fpr, tpr in self.roc_points],
            "auroc_mean_folds": self.auroc_mean_folds,
            "subject_vote_accuracy": self.subject_vote_accuracy,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), indent=2, sort_keys=True) + "\n"


def _fold_metrics(fold: int | None, preds: list[Prediction],
                  threshold: float) -> tuple[FoldMetrics, list[tuple[float, float]]]:
    scores = [p.score for p in preds]
    labels = [p.label for p in preds]
    cm = confusion(scores, labels, threshold)
    basics = basic_metrics(cm)
    try:
        auc, points = auroc(scores, labels)
    except UndefinedMetricError:
        auc, points = None, []
    return FoldMetrics(fold=fold, cm=cm, accuracy=basics["accuracy"], auroc=auc,
                       ppv=basics["ppv"], npv=basics["npv"]), points


def pool_folds(per_fold_predictions: list[list[Prediction]],
               threshold: float = 0.5) -> EvalReport:
    """Combine each fold's test predictions into per-fold and pooled metrics.

    Each image must appear in exactly one fold.  The pooled confusion matrix
    equals the sum of the fold matrices by construction; the pooled AUROC is
    computed over the concatenated predictions and reported separately from
    the mean of the per-fold AUROCs.  A subject-level majority vote (ties
    toward positive) is included as a side summary only.
    """
    seen: set[str] = set()
    for preds in per_fold_predictions:
        for p in preds:
            if p.image_path in seen:
                raise ValueError(f"image {p.image_path} appears in more than one fold")
            seen.add(p.image_path)
    per_fold = []
    for i, preds in enumerate(per_fold_predictions):
        fm, _ = _fold_metrics(i, preds, threshold)
        per_fold.append(fm)
    pooled_preds = [p for preds in per_fold_predictions for p in preds]
    if not pooled_preds:
        raise ValueError("no predictions to pool")
    pooled, roc_points = _fold_metrics(None, pooled_preds, threshold)
    defined = [fm.auroc for fm in per_fold if fm.auroc is not None]
    mean_auroc = sum(defined) / len(defined) if defined else None
    return EvalReport(per_fold=per_fold, pooled=pooled, roc_points=roc_points,
                      auroc_mean_folds=mean_auroc,
                      subject_vote_accuracy=_subject_vote_accuracy(pooled_preds, threshold))


def _subject_vote_accuracy(preds: list[Prediction], threshold: float) -> float | None:
    by_subject: dict[str, list[Prediction]] = {}
    for p in preds:
        by_subject.setdefault(p.subject_id, []).append(p)
    correct = 0
    for subject, group in by_subject.items():
        votes = sum(1 for p in group if p.score >= threshold)
        pred = 1 if votes * 2 >= len(group) else 0
        if pred == group[0].label:
            correct += 1
    return correct / len(by_subject) if by_subject else None


def load_fold_predictions(run_dir) -> list[list[Prediction]]:
    """Read ``fold_*/predictions.csv`` under a training output directory."""
    run_dir = Path(run_dir)
    fold_dirs = sorted(
        (d for d in run_dir.glob("fold_*") if d.is_dir() and d.name[5:].isdigit()),
        key=lambda d: int(d.name[5:]),
    )
    files = [d / "predictions.csv" for d in fold_dirs]
    files = [f for f in files if f.is_file()]
    if not files:
        raise FileNotFoundError(f"no fold_*/predictions.csv under {run_dir}")
    return [read_predictions(f) for f in files]
