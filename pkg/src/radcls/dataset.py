"""Dataset manifest: parsing, validation, and subject-grouped stratified folds.

A manifest is a CSV with header ``subject_id,view,label,image_path,x,y,w,h``
where the four box columns may be empty.  All records of one subject carry
the same diagnosis label, and cross-validation splits keep every view of a
subject on the same side of each fold.
"""

from __future__ import annotations

import csv
import json
import random
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

from PIL import Image, UnidentifiedImageError

from .boxes import BBox

MANIFEST_HEADER = ["subject_id", "view", "label", "image_path", "x", "y", "w", "h"]


class View(str, Enum):
    AXIAL = "axial"
    GLENOID = "glenoid"
    OUTLET = "outlet"
    AP = "ap"


class Label(str, Enum):
    NO_TEAR = "no_tear"
    FRCT = "frct"

    @property
    def index(self) -> int:
        """Class index: frct (the positive class) is 1, no_tear is 0."""
        return 1 if self is Label.FRCT else 0


class ManifestError(Exception):
    """Base class for manifest parsing problems."""


class ManifestFormatError(ManifestError):
    """Header does not match the required column layout."""


class ManifestValueError(ManifestError, ValueError):
    """A row holds an unparseable or unknown value."""


class DuplicateRecordError(ManifestError):
    """Two rows share the same (subject_id, view) pair."""


@dataclass(frozen=True)
class ImageRecord:
    subject_id: str
    view: View
    label: Label
    image_path: str
    roi_box: BBox | None = None

    @property
    def key(self) -> str:
        return f"{self.subject_id}/{self.view.value}"


@dataclass
class Manifest:
    records: list[ImageRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def subjects(self) -> list[str]:
        """Distinct subject ids in first-appearance order."""
        seen: dict[str, None] = {}
        for r in self.records:
            seen.setdefault(r.subject_id, None)
        return list(seen)

    def label_of(self, subject_id: str) -> Label:
        for r in self.records:
            if r.subject_id == subject_id:
                return r.label
        raise KeyError(subject_id)

    def records_of(self, subject_ids) -> list[ImageRecord]:
        wanted = set(subject_ids)
        return [r for r in self.records if r.subject_id in wanted]


def parse_manifest(path) -> Manifest:
    """Parse a manifest CSV, resolving relative image paths against its directory.

    Raises :class:`ManifestFormatError` for a bad header,
    :class:`ManifestValueError` for unknown view/label tokens or malformed
    box values (message carries the 1-based file line), and
    :class:`DuplicateRecordError` for repeated (subject, view) pairs.
    Label conflicts within a subject are left to :func:`validate_dataset`.
    """
    path = Path(path)
    base = path.parent
    records: list[ImageRecord] = []
    seen: dict[tuple[str, str], int] = {}
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None:
            raise ManifestFormatError("empty manifest: missing header row")
        header = [c.strip() for c in header]
        if header != MANIFEST_HEADER:
            missing = [c for c in MANIFEST_HEADER if c not in header]
            if missing:
                raise ManifestFormatError(f"missing column '{missing[0]}'")
            raise ManifestFormatError(
                f"columns must be exactly {','.join(MANIFEST_HEADER)}, got {','.join(header)}"
            )
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(MANIFEST_HEADER):
                raise ManifestValueError(
                    f"row {lineno}: expected {len(MANIFEST_HEADER)} fields, got {len(row)}"
                )
            subject, view_s, label_s, img_path = (c.strip() for c in row[:4])
            if not subject:
                raise ManifestValueError(f"row {lineno}: empty subject_id")
            try:
                view = View(view_s)
            except ValueError:
                raise ManifestValueError(f"row {lineno}: unknown view '{view_s}'") from None
            try:
                label = Label(label_s)
            except ValueError:
                raise ManifestValueError(f"row {lineno}: unknown label '{label_s}'") from None
            box_cells = [c.strip() for c in row[4:8]]
            if all(not c for c in box_cells):
                box = None
            elif any(not c for c in box_cells):
                raise ManifestValueError(
                    f"row {lineno}: box columns must be all set or all empty"
                )
            else:
                try:
                    box = BBox(*(float(c) for c in box_cells))
                except ValueError as e:
                    raise ManifestValueError(f"row {lineno}: bad box: {e}") from None
            if (subject, view_s) in seen:
                raise DuplicateRecordError(
                    f"row {lineno}: duplicate (subject, view) ({subject}, {view_s}), "
                    f"first seen at row {seen[(subject, view_s)]}"
                )
            seen[(subject, view_s)] = lineno
            resolved = img_path if Path(img_path).is_absolute() else str(base / img_path)
            records.append(ImageRecord(subject, view, label, resolved, box))
    return Manifest(records)


@dataclass(frozen=True)
class Violation:
    """One dataset problem found by validation.

    ``row`` is the 0-based index into ``manifest.records`` when the problem
    is tied to a single record, else None.
    """

    code: str
    row: int | None
    message: str

    def to_dict(self) -> dict:
        return {"code": self.code, "row": self.row, "message": self.message}


def validate_dataset(m: Manifest, check_files: bool = True) -> list[Violation]:
    """Check manifest invariants and (optionally) that images exist and decode.

    Violations are data, not failures: the return value is a report, empty
    when the dataset is clean.
    """
    report: list[Violation] = []
    labels_by_subject: dict[str, set[Label]] = {}
    counts: Counter[str] = Counter()
    pairs: set[tuple[str, View]] = set()
    for i, r in enumerate(m.records):
        labels_by_subject.setdefault(r.subject_id, set()).add(r.label)
        counts[r.subject_id] += 1
        pair = (r.subject_id, r.view)
        if pair in pairs:
            report.append(Violation(
                "duplicate-record", i,
                f"duplicate (subject, view) ({r.subject_id}, {r.view.value})",
            ))
        pairs.add(pair)
    for subject, labels in labels_by_subject.items():
        if len(labels) > 1:
            names = sorted(l.value for l in labels)
            report.append(Violation(
                "label-conflict", None,
                f"subject {subject} labeled both {' and '.join(names)}",
            ))
    for subject, n in counts.items():
        if n > 4:
            report.append(Violation(
                "subject-record-count", None,
                f"subject {subject} has {n} records, expected at most 4",
            ))
    if check_files:
        for i, r in enumerate(m.records):
            p = Path(r.image_path)
            if not p.is_file():
                report.append(Violation("missing-file", i, f"image not found: {r.image_path}"))
                continue
            try:
                with Image.open(p) as im:
                    im.load()
                    if len(im.getbands()) != 1:
                        report.append(Violation(
                            "not-grayscale", i,
                            f"{r.image_path}: {im.mode} image, expected single-band grayscale",
                        ))
            except (UnidentifiedImageError, OSError) as e:
                report.append(Violation("decode-error", i, f"{r.image_path}: {e}"))
    return report


def report_to_json(report: list[Violation]) -> str:
    return json.dumps([v.to_dict() for v in report], indent=2) + "\n"


def report_to_text(report: list[Violation]) -> str:
    if not report:
        return "dataset OK: no violations\n"
    lines = [f"{len(report)} violation(s):"]
    for v in report:
        where = "" if v.row is None else f" [record {v.row}]"
        lines.append(f"  {v.code}{where}: {v.message}")
    return "\n".join(lines) + "\n"


@dataclass
class FoldAssignment:
    """Subject-to-fold map for grouped, stratified k-fold cross-validation."""

    k: int
    fold_of_subject: dict[str, int]

    def test_subjects(self, fold_i: int) -> list[str]:
        return [s for s, f in self.fold_of_subject.items() if f == fold_i]

    def train_subjects(self, fold_i: int) -> list[str]:
        return [s for s, f in self.fold_of_subject.items() if f != fold_i]

    def fold_sizes(self) -> list[int]:
        sizes = [0] * self.k
        for f in self.fold_of_subject.values():
            sizes[f] += 1
        return sizes

    def to_json(self) -> str:
        payload = {"k": self.k, "fold_of_subject": dict(sorted(self.fold_of_subject.items()))}
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "FoldAssignment":
        payload = json.loads(text)
        return cls(k=int(payload["k"]),
                   fold_of_subject={s: int(f) for s, f in payload["fold_of_subject"].items()})


def split_folds(m: Manifest, k: int, seed: int) -> FoldAssignment:
    """Assign each subject to one of ``k`` folds, stratified by class.

    Subjects are shuffled within each class by a seeded RNG and dealt
    round-robin; the dealing cursor continues across classes so overall
    fold sizes stay within one of each other while per-class counts stay
    within one of perfect stratification.  Deterministic per
    ``(manifest, k, seed)``.
    """
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    subjects = m.subjects()
    if len(subjects) < k:
        raise ValueError(f"k={k} exceeds subject count {len(subjects)}")
    label_of = {s: m.label_of(s) for s in subjects}
    rng = random.Random(seed)
    assignment: dict[str, int] = {}
    cursor = 0
    for label in (Label.FRCT, Label.NO_TEAR):
        group = [s for s in subjects if label_of[s] is label]
        rng.shuffle(group)
        for s in group:
            assignment[s] = cursor % k
            cursor += 1
    ordered = {s: assignment[s] for s in subjects}
    return FoldAssignment(k=k, fold_of_subject=ordered)


def write_manifest(m: Manifest, path, relative_to: Path | None = None) -> None:
    """Write a manifest CSV; box columns are left empty for box-less records."""
    path = Path(path)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(MANIFEST_HEADER)
        for r in m.records:
            img_path = r.image_path
            if relative_to is not None:
                try:
                    img_path = str(Path(img_path).relative_to(relative_to))
                except ValueError:
                    pass
            if r.roi_box is None:
                box_cells = ["", "", "", ""]
            else:
                box_cells = [_fmt_num(v) for v in
                             (r.roi_box.x, r.roi_box.y, r.roi_box.w, r.roi_box.h)]
            writer.writerow([r.subject_id, r.view.value, r.label.value, img_path, *box_cells])


def _fmt_num(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else repr(float(v))
