"""Deterministic phantom-radiograph generator.

Produces a label-separable stand-in dataset: each subject gets four views
of a synthetic shoulder (a bright disc for the humeral head, a bar for the
acromion).  Tear subjects have the band between the two structures darkened
by ``signal_strength``; healthy subjects do not.  That band is the only
inter-class difference, and it lies strictly inside the annotated ROI box,
so anything learned from pixels outside the box is noise by construction.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import imaging
from .boxes import BBox
from .dataset import ImageRecord, Label, Manifest, View, write_manifest

_BACKGROUND = 40.0
_TISSUE = 158.0


@dataclass(frozen=True)
class PhantomSpec:
    n_subjects: int
    image_size: int = 160
    signal_strength: float = 0.9
    noise_sigma: float = 6.0
    seed: int = 0

    def __post_init__(self):
        if self.n_subjects < 2:
            raise ValueError(f"n_subjects must be >= 2, got {self.n_subjects}")
        if self.image_size < 32:
            raise ValueError(f"image_size must be >= 32, got {self.image_size}")
        if not 0.0 < self.signal_strength <= 1.0:
            raise ValueError(
                f"signal_strength must be in (0, 1], got {self.signal_strength}")
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")


def subject_label(subject_index: int) -> Label:
    """Alternating labels: even indices tear, odd healthy (split within 1)."""
    return Label.FRCT if subject_index % 2 == 0 else Label.NO_TEAR


def _render_view(spec: PhantomSpec, subject_index: int, view_index: int,
                 label: Label) -> tuple[np.ndarray, BBox]:
    """One phantom image plus its ROI box.

    All random draws happen before the defect is applied and the defect
    itself draws nothing, so flipping the label changes band pixels only.
    """
    size = spec.image_size
    rng = np.random.default_rng(
        [spec.seed & 0xFFFFFFFF, subject_index, view_index])
    jitter = rng.uniform(-1.0, 1.0, size=6)

    cx = size * (0.50 + 0.03 * jitter[0])
    cy = size * (0.62 + 0.03 * jitter[1])
    radius = size * (0.20 + 0.02 * jitter[2])
    bar_y = size * (0.25 + 0.02 * jitter[3])
    bar_h = size * (0.07 + 0.01 * jitter[4])
    tissue = _TISSUE + 4.0 * jitter[5]

    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    img = _BACKGROUND + 6.0 + 22.0 * (yy / size) + 4.0 * view_index

    dist = np.sqrt((xx - cx) ** 2 + (yy - cy) ** 2)
    disc = dist <= radius
    img[disc] = 150.0 + 40.0 * (1.0 - dist[disc] / radius)

    bar = (yy >= bar_y) & (yy < bar_y + bar_h) & (xx >= 0.18 * size) & (xx < 0.82 * size)
    img[bar] = 200.0

    band_y0 = bar_y + bar_h + 0.01 * size
    band_y1 = band_y0 + 0.10 * size
    band = (yy >= band_y0) & (yy < band_y1) & (xx >= 0.30 * size) & (xx < 0.70 * size)
    img[band] = tissue
    if label is Label.FRCT:
        img[band] = tissue - spec.signal_strength * (tissue - _BACKGROUND)

    if spec.noise_sigma > 0:
        img = img + rng.normal(0.0, spec.noise_sigma, size=img.shape)

    x0 = int(round(0.24 * size))
    y0 = int(round(bar_y - 0.03 * size))
    x1 = int(round(0.76 * size))
    y1 = int(round(band_y1 + 0.10 * size))
    roi = BBox(x0, y0, x1 - x0, y1 - y0)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8), roi


def generate(spec: PhantomSpec, out_dir) -> Manifest:
    """Write phantom PNGs and a manifest under ``out_dir``; returns the manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    views = list(View)
    records = []
    for si in range(spec.n_subjects):
        sid = f"P{si:03d}"
        label = subject_label(si)
        for vi, view in enumerate(views):
            img, roi = _render_view(spec, si, vi, label)
            path = out_dir / f"{sid}_{view.value}.png"
            imaging.save_gray(img, path)
            records.append(ImageRecord(sid, view, label, path, roi))
    manifest = Manifest(records)
    write_manifest(manifest, out_dir / "manifest.csv", relative_to=out_dir)
    return manifest
