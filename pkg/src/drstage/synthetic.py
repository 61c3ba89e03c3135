"""Synthetic fundus-like images whose grade equals the number of bright blobs.

Used for desk-scale runs and tests in place of the clinical datasets.
Images carry black bands at the top and bottom so cropping shrinks them
to a wide strip and padding restores a square; the full chain runs.
"""
from __future__ import annotations

from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .ingest import DatasetManifest, SampleRecord, write_manifest


# Blob slots: centres of the interior cells of a 4 x 4 grid over the
# padded 64 x 64 frame, i.e. one slot per 8-pixel patch at model side 32.
_SLOTS = [(y, x) for y in (24, 40) for x in (8, 24, 40, 56)]


def render_blobs(grade: int, rng: np.random.Generator, side: int = 64, band: int = 8) -> np.ndarray:
    """``side x side x 3`` uint8 image with ``grade`` yellow blobs on an
    orange elliptical fundus, black outside it and in ``band`` rows at the
    top and bottom.

    Blobs occupy randomly chosen slots aligned with the patch grid of the
    toy model, which keeps the count linearly readable from patch tokens.
    """
    if not 0 <= grade <= 4:
        raise ValueError("grade must lie in 0-4")
    scale = side / 64.0
    img = np.zeros((side, side, 3), dtype=np.float64)
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    c = (side - 1) / 2.0
    ry, rx = (side / 2.0 - band), side / 2.0
    disc = ((yy - c) / ry) ** 2 + ((xx - c) / rx) ** 2 <= 1.0
    tone = np.array([170.0, 70.0, 30.0]) * rng.uniform(0.85, 1.15)
    img[disc] = tone + rng.normal(0.0, 4.0, size=(int(disc.sum()), 3))

    radius = 4.0 * scale
    for k in rng.choice(len(_SLOTS), size=grade, replace=False):
        y, x = _SLOTS[k]
        y = y * scale - 0.5 + rng.uniform(-1.0, 1.0) * scale
        x = x * scale - 0.5 + rng.uniform(-1.0, 1.0) * scale
        img[(yy - y) ** 2 + (xx - x) ** 2 <= radius**2] = (250.0, 240.0, 120.0)

    img[:band] = 0.0
    img[side - band :] = 0.0
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def make_blob_dataset(
    out_dir,
    n: int,
    dataset_id: str = "TOY",
    seed: int = 0,
    images_per_patient: int = 1,
    grades: Optional[list[int]] = None,
    side: int = 64,
) -> DatasetManifest:
    """Write ``n`` PNG images plus ``manifest.csv`` into ``out_dir``.

    Grades cycle through 0-4 unless given explicitly. With
    ``images_per_patient > 1`` consecutive samples share a patient id.
    """
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    if grades is None:
        grades = [i % 5 for i in range(n)]
    records = []
    for i, g in enumerate(grades[:n]):
        sid = f"{dataset_id}-{i:04d}"
        path = out / "images" / f"{sid}.png"
        Image.fromarray(render_blobs(int(g), rng, side)).save(path)
        records.append(
            SampleRecord(
                sample_id=sid,
                dataset_id=dataset_id,
                image_path=str(path.resolve()),
                patient_id=f"{dataset_id}-P{i // images_per_patient:04d}",
                icdr=int(g),
                dme=None,
                gradable=True,
                age_years=None,
                diabetic=None,
            )
        )
    manifest = DatasetManifest(dataset_id, records, {"path": str((out / "manifest.csv").resolve())})
    write_manifest(manifest, out / "manifest.csv")
    return manifest
