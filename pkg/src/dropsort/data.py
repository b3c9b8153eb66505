"""Dataset loading and the standard preprocessing pipeline.

Frames come from PGM files listed in a TSV manifest; preprocessing is a
per-frame z-score (population statistics), which makes inference
invariant to affine exposure changes a*f + b with a > 0.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import imgproc
from .pgmio import read_pgm
from .synth import ManifestRow, read_manifest


def load_frames(manifest_path) -> tuple[list[imgproc.Frame], list[int],
                                        list[ManifestRow]]:
    """Raw frames (float64) plus labels, in manifest order."""
    manifest_path = Path(manifest_path)
    rows = read_manifest(manifest_path)
    base = manifest_path.parent
    frames, labels = [], []
    for row in rows:
        px = read_pgm(base / row.path).astype(np.float64)
        frames.append(imgproc.Frame(pixels=px, um_per_px=1.0))
        labels.append(row.label)
    return frames, labels, rows


def augmentation_mask(frames: list[imgproc.Frame]) -> imgproc.MaskSpec:
    """Rotation/translation mask: image centre, with the fill level taken
    from frame corners (pure background in rendered scenes)."""
    n = frames[0].pixels.shape[0]
    corners = [f.pixels[r, c] for f in frames for r in (0, -1) for c in (0, -1)]
    return imgproc.centered_mask(n, n / 2 - 1, fill_value=float(np.median(corners)))


def preprocess(frame: imgproc.Frame) -> np.ndarray:
    return imgproc.normalize(frame).pixels


def to_arrays(frames: list[imgproc.Frame], labels) -> tuple[np.ndarray, np.ndarray]:
    x = np.stack([preprocess(f) for f in frames])
    return x, np.asarray(labels, dtype=np.int64)


def load_dataset(manifest_path, plan: str = "none",
                 seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Load, optionally augment (raw domain), and z-score a dataset."""
    frames, labels, _ = load_frames(manifest_path)
    if imgproc.plan_multiplier(plan) > 1:
        mask = augmentation_mask(frames)
        frames, labels = imgproc.apply_plan(frames, labels, plan, mask, seed=seed)
    return to_arrays(frames, labels)
