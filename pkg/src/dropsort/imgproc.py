"""Frame preprocessing (circular crop, normalization) and augmentation.

These are exactly the transforms applied before training and before
real-time inference: crop to the circular region of interest enclosing
the droplet, then zero-mean / unit-variance normalization over in-mask
pixels. Augmentations (rotations, random translations, mirroring) expand
a labelled training set without changing labels.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage


@dataclass
class Frame:
    """A square grayscale image with pixel calibration.

    pixels are float64 in intensity units (0..255 for rendered frames);
    um_per_px converts pixel lengths to microns.
    """

    pixels: np.ndarray
    um_per_px: float = 1.0

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 2 or self.pixels.size == 0:
            raise ValueError(f"frame must be a non-empty 2-D grid, got shape {self.pixels.shape}")
        if self.um_per_px <= 0:
            raise ValueError(f"um_per_px must be > 0, got {self.um_per_px}")

    @property
    def width_px(self) -> int:
        return self.pixels.shape[1]

    @property
    def height_px(self) -> int:
        return self.pixels.shape[0]


@dataclass
class NormalizedFrame:
    """Zero-mean, unit-variance transform of a Frame (population std)."""

    pixels: np.ndarray
    source_shape: tuple[int, int] = field(default=(0, 0))

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.source_shape == (0, 0):
            self.source_shape = self.pixels.shape


@dataclass(frozen=True)
class MaskSpec:
    """Circular region of interest: (row, col) center, radius, fill for outside."""

    center_px: tuple[float, float]
    radius_px: float
    fill_value: float = 0.0

    def __post_init__(self):
        if self.radius_px <= 0:
            raise ValueError(f"radius_px must be > 0, got {self.radius_px}")


def centered_mask(image_px: int, radius_px: float, fill_value: float = 0.0) -> MaskSpec:
    c = (image_px - 1) / 2.0
    return MaskSpec(center_px=(c, c), radius_px=radius_px, fill_value=fill_value)


def _outside(shape: tuple[int, int], mask: MaskSpec) -> np.ndarray:
    rows = np.arange(shape[0], dtype=np.float64)[:, None] - mask.center_px[0]
    cols = np.arange(shape[1], dtype=np.float64)[None, :] - mask.center_px[1]
    return rows * rows + cols * cols > mask.radius_px * mask.radius_px


def _check_mask_fits(shape: tuple[int, int], mask: MaskSpec) -> None:
    r0, c0 = mask.center_px
    r = mask.radius_px
    if (r0 - r) < -0.5 or (c0 - r) < -0.5 or (r0 + r) > shape[0] - 0.5 or (c0 + r) > shape[1] - 0.5:
        raise ValueError(
            f"mask (center {mask.center_px}, radius {mask.radius_px}) exceeds frame {shape}"
        )


def circular_crop(frame: Frame, mask: MaskSpec) -> Frame:
    """Set every pixel farther than radius from the mask center to fill_value."""
    _check_mask_fits(frame.pixels.shape, mask)
    out = frame.pixels.copy()
    out[_outside(out.shape, mask)] = mask.fill_value
    return Frame(out, frame.um_per_px)


def normalize(frame: Frame, mask: MaskSpec | None = None) -> NormalizedFrame:
    """Mean subtraction followed by division with the (population) std.

    Statistics come from in-mask pixels only when a mask is given, so a
    constant out-of-mask fill cannot bias them. Raises ValueError for a
    constant (zero-variance) scope.
    """
    px = frame.pixels
    scope = px[~_outside(px.shape, mask)] if mask is not None else px.reshape(-1)
    mean = float(scope.mean())
    std = float(scope.std())  # population std: ddof=0
    if std == 0.0:
        raise ValueError("zero variance: cannot normalize a constant image")
    return NormalizedFrame((px - mean) / std, source_shape=px.shape)


def rotate(frame: Frame, degrees: float, center: tuple[float, float], fill_value: float = 0.0) -> Frame:
    """Rotate image content by `degrees` about `center` with bilinear sampling."""
    theta = np.deg2rad(degrees)
    cos, sin = np.cos(theta), np.sin(theta)
    # affine_transform maps output coords to input coords: x_in = M @ x_out + off
    matrix = np.array([[cos, sin], [-sin, cos]])
    center_arr = np.asarray(center, dtype=np.float64)
    offset = center_arr - matrix @ center_arr
    out = ndimage.affine_transform(
        frame.pixels, matrix, offset=offset, order=1, mode="constant", cval=fill_value
    )
    return Frame(out, frame.um_per_px)


def translate(frame: Frame, d_row: int, d_col: int, fill_value: float = 0.0) -> Frame:
    """Shift content by integer offsets; vacated pixels become fill_value."""
    h, w = frame.pixels.shape
    out = np.full((h, w), float(fill_value))
    src_r = slice(max(0, -d_row), min(h, h - d_row))
    src_c = slice(max(0, -d_col), min(w, w - d_col))
    dst_r = slice(max(0, d_row), min(h, h + d_row))
    dst_c = slice(max(0, d_col), min(w, w + d_col))
    if src_r.start < src_r.stop and src_c.start < src_c.stop:
        out[dst_r, dst_c] = frame.pixels[src_r, src_c]
    return Frame(out, frame.um_per_px)


def augment_rotations(frame: Frame, n: int, mask: MaskSpec) -> list[Frame]:
    """n regular rotations by 360*i/n degrees (i = 1..n) about the mask center."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    return [
        rotate(frame, 360.0 * i / n, center=mask.center_px, fill_value=mask.fill_value)
        for i in range(1, n + 1)
    ]


def augment_translations(
    frame: Frame, n: int, max_px: int = 20, seed: int = 0, fill_value: float = 0.0
) -> list[Frame]:
    """n copies shifted by integer offsets drawn uniformly from [-max_px, +max_px]^2."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if max_px < 0:
        raise ValueError(f"max_px must be >= 0, got {max_px}")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        d_row, d_col = rng.integers(-max_px, max_px + 1, size=2)
        out.append(translate(frame, int(d_row), int(d_col), fill_value=fill_value))
    return out


def augment_mirror(frame: Frame) -> list[Frame]:
    """Horizontal flip, vertical flip, and both-axes flip (exact, no resampling)."""
    px = frame.pixels
    return [
        Frame(px[:, ::-1].copy(), frame.um_per_px),
        Frame(px[::-1, :].copy(), frame.um_per_px),
        Frame(px[::-1, ::-1].copy(), frame.um_per_px),
    ]


# --- augmentation plans -------------------------------------------------
#
# A plan is a '+'-separated list of stages applied left to right; each
# stage keeps the originals and appends its transforms, so "rot10" turns
# 300 base images into 3,300 and "mirror" quadruples a set.

def parse_plan(plan: str) -> list[tuple[str, int]]:
    """Parse a plan string like "rot10", "trans10", "mirror", "mirror+rot1"."""
    plan = plan.strip().lower()
    if plan in ("", "none"):
        return []
    stages: list[tuple[str, int]] = []
    for token in plan.split("+"):
        token = token.strip()
        if token == "mirror":
            stages.append(("mirror", 3))
        elif token.startswith("rot") and token[3:].isdigit() and int(token[3:]) >= 1:
            stages.append(("rot", int(token[3:])))
        elif token.startswith("trans") and token[5:].isdigit() and int(token[5:]) >= 1:
            stages.append(("trans", int(token[5:])))
        else:
            raise ValueError(f"unknown augmentation stage {token!r} in plan {plan!r}")
    return stages


def plan_multiplier(plan: str) -> int:
    """Dataset size multiplier of a plan, originals included."""
    mult = 1
    for kind, n in parse_plan(plan):
        mult *= (4 if kind == "mirror" else n + 1)
    return mult


def apply_plan(
    frames: list[Frame],
    labels: list[int],
    plan: str,
    mask: MaskSpec,
    seed: int = 0,
    max_translate_px: int = 20,
) -> tuple[list[Frame], list[int]]:
    """Expand a labelled set of frames according to an augmentation plan.

    Every stage preserves labels; the output size is
    len(frames) * plan_multiplier(plan).
    """
    if len(frames) != len(labels):
        raise ValueError("frames and labels must align")
    cur = list(zip(frames, labels))
    for stage_idx, (kind, n) in enumerate(parse_plan(plan)):
        grown: list[tuple[Frame, int]] = []
        for img_idx, (f, lab) in enumerate(cur):
            grown.append((f, lab))
            if kind == "mirror":
                extra = augment_mirror(f)
            elif kind == "rot":
                extra = augment_rotations(f, n, mask)
            else:
                extra = augment_translations(
                    f, n, max_px=max_translate_px,
                    seed=seed + 1_000_003 * stage_idx + img_idx,
                    fill_value=mask.fill_value,
                )
            grown.extend((g, lab) for g in extra)
        cur = grown
    out_frames = [f for f, _ in cur]
    out_labels = [lab for _, lab in cur]
    return out_frames, out_labels
