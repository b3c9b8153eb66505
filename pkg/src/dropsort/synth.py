"""Procedural droplet-image synthesis with Poisson scene sampling.

Renders grayscale frames of a single droplet containing zero or more
objects of four kinds, each with a distinct appearance:

* PA_BEAD     faint ring at the bead/water interface
* PS_SPHERE   small high-contrast dot with a bright core
* MCF7_CELL   mid-size textured spot
* SPHEROID    large textured blob

Sprites have compact support, so an empty noise-free scene is exactly
the illumination level everywhere except the droplet annulus.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy import ndimage

from .imgproc import Frame
from .pgmio import write_pgm
from .stats import OccupancyModel, poisson_pmf


class ObjectKind(enum.Enum):
    PA_BEAD = "PA"
    PS_SPHERE = "PS"
    MCF7_CELL = "MCF7"
    SPHEROID = "SPHEROID"


# Allowed diameter range per kind, micrometres.
DIAMETER_RANGE_UM = {
    ObjectKind.PA_BEAD: (58.5, 71.5),
    ObjectKind.PS_SPHERE: (9.0, 11.0),
    ObjectKind.MCF7_CELL: (15.0, 20.0),
    ObjectKind.SPHEROID: (20.0, 80.0),
}

# Objects at least this large must not overlap; smaller ones may eclipse.
OVERLAP_MIN_DIAMETER_UM = 20.0
MAX_MOTION_BLUR_UM = 2.0
# Defocus disk-blur radius per micrometre of focus offset.
DEFOCUS_PX_PER_UM = 0.05

# How far the field of view spans; 478 px at 0.335 um/px.
FIELD_UM = 478 * 0.335

CLASS_NAMES = ("empty", "single", "multiple")


class PlacementError(Exception):
    """Non-overlapping placement failed; .counts holds the drawn counts."""

    def __init__(self, message: str, counts: Mapping[ObjectKind, int]):
        super().__init__(message)
        self.counts = dict(counts)


@dataclass(frozen=True)
class ObjectSpec:
    kind: ObjectKind
    diameter_um: float
    center_um: tuple[float, float]  # (x, y) offset from droplet centre
    focus_offset_um: float = 0.0

    def __post_init__(self):
        lo, hi = DIAMETER_RANGE_UM[self.kind]
        if not lo <= self.diameter_um <= hi:
            raise ValueError(
                f"{self.kind.name} diameter {self.diameter_um} um outside [{lo}, {hi}]"
            )


@dataclass(frozen=True)
class DropletScene:
    droplet_diameter_um: float = 100.0
    objects: tuple[ObjectSpec, ...] = ()
    noise_sigma: float = 0.0
    illumination: float = 170.0
    motion_blur_um: float = 0.0


@dataclass(frozen=True)
class RenderConfig:
    image_px: int = 478
    um_per_px: float = 0.335
    bit_depth: int = 8

    def __post_init__(self):
        if self.image_px < 64:
            raise ValueError(f"image_px {self.image_px} below minimum 64")
        if self.um_per_px <= 0:
            raise ValueError("um_per_px must be positive")
        if self.bit_depth != 8:
            raise ValueError("only 8-bit output is supported")


def scaled_config(image_px: int) -> RenderConfig:
    """Config covering the standard field of view at a reduced resolution."""
    return RenderConfig(image_px=image_px, um_per_px=FIELD_UM / image_px)


@dataclass(frozen=True)
class GroundTruth:
    counts: Mapping[ObjectKind, int]
    objects: tuple[ObjectSpec, ...]

    @classmethod
    def from_objects(cls, objects: Sequence[ObjectSpec]) -> "GroundTruth":
        counts = {kind: 0 for kind in ObjectKind}
        for obj in objects:
            counts[obj.kind] += 1
        return cls(counts=counts, objects=tuple(objects))

    def __post_init__(self):
        recount = {kind: 0 for kind in ObjectKind}
        for obj in self.objects:
            recount[obj.kind] += 1
        for kind in ObjectKind:
            if recount[kind] != self.counts.get(kind, 0):
                raise ValueError(f"counts do not match object list for {kind.name}")


def validate_scene(scene: DropletScene) -> None:
    if scene.droplet_diameter_um <= 0:
        raise ValueError("droplet diameter must be positive")
    if scene.noise_sigma < 0:
        raise ValueError("noise_sigma must be non-negative")
    if not 0 <= scene.illumination <= 255:
        raise ValueError("illumination must lie in [0, 255]")
    if not 0 <= scene.motion_blur_um <= MAX_MOTION_BLUR_UM:
        raise ValueError(f"motion blur must lie in [0, {MAX_MOTION_BLUR_UM}] um")
    r_drop = scene.droplet_diameter_um / 2
    for obj in scene.objects:
        dist = math.hypot(*obj.center_um)
        if dist + obj.diameter_um / 2 > r_drop + 1e-9:
            raise ValueError(
                f"{obj.kind.name} at {obj.center_um} pokes outside the droplet"
            )
    big = [o for o in scene.objects if o.diameter_um >= OVERLAP_MIN_DIAMETER_UM]
    for i, a in enumerate(big):
        for b in big[i + 1:]:
            gap = math.hypot(a.center_um[0] - b.center_um[0],
                             a.center_um[1] - b.center_um[1])
            if gap < (a.diameter_um + b.diameter_um) / 2 - 1e-9:
                raise ValueError(
                    f"{a.kind.name} and {b.kind.name} overlap (centres {gap:.1f} um apart)"
                )


def _bump(t: np.ndarray) -> np.ndarray:
    # Smooth compact bump: 1 at t=0, exactly 0 for |t| >= 1.
    out = np.zeros_like(t)
    inside = np.abs(t) < 1.0
    out[inside] = 0.5 * (1.0 + np.cos(np.pi * t[inside]))
    return out


def _ramp(r: np.ndarray, r_flat: float, r_zero: float) -> np.ndarray:
    # 1 for r <= r_flat, cosine falloff to exactly 0 at r >= r_zero.
    out = np.ones_like(r)
    out[r >= r_zero] = 0.0
    edge = (r > r_flat) & (r < r_zero)
    t = (r[edge] - r_flat) / (r_zero - r_flat)
    out[edge] = 0.5 * (1.0 + np.cos(np.pi * t))
    return out


def _local_grid(center_rc, radius_px, pad_px, shape):
    """Bounding box [r0:r1, c0:c1] plus distance-from-centre grid."""
    reach = radius_px + pad_px
    r0 = max(0, int(math.floor(center_rc[0] - reach)))
    r1 = min(shape[0], int(math.ceil(center_rc[0] + reach)) + 1)
    c0 = max(0, int(math.floor(center_rc[1] - reach)))
    c1 = min(shape[1], int(math.ceil(center_rc[1] + reach)) + 1)
    if r0 >= r1 or c0 >= c1:
        return None
    rows = np.arange(r0, r1, dtype=np.float64)[:, None] - center_rc[0]
    cols = np.arange(c0, c1, dtype=np.float64)[None, :] - center_rc[1]
    return (r0, r1, c0, c1), np.hypot(rows, cols)


def _texture(shape, corr_px, rng):
    tex = ndimage.gaussian_filter(rng.standard_normal(shape), corr_px,
                                  mode="constant")
    std = tex.std()
    return tex / std if std > 0 else tex


def _object_deviation(obj: ObjectSpec, r: np.ndarray, radius_px: float,
                      um_per_px: float, rng: np.random.Generator) -> np.ndarray:
    if obj.kind is ObjectKind.PA_BEAD:
        width = max(1.5, 0.06 * radius_px)
        return -16.0 * _bump((r - radius_px) / width)
    if obj.kind is ObjectKind.PS_SPHERE:
        dev = -90.0 * _ramp(r, 0.8 * radius_px, radius_px)
        dev += 150.0 * _ramp(r, 0.2 * radius_px, 0.45 * radius_px)
        return dev
    if obj.kind is ObjectKind.MCF7_CELL:
        base, tex_amp, corr_um = 35.0, 22.0, 1.5
    else:  # SPHEROID
        base, tex_amp, corr_um = 30.0, 26.0, 2.5
    window = _ramp(r, 0.75 * radius_px, radius_px)
    dev = -base * window
    dev += tex_amp * _texture(r.shape, corr_um / um_per_px, rng) * window
    return dev


def render_scene(scene: DropletScene, cfg: RenderConfig,
                 seed) -> tuple[Frame, GroundTruth]:
    """Render a validated scene; deterministic for a fixed seed."""
    validate_scene(scene)
    rng = np.random.default_rng(seed)
    n = cfg.image_px
    center = (n - 1) / 2.0
    dev = np.zeros((n, n))

    # dark annulus at the droplet boundary
    r_drop_px = scene.droplet_diameter_um / 2 / cfg.um_per_px
    ann_width = max(1.5, 2.5 / cfg.um_per_px)
    box = _local_grid((center, center), r_drop_px, ann_width, (n, n))
    if box is not None:
        (r0, r1, c0, c1), r = box
        dev[r0:r1, c0:c1] -= 55.0 * _bump((r - r_drop_px) / ann_width)

    for obj in scene.objects:
        radius_px = obj.diameter_um / 2 / cfg.um_per_px
        blur_px = DEFOCUS_PX_PER_UM * abs(obj.focus_offset_um)
        pad = max(1.5, 0.06 * radius_px) + math.ceil(blur_px) + 1
        rc = (center + obj.center_um[1] / cfg.um_per_px,
              center + obj.center_um[0] / cfg.um_per_px)
        box = _local_grid(rc, radius_px, pad, (n, n))
        if box is None:
            continue
        (r0, r1, c0, c1), r = box
        sprite = _object_deviation(obj, r, radius_px, cfg.um_per_px, rng)
        if blur_px >= 0.5:
            kr = math.ceil(blur_px)
            yy, xx = np.mgrid[-kr:kr + 1, -kr:kr + 1]
            kern = (np.hypot(yy, xx) <= blur_px).astype(np.float64)
            kern /= kern.sum()
            sprite = ndimage.convolve(sprite, kern, mode="constant")
        dev[r0:r1, c0:c1] += sprite

    if scene.motion_blur_um > 0:
        size = round(scene.motion_blur_um / cfg.um_per_px)
        if size >= 2:
            dev = ndimage.uniform_filter1d(dev, size, axis=1, mode="constant")

    pixels = scene.illumination + dev
    if scene.noise_sigma > 0:
        pixels = pixels + rng.normal(0.0, scene.noise_sigma, pixels.shape)
    frame = Frame(pixels=pixels, um_per_px=cfg.um_per_px)
    return frame, GroundTruth.from_objects(scene.objects)


def poisson_at_least(rng: np.random.Generator, lam: float, minimum: int) -> int:
    """Draw from Poisson(lam) conditioned on k >= minimum via inverse CDF."""
    if lam <= 0:
        raise ValueError("conditioning on k >= %d needs lam > 0" % minimum)
    tail = 1.0 - sum(poisson_pmf(k, lam) for k in range(minimum))
    if tail <= 0:
        raise ValueError("conditional tail has no mass")
    u = rng.random() * tail
    acc = 0.0
    k = minimum
    while True:
        acc += poisson_pmf(k, lam)
        if u <= acc or k > minimum + 200:
            return k
        k += 1


def sample_scene(models: Mapping[ObjectKind, OccupancyModel], cfg: RenderConfig,
                 seed, *, template: DropletScene | None = None,
                 focus_jitter_um: float = 0.0,
                 counts_override: Mapping[ObjectKind, int] | None = None,
                 max_attempts: int = 200) -> DropletScene:
    """Draw Poisson counts per kind and place objects uniformly in the droplet.

    Objects of 20 um and above are rejection-sampled to avoid overlap;
    when that fails after bounded retries a PlacementError carrying the
    drawn counts is raised (some count combinations cannot pack at all).
    """
    rng = np.random.default_rng(seed)
    template = template or DropletScene()
    counts: dict[ObjectKind, int] = {}
    for kind in ObjectKind:  # fixed iteration order keeps draws reproducible
        if counts_override is not None and kind in counts_override:
            counts[kind] = int(counts_override[kind])
        elif kind in models:
            lam = models[kind].lam
            if lam < 0:
                raise ValueError("lambda must be non-negative")
            counts[kind] = int(rng.poisson(lam))
        else:
            counts[kind] = 0

    r_drop = template.droplet_diameter_um / 2
    todo: list[tuple[ObjectKind, float, float]] = []
    for kind in ObjectKind:
        lo, hi = DIAMETER_RANGE_UM[kind]
        for _ in range(counts[kind]):
            d = float(rng.uniform(lo, hi))
            focus = float(rng.uniform(-focus_jitter_um, focus_jitter_um)) \
                if focus_jitter_um > 0 else 0.0
            todo.append((kind, d, focus))
    # place big objects first; packing is tightest for them
    todo.sort(key=lambda t: -t[1])

    placed: list[ObjectSpec] = []
    for kind, d, focus in todo:
        r_max = r_drop - d / 2
        if r_max < 0:
            raise PlacementError(
                f"{kind.name} of {d:.1f} um cannot fit in a "
                f"{template.droplet_diameter_um:.0f} um droplet", counts)
        for attempt in range(max_attempts):
            rad = r_max * math.sqrt(rng.random())
            ang = 2 * math.pi * rng.random()
            x, y = rad * math.cos(ang), rad * math.sin(ang)
            if d >= OVERLAP_MIN_DIAMETER_UM:
                clash = any(
                    math.hypot(x - p.center_um[0], y - p.center_um[1])
                    < (d + p.diameter_um) / 2
                    for p in placed if p.diameter_um >= OVERLAP_MIN_DIAMETER_UM)
                if clash:
                    continue
            placed.append(ObjectSpec(kind=kind, diameter_um=d,
                                     center_um=(x, y), focus_offset_um=focus))
            break
        else:
            raise PlacementError(
                f"could not place {kind.name} without overlap after "
                f"{max_attempts} attempts", counts)

    return DropletScene(
        droplet_diameter_um=template.droplet_diameter_um,
        objects=tuple(placed),
        noise_sigma=template.noise_sigma,
        illumination=template.illumination,
        motion_blur_um=template.motion_blur_um,
    )


def label_of(gt: GroundTruth, target: ObjectKind) -> int:
    """Class index from the count of the target kind only: 0/1/2+ -> 0/1/2."""
    n = gt.counts.get(target, 0)
    return 0 if n == 0 else 1 if n == 1 else 2


@dataclass(frozen=True)
class CountRule:
    """Target-kind count conditioning: exact value or conditioned tail."""
    mode: str  # "exact" or "at_least"
    value: int

    def __post_init__(self):
        if self.mode not in ("exact", "at_least"):
            raise ValueError(f"unknown count rule {self.mode!r}")
        if self.value < 0:
            raise ValueError("count rule value must be non-negative")


@dataclass(frozen=True)
class ClassRecipe:
    name: str
    target: ObjectKind
    rule: CountRule
    lambdas: Mapping[ObjectKind, float] = field(default_factory=dict)


MANIFEST_COLUMNS = ("path", "class", "target_kind", "seed",
                    "n_PA", "n_PS", "n_MCF7", "n_SPHEROID")
_KIND_COLUMN = {
    ObjectKind.PA_BEAD: "n_PA",
    ObjectKind.PS_SPHERE: "n_PS",
    ObjectKind.MCF7_CELL: "n_MCF7",
    ObjectKind.SPHEROID: "n_SPHEROID",
}


@dataclass(frozen=True)
class ManifestRow:
    path: str
    label: int
    target_kind: ObjectKind
    seed: int
    counts: Mapping[ObjectKind, int]


def write_manifest(rows: Sequence[ManifestRow], path) -> None:
    lines = ["\t".join(MANIFEST_COLUMNS)]
    for row in rows:
        cells = [row.path, str(row.label), row.target_kind.name, str(row.seed)]
        cells += [str(row.counts.get(k, 0)) for k in ObjectKind]
        lines.append("\t".join(cells))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path) -> list[ManifestRow]:
    text = Path(path).read_text(encoding="utf-8")
    lines = [ln for ln in text.splitlines() if ln]
    if not lines or lines[0].split("\t") != list(MANIFEST_COLUMNS):
        raise ValueError(f"{path} is not a dataset manifest")
    rows = []
    for ln in lines[1:]:
        cells = ln.split("\t")
        if len(cells) != len(MANIFEST_COLUMNS):
            raise ValueError(f"malformed manifest row: {ln!r}")
        counts = {k: int(c) for k, c in zip(ObjectKind, cells[4:])}
        rows.append(ManifestRow(path=cells[0], label=int(cells[1]),
                                target_kind=ObjectKind[cells[2]],
                                seed=int(cells[3]), counts=counts))
    return rows


def _image_seed(seed: int, class_idx: int, img_idx: int, attempt: int) -> int:
    ss = np.random.SeedSequence((seed, class_idx, img_idx, attempt))
    return int(ss.generate_state(1, np.uint64)[0])


def generate_dataset(classes: Sequence[ClassRecipe], n_per_class: int,
                     cfg: RenderConfig, out_dir, seed: int, *,
                     template: DropletScene | None = None,
                     focus_jitter_um: float = 0.0,
                     manifest_name: str = "manifest.tsv") -> Path:
    """Render a class-balanced dataset of PGM files plus a TSV manifest.

    Counts for the target kind are conditioned per the class rule rather
    than rejection-sampled, so every class gets exactly n_per_class
    images. Scenes whose drawn counts cannot pack are redrawn with a
    derived seed.
    """
    if n_per_class < 1:
        raise ValueError("n_per_class must be at least 1")
    names = [c.name for c in classes]
    if len(set(names)) != len(names):
        raise ValueError("class recipe names must be unique")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    rows: list[ManifestRow] = []
    for class_idx, recipe in enumerate(classes):
        models = {k: OccupancyModel(lam) for k, lam in recipe.lambdas.items()}
        for img_idx in range(n_per_class):
            for attempt in range(50):
                img_seed = _image_seed(seed, class_idx, img_idx, attempt)
                rng = np.random.default_rng(img_seed)
                if recipe.rule.mode == "exact":
                    forced = recipe.rule.value
                else:
                    forced = poisson_at_least(
                        rng, recipe.lambdas[recipe.target], recipe.rule.value)
                try:
                    scene = sample_scene(
                        models, cfg, rng, template=template,
                        focus_jitter_um=focus_jitter_um,
                        counts_override={recipe.target: forced})
                except PlacementError:
                    continue
                break
            else:
                raise PlacementError(
                    f"class {recipe.name!r} image {img_idx} never packed",
                    {recipe.target: -1})
            frame, gt = render_scene(scene, cfg, rng)
            fname = f"{recipe.name}_{img_idx:05d}.pgm"
            write_pgm(out_dir / fname, frame.pixels)
            rows.append(ManifestRow(path=fname, label=class_idx,
                                    target_kind=recipe.target, seed=img_seed,
                                    counts=gt.counts))
    manifest = out_dir / manifest_name
    write_manifest(rows, manifest)
    return manifest
