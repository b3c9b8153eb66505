"""Preset experiment scenarios and droplet-stream builders.

Each scenario bundles the occupancy rates, class recipes, dataset sizes,
augmentation plan, and sorting threshold for one experiment. Streams
come in two flavours: label-only (no pixels, for stub classifiers) and
rendered (frames attached, for the CNN path).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .sorter import DropletEvent
from .stats import OccupancyModel
from .synth import (DIAMETER_RANGE_UM, ClassRecipe, CountRule, DropletScene,
                    GroundTruth, ObjectKind, ObjectSpec, PlacementError,
                    RenderConfig, poisson_at_least, label_of, render_scene,
                    sample_scene)

SCENARIO_NAMES = ("pa_single", "ps_single", "mcf7_single", "mixture_mcf7_pa",
                  "mixture_mcf7_ps", "double_poisson", "spheroid")


@dataclass(frozen=True)
class ScenarioSpec:
    name: str
    description: str
    target_kind: ObjectKind
    target_class: int
    classes: tuple[ClassRecipe, ...]
    lambdas: Mapping[ObjectKind, float]
    template: DropletScene
    focus_jitter_um: float = 25.0
    n_train: int = 125
    n_val: int = 20
    plan: str = "none"
    theta: float = 0.9
    stream_len: int = 1000
    stream_prevalence: float | None = None
    # "kind": count of target kind; "joint": exactly one of target and
    # second kind; "presence": spheroid > cell > empty hierarchy
    label_mode: str = "kind"
    second_kind: ObjectKind | None = None
    # small datasets train noticeably better below the library default
    batch_size: int = 4


def _single_kind_classes(kind: ObjectKind, lam: float) -> tuple[ClassRecipe, ...]:
    lambdas = {kind: lam}
    return (ClassRecipe("empty", kind, CountRule("exact", 0), lambdas),
            ClassRecipe("single", kind, CountRule("exact", 1), lambdas),
            ClassRecipe("multiple", kind, CountRule("at_least", 2), lambdas))


def _mixture_classes(target: ObjectKind, lam: float,
                     background: Mapping[ObjectKind, float]) -> tuple[ClassRecipe, ...]:
    lambdas = dict(background)
    lambdas[target] = lam
    return (ClassRecipe("empty", target, CountRule("exact", 0), lambdas),
            ClassRecipe("single", target, CountRule("exact", 1), lambdas),
            ClassRecipe("multiple", target, CountRule("at_least", 2), lambdas))


# PA beads are 58.5-71.5 um wide; several only pack into the wider
# droplet, so bead scenarios image a 160 um droplet filling the field.
_BEAD_DROPLET = DropletScene(droplet_diameter_um=160.0, noise_sigma=1.5)
_CELL_DROPLET = DropletScene(droplet_diameter_um=100.0, noise_sigma=1.5)


def _build_scenarios() -> dict[str, ScenarioSpec]:
    out = {}
    out["pa_single"] = ScenarioSpec(
        name="pa_single",
        description="hydrogel beads: empty / one bead / several beads",
        target_kind=ObjectKind.PA_BEAD, target_class=1,
        classes=_single_kind_classes(ObjectKind.PA_BEAD, 1.0),
        lambdas={ObjectKind.PA_BEAD: 1.0}, template=_BEAD_DROPLET)
    out["ps_single"] = ScenarioSpec(
        name="ps_single",
        description="polystyrene spheres: empty / one / several",
        target_kind=ObjectKind.PS_SPHERE, target_class=1,
        classes=_single_kind_classes(ObjectKind.PS_SPHERE, 1.0),
        lambdas={ObjectKind.PS_SPHERE: 1.0}, template=_CELL_DROPLET)
    out["mcf7_single"] = ScenarioSpec(
        name="mcf7_single",
        description="MCF-7 cells: empty / one cell / several cells",
        target_kind=ObjectKind.MCF7_CELL, target_class=1,
        classes=_single_kind_classes(ObjectKind.MCF7_CELL, 1.0),
        lambdas={ObjectKind.MCF7_CELL: 1.0}, template=_CELL_DROPLET)
    out["mixture_mcf7_pa"] = ScenarioSpec(
        name="mixture_mcf7_pa",
        description="cell count classes with co-encapsulated beads",
        target_kind=ObjectKind.MCF7_CELL, target_class=1,
        classes=_mixture_classes(ObjectKind.MCF7_CELL, 1.0,
                                 {ObjectKind.PA_BEAD: 1.0}),
        lambdas={ObjectKind.MCF7_CELL: 1.0, ObjectKind.PA_BEAD: 1.0},
        template=_BEAD_DROPLET)
    out["mixture_mcf7_ps"] = ScenarioSpec(
        name="mixture_mcf7_ps",
        description="cell count classes with co-encapsulated spheres",
        target_kind=ObjectKind.MCF7_CELL, target_class=1,
        classes=_mixture_classes(ObjectKind.MCF7_CELL, 1.0,
                                 {ObjectKind.PS_SPHERE: 1.0}),
        lambdas={ObjectKind.MCF7_CELL: 1.0, ObjectKind.PS_SPHERE: 1.0},
        template=_CELL_DROPLET)
    out["double_poisson"] = ScenarioSpec(
        name="double_poisson",
        description="joint target: exactly one cell and one bead",
        target_kind=ObjectKind.MCF7_CELL, target_class=1,
        classes=_mixture_classes(ObjectKind.MCF7_CELL, 1.0,
                                 {ObjectKind.PA_BEAD: 1.0}),
        lambdas={ObjectKind.MCF7_CELL: 1.0, ObjectKind.PA_BEAD: 1.0},
        template=_BEAD_DROPLET, label_mode="joint",
        second_kind=ObjectKind.PA_BEAD)
    out["spheroid"] = ScenarioSpec(
        name="spheroid",
        description="empty / single cell / spheroid enrichment",
        target_kind=ObjectKind.SPHEROID, target_class=2,
        classes=(
            ClassRecipe("empty", ObjectKind.SPHEROID, CountRule("exact", 0), {}),
            ClassRecipe("single_cell", ObjectKind.MCF7_CELL,
                        CountRule("exact", 1), {}),
            ClassRecipe("spheroid", ObjectKind.SPHEROID,
                        CountRule("exact", 1), {}),
        ),
        lambdas={}, template=_CELL_DROPLET, label_mode="presence",
        n_train=100, n_val=20, stream_len=5500, stream_prevalence=0.2)
    return out


_SCENARIOS = _build_scenarios()


def scenario(name: str) -> ScenarioSpec:
    try:
        return _SCENARIOS[name]
    except KeyError:
        raise ValueError(
            f"unknown scenario {name!r}; choose from {', '.join(SCENARIO_NAMES)}"
        ) from None


def label_for(spec: ScenarioSpec, gt: GroundTruth) -> int:
    if spec.label_mode == "kind":
        return label_of(gt, spec.target_kind)
    if spec.label_mode == "joint":
        both = (label_of(gt, spec.target_kind) == 1
                and label_of(gt, spec.second_kind) == 1)
        return 1 if both else 0
    if spec.label_mode == "presence":
        if gt.counts.get(ObjectKind.SPHEROID, 0) >= 1:
            return 2
        if gt.counts.get(ObjectKind.MCF7_CELL, 0) >= 1:
            return 1
        return 0
    raise ValueError(f"unknown label mode {spec.label_mode!r}")


def truth_from_counts(counts: Mapping[ObjectKind, int]) -> GroundTruth:
    """Ground truth carrying counts only; object placements are nominal."""
    objects = []
    for kind, n in counts.items():
        lo, hi = DIAMETER_RANGE_UM[kind]
        objects.extend(ObjectSpec(kind, (lo + hi) / 2, (0.0, 0.0))
                       for _ in range(n))
    return GroundTruth.from_objects(objects)


def _forced_count(recipe: ClassRecipe, rng: np.random.Generator) -> int:
    if recipe.rule.mode == "exact":
        return recipe.rule.value
    lam = recipe.lambdas.get(recipe.target, 0.0)
    if lam <= 0.0:
        return recipe.rule.value
    return poisson_at_least(rng, lam, recipe.rule.value)


def _class_priors(spec: ScenarioSpec) -> np.ndarray:
    n_cls = len(spec.classes)
    if spec.stream_prevalence is not None:
        p = np.full(n_cls, (1.0 - spec.stream_prevalence) / (n_cls - 1))
        p[spec.target_class] = spec.stream_prevalence
        return p
    return np.full(n_cls, 1.0 / n_cls)


def label_stream(spec: ScenarioSpec, n: int, seed,
                 period_ms: float = 25.0) -> list[DropletEvent]:
    """Pixel-free droplet stream; counts are drawn, never placed."""
    rng = np.random.default_rng(seed)
    events = []
    for i in range(n):
        counts: dict[ObjectKind, int] = {}
        if spec.stream_prevalence is not None:
            cls = int(rng.choice(len(spec.classes), p=_class_priors(spec)))
            recipe = spec.classes[cls]
            counts[recipe.target] = _forced_count(recipe, rng)
            for kind, lam in recipe.lambdas.items():
                if kind is not recipe.target:
                    counts[kind] = int(rng.poisson(lam))
        else:
            for kind, lam in spec.lambdas.items():
                counts[kind] = int(rng.poisson(lam))
        gt = truth_from_counts(counts)
        events.append(DropletEvent(
            droplet_id=i + 1, t_trigger_ms=(i + 1) * period_ms,
            true_label=label_for(spec, gt), ground_truth=gt))
    return events


def _sample_retry(models, cfg, spec, rng, counts_override=None, tries=50):
    for _ in range(tries):
        try:
            return sample_scene(models, cfg, rng, template=spec.template,
                                focus_jitter_um=spec.focus_jitter_um,
                                counts_override=counts_override)
        except PlacementError:
            continue
    raise PlacementError("stream scene never packed", {})


def rendered_stream(spec: ScenarioSpec, n: int, cfg: RenderConfig, seed,
                    period_ms: float = 25.0) -> list[DropletEvent]:
    """Droplet stream with rendered frames attached."""
    rng = np.random.default_rng(seed)
    models = {k: OccupancyModel(lam) for k, lam in spec.lambdas.items()}
    events = []
    for i in range(n):
        if spec.stream_prevalence is not None:
            cls = int(rng.choice(len(spec.classes), p=_class_priors(spec)))
            recipe = spec.classes[cls]
            cls_models = {k: OccupancyModel(lam)
                          for k, lam in recipe.lambdas.items()}
            forced = _forced_count(recipe, rng)
            scene = _sample_retry(cls_models, cfg, spec, rng,
                                  counts_override={recipe.target: forced})
        else:
            scene = _sample_retry(models, cfg, spec, rng)
        frame, gt = render_scene(scene, cfg, rng)
        events.append(DropletEvent(
            droplet_id=i + 1, t_trigger_ms=(i + 1) * period_ms,
            true_label=label_for(spec, gt), ground_truth=gt, frame=frame))
    return events
