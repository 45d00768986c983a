"""Character-permutation synthesis: box equalization, permutation planning
against class-balance targets, pixel patch swapping, and corpus generation.

Swaps are confined to patches within one plate, so illumination stays
consistent; plates whose equalized boxes would overlap are rejected.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from PIL import Image

from .corpus import (
    CharBox,
    CorpusManifest,
    LpAnnotation,
    ManifestEntry,
    save_annotations,
)
from .geometry import BBox, enclosing_bbox
from .synth_template import layout_share
from .util import rng_for

log = logging.getLogger(__name__)


class PermuteError(ValueError):
    pass


class CannotFit(PermuteError):
    """Uniform patch size exceeds the plate bounds."""


class Infeasible(PermuteError):
    """Equalized boxes overlap; the plate cannot be permuted."""


class MissingCharBoxes(PermuteError):
    pass


class GeometryMismatch(PermuteError):
    pass


class InsufficientFeasibleSources(PermuteError):
    pass


@dataclass(frozen=True)
class PermutationPolicy:
    """Permutation rules.

    mode "same-kind" swaps letters with letters and digits with digits
    (wildcard patches always stay in wildcard slots); "cross-kind" pools
    letters and digits together. balance_target optionally weights class
    choice by desired per-class frequency.
    """

    mode: str = "same-kind"
    max_variants: int = 8
    balance_target: Mapping[str, float] | None = None

    def __post_init__(self):
        if self.mode not in ("same-kind", "cross-kind"):
            raise PermuteError(f"unknown permutation mode {self.mode!r}")
        if self.max_variants < 1:
            raise PermuteError("max_variants must be >= 1")


@dataclass(frozen=True)
class PermutationPlan:
    source_id: str
    new_text: str
    slot_mapping: tuple[int, ...]


def char_kind(cls: str) -> str:
    if cls.isdigit():
        return "digit"
    if cls == "*":
        return "wildcard"
    return "letter"


def _int_box(box: BBox) -> tuple[int, int, int, int]:
    x0 = math.floor(box.x)
    y0 = math.floor(box.y)
    x1 = math.ceil(box.x2)
    y1 = math.ceil(box.y2)
    return x0, y0, x1 - x0, y1 - y0


def _grow_centered(x: int, w: int, target: int) -> int:
    return x - (target - w) // 2


def equalize_boxes(
    boxes: Sequence[CharBox], plate_bounds: BBox
) -> list[CharBox]:
    """Grow every box to the common maximum size on the pixel grid.

    Growth is symmetric about each box center (odd leftovers go right and
    down); boxes are then shifted the minimal amount needed to stay inside
    the plate bounds. Classes are unchanged.
    """
    if not boxes:
        raise PermuteError("no boxes to equalize")
    ints = [_int_box(cb.box) for cb in boxes]
    target_w = max(w for _x, _y, w, _h in ints)
    target_h = max(h for _x, _y, _w, h in ints)
    bx0, by0, bw, bh = _int_box(plate_bounds)
    if target_w > bw or target_h > bh:
        raise CannotFit(
            f"uniform patch {target_w}x{target_h} exceeds plate bounds {bw}x{bh}"
        )
    out = []
    for cb, (x, y, w, h) in zip(boxes, ints):
        nx = _grow_centered(x, w, target_w)
        ny = _grow_centered(y, h, target_h)
        nx = min(max(nx, bx0), bx0 + bw - target_w)
        ny = min(max(ny, by0), by0 + bh - target_h)
        out.append(CharBox(BBox(nx, ny, target_w, target_h), cb.cls))
    return out


def check_feasible(boxes: Sequence[CharBox]) -> bool:
    """True when no two boxes intersect after size equalization."""
    if not boxes:
        raise PermuteError("no boxes to check")
    ints = [_int_box(cb.box) for cb in boxes]
    target_w = max(w for *_xy, w, _h in ints)
    target_h = max(h for *_xyw, h in ints)
    grown = [
        BBox(_grow_centered(x, w, target_w), _grow_centered(y, h, target_h),
             target_w, target_h)
        for x, y, w, h in ints
    ]
    for i in range(len(grown)):
        for j in range(i + 1, len(grown)):
            if grown[i].intersects(grown[j]):
                return False
    return True


def plan_permutations(
    ann: LpAnnotation,
    policy: PermutationPolicy,
    class_counts: Mapping[str, int],
    seed: int,
) -> list[PermutationPlan]:
    """Draw up to max_variants permutation plans for one plate.

    Each output slot takes the eligible source patch whose class currently
    has the fewest occurrences (global snapshot plus what the plans drawn
    so far added), ties broken by the seeded rng. A patch may repeat
    across slots, which is what lets scarce classes spread.
    """
    if ann.char_boxes is None:
        raise MissingCharBoxes(f"{ann.image_id} has no character boxes")
    if not check_feasible(ann.char_boxes):
        raise Infeasible(f"{ann.image_id}: equalized boxes overlap")

    rng = rng_for(seed)
    kinds = [char_kind(c) for c in ann.text]
    pools: dict[str, list[int]] = {}
    for idx, kind in enumerate(kinds):
        key = kind
        if policy.mode == "cross-kind" and kind in ("letter", "digit"):
            key = "any"
        pools.setdefault(key, []).append(idx)

    running = dict(class_counts)
    target = policy.balance_target or {}
    plans: list[PermutationPlan] = []
    seen = set()
    for _variant in range(policy.max_variants):
        mapping, chars = [], []
        for idx, kind in enumerate(kinds):
            key = kind
            if policy.mode == "cross-kind" and kind in ("letter", "digit"):
                key = "any"
            pool = pools[key]

            def fill(j):
                cls = ann.text[j]
                return running.get(cls, 0) / float(target.get(cls, 1.0))

            lowest = min(fill(j) for j in pool)
            candidates = [j for j in pool if fill(j) == lowest]
            j = candidates[int(rng.integers(len(candidates)))]
            mapping.append(j)
            chars.append(ann.text[j])
            running[ann.text[j]] = running.get(ann.text[j], 0) + 1
        plan = PermutationPlan(ann.image_id, "".join(chars), tuple(mapping))
        if (plan.new_text, plan.slot_mapping) not in seen:
            seen.add((plan.new_text, plan.slot_mapping))
            plans.append(plan)
    return plans


def apply_permutation(
    img: np.ndarray, ann: LpAnnotation, plan: PermutationPlan
) -> tuple[np.ndarray, LpAnnotation]:
    """Rewrite the plate pixels per the plan; everything else is untouched.

    Patches are read from the source image before any write, so a slot can
    be both source and destination.
    """
    if ann.char_boxes is None:
        raise MissingCharBoxes(f"{ann.image_id} has no character boxes")
    n = len(ann.text)
    if len(plan.new_text) != n or len(plan.slot_mapping) != n:
        raise GeometryMismatch(
            f"plan is for {len(plan.new_text)} slots, plate has {n}"
        )
    if any(not 0 <= j < n for j in plan.slot_mapping):
        raise GeometryMismatch(f"slot mapping {plan.slot_mapping} out of range")
    for out_idx, src_idx in enumerate(plan.slot_mapping):
        if plan.new_text[out_idx] != ann.text[src_idx]:
            raise GeometryMismatch(
                f"slot {out_idx}: text says {plan.new_text[out_idx]!r} but maps "
                f"to source class {ann.text[src_idx]!r}"
            )

    h, w = img.shape[:2]
    bounds = _plate_bounds(ann, w, h)
    equalized = equalize_boxes(ann.char_boxes, bounds)
    for a in range(n):
        for b in range(a + 1, n):
            if equalized[a].box.intersects(equalized[b].box):
                raise Infeasible(f"{ann.image_id}: equalized boxes overlap in bounds")

    patches = []
    for cb in equalized:
        x, y, pw, ph = _int_box(cb.box)
        patches.append(img[y : y + ph, x : x + pw].copy())
    out = img.copy()
    for out_idx, src_idx in enumerate(plan.slot_mapping):
        x, y, pw, ph = _int_box(equalized[out_idx].box)
        out[y : y + ph, x : x + pw] = patches[src_idx]

    new_boxes = tuple(
        CharBox(equalized[i].box, plan.new_text[i]) for i in range(n)
    )
    new_ann = replace(ann, text=plan.new_text, char_boxes=new_boxes)
    return out, new_ann


def _plate_bounds(ann: LpAnnotation, img_w: int, img_h: int) -> BBox:
    plate = enclosing_bbox(ann.corners)
    x0 = max(plate.x, 0.0)
    y0 = max(plate.y, 0.0)
    x1 = min(plate.x2, float(img_w))
    y1 = min(plate.y2, float(img_h))
    return BBox(x0, y0, x1 - x0, y1 - y0)


def _feasible_in_bounds(ann: LpAnnotation) -> bool:
    """Overlap check on bounds-shifted boxes (image dims from the annotation)."""
    if ann.image_size is not None:
        w, h = ann.image_size
        bounds = _plate_bounds(ann, w, h)
    else:
        bounds = enclosing_bbox(ann.corners)
    equalized = equalize_boxes(ann.char_boxes, bounds)
    for a in range(len(equalized)):
        for b in range(a + 1, len(equalized)):
            if equalized[a].box.intersects(equalized[b].box):
                return False
    return True


def generate_permuted_corpus(
    manifest: CorpusManifest,
    policy: PermutationPolicy,
    total: int,
    out_dir: str | Path,
    images_root: str | Path,
    seed: int = 0,
    workers: int = 1,
    dataset_id: str = "synthetic-permuted",
) -> CorpusManifest:
    """Permute train-split plates into a near-evenly distributed corpus.

    Plans are laid out serially (round-robin over the feasible sources of
    each layout) so output is identical for any worker count; infeasible
    plates are skipped with a logged reason.
    """
    images_root = Path(images_root)
    sources = [
        e
        for e in manifest.entries
        if e.split == "train" and e.annotation.char_boxes is not None
    ]
    if not sources:
        raise InsufficientFeasibleSources("manifest has no train entries with char boxes")

    by_layout: dict[str, list[ManifestEntry]] = {}
    for entry in sources:
        by_layout.setdefault(entry.annotation.layout, []).append(entry)
    class_counts: dict[str, int] = {}
    for entry in sources:
        for ch in entry.annotation.text:
            class_counts[ch] = class_counts.get(ch, 0) + 1

    share = layout_share(total, list(by_layout))
    tasks = []
    for layout, entries in by_layout.items():
        feasible: list[tuple[ManifestEntry, list[PermutationPlan]]] = []
        for k, entry in enumerate(entries):
            ann = entry.annotation
            try:
                plans = plan_permutations(
                    ann, policy, class_counts, seed=_mix(seed, layout, k)
                )
                if not _feasible_in_bounds(ann):
                    raise Infeasible(f"{ann.image_id}: boxes collide after boundary shift")
            except (Infeasible, CannotFit, MissingCharBoxes) as exc:
                log.info("skipping %s: %s", ann.image_id, exc)
                continue
            feasible.append((entry, plans))
        if not feasible:
            raise InsufficientFeasibleSources(f"no feasible source plates for {layout}")
        capacity = sum(len(p) for _e, p in feasible)
        if capacity < share[layout]:
            raise InsufficientFeasibleSources(
                f"{layout}: {capacity} variants available, {share[layout]} requested"
            )
        produced = 0
        variant = 0
        while produced < share[layout]:
            for entry, plans in feasible:
                if produced >= share[layout]:
                    break
                if variant < len(plans):
                    tasks.append((entry, plans[variant], layout, produced))
                    produced += 1
            variant += 1

    out_dir = Path(out_dir)
    image_dir = out_dir / "images"
    image_dir.mkdir(parents=True, exist_ok=True)
    job_args = [
        (
            entry.annotation,
            plan,
            str(_resolve_image(images_root, entry.annotation.image_id)),
            str(image_dir / f"{layout}_perm_{k:06d}.png"),
            dataset_id,
        )
        for entry, plan, layout, k in tasks
    ]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            annotations = list(pool.map(_permute_task, job_args, chunksize=8))
    else:
        annotations = [_permute_task(args) for args in job_args]

    result = CorpusManifest(
        [ManifestEntry(ann, "train", "permuted") for ann in annotations]
    )
    save_annotations(out_dir / "annotations.jsonl", annotations)
    result.save(out_dir / "manifest.jsonl")
    log.info("generated %d permuted plates under %s", len(annotations), out_dir)
    return result


def _mix(seed: int, layout: str, index: int) -> int:
    acc = seed & 0xFFFFFFFF
    for ch in layout.encode():
        acc = (acc * 1000003 + ch) & 0xFFFFFFFF
    return (acc << 20) ^ index


def _resolve_image(images_root: Path, image_id: str) -> Path:
    for suffix in (".png", ".jpg", ".jpeg"):
        candidate = images_root / f"{image_id}{suffix}"
        if candidate.exists():
            return candidate
    raise FileNotFoundError(f"no image for {image_id} under {images_root}")


def _permute_task(args) -> LpAnnotation:
    ann, plan, src_path, out_path, dataset_id = args
    img = np.asarray(Image.open(src_path).convert("RGB"))
    permuted, new_ann = apply_permutation(img, ann, plan)
    Image.fromarray(permuted).save(out_path)
    return replace(
        new_ann,
        dataset_id=dataset_id,
        image_id=Path(out_path).stem,
        image_size=(permuted.shape[1], permuted.shape[0]),
    )
