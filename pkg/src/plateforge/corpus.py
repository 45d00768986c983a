"""Annotation data model, JSONL ingestion, dataset split protocols, and
training-set balancing/subsampling.

Annotations are stored as JSON Lines, one plate per line:

    {"dataset_id": ..., "image_id": ..., "layout": ...,
     "corners": [8 reals, tl/tr/br/bl order], "text": ...,
     "char_boxes": [[x, y, w, h], ...] | null,
     "char_classes": "..." | null, "vehicle_type": "car"|"motorcycle"|null,
     "image_size": [w, h] | null}
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

from .geometry import BBox, GeometryError, Quad
from .util import read_jsonl, rng_for, round_half_away, write_jsonl

log = logging.getLogger(__name__)

BUILTIN_LAYOUTS = (
    "american",
    "brazilian",
    "chinese",
    "european",
    "mercosur",
    "taiwanese",
)

DIGITS = "0123456789"
LETTERS = "ABCDEFGHIJKLMNOPQRSTUVWXYZ"
WILDCARD = "*"
ALPHABET = DIGITS + LETTERS + WILDCARD

SPLITS = ("train", "val", "test")
SOURCES = ("real", "template", "permuted", "gan")

SUPPORTED_FRACTIONS = (1.0, 0.5, 0.25, 0.10, 0.05, 0.01)


class CorpusError(ValueError):
    pass


class ParseError(CorpusError):
    pass


class ValidationError(CorpusError):
    pass


class UnknownDataset(CorpusError):
    pass


class EmptyDataset(CorpusError):
    pass


class TargetTooSmall(CorpusError):
    pass


@dataclass(frozen=True)
class CharBox:
    box: BBox
    cls: str

    def __post_init__(self):
        if len(self.cls) != 1 or self.cls not in ALPHABET:
            raise ValidationError(f"character class {self.cls!r} outside the 37-symbol alphabet")


@dataclass(frozen=True)
class LpAnnotation:
    """Ground truth for one plate."""

    dataset_id: str
    image_id: str
    layout: str
    corners: Quad
    text: str
    char_boxes: tuple[CharBox, ...] | None = None
    vehicle_type: str | None = None
    image_size: tuple[int, int] | None = None

    def __post_init__(self):
        if not 4 <= len(self.text) <= 8:
            raise ValidationError(
                f"{self.image_id}: text length {len(self.text)} outside 4..8"
            )
        if self.char_boxes is not None and len(self.char_boxes) != len(self.text):
            raise ValidationError(
                f"{self.image_id}: {len(self.char_boxes)} char boxes for "
                f"{len(self.text)} characters"
            )
        if self.vehicle_type not in (None, "car", "motorcycle"):
            raise ValidationError(f"{self.image_id}: bad vehicle_type {self.vehicle_type!r}")
        if self.image_size is not None:
            w, h = self.image_size
            pts = self.corners.to_array()
            if (
                pts[:, 0].min() < 0
                or pts[:, 1].min() < 0
                or pts[:, 0].max() > w - 1
                or pts[:, 1].max() > h - 1
            ):
                raise ValidationError(f"{self.image_id}: corners outside {w}x{h} image")

    def to_record(self) -> dict:
        rec = {
            "dataset_id": self.dataset_id,
            "image_id": self.image_id,
            "layout": self.layout,
            "corners": [round(v, 4) for v in self.corners.to_array().ravel().tolist()],
            "text": self.text,
        }
        if self.char_boxes is not None:
            rec["char_boxes"] = [
                [cb.box.x, cb.box.y, cb.box.w, cb.box.h] for cb in self.char_boxes
            ]
            rec["char_classes"] = "".join(cb.cls for cb in self.char_boxes)
        if self.vehicle_type is not None:
            rec["vehicle_type"] = self.vehicle_type
        if self.image_size is not None:
            rec["image_size"] = list(self.image_size)
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "LpAnnotation":
        try:
            corners = Quad.from_array(rec["corners"])
        except (KeyError, GeometryError, TypeError) as exc:
            raise ValidationError(f"bad corners: {exc}") from exc
        char_boxes = None
        if rec.get("char_boxes") is not None:
            classes = rec.get("char_classes") or rec.get("text", "")
            if len(classes) != len(rec["char_boxes"]):
                raise ValidationError(
                    f"{rec.get('image_id')}: {len(rec['char_boxes'])} boxes vs "
                    f"{len(classes)} classes"
                )
            try:
                char_boxes = tuple(
                    CharBox(BBox(*xywh), c)
                    for xywh, c in zip(rec["char_boxes"], classes)
                )
            except GeometryError as exc:
                raise ValidationError(str(exc)) from exc
        size = rec.get("image_size")
        return cls(
            dataset_id=rec["dataset_id"],
            image_id=rec["image_id"],
            layout=rec["layout"],
            corners=corners,
            text=rec["text"],
            char_boxes=char_boxes,
            vehicle_type=rec.get("vehicle_type"),
            image_size=tuple(size) if size else None,
        )


@dataclass(frozen=True)
class ManifestEntry:
    annotation: LpAnnotation
    split: str
    source: str
    aug_seed: int | None = None

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValidationError(f"bad split tag {self.split!r}")
        if self.source not in SOURCES:
            raise ValidationError(f"bad source tag {self.source!r}")


@dataclass
class CorpusManifest:
    """Annotated entries with one split tag and one source tag each."""

    entries: list[ManifestEntry] = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    def subset(self, split=None, source=None, dataset_id=None) -> "CorpusManifest":
        picked = [
            e
            for e in self.entries
            if (split is None or e.split == split)
            and (source is None or e.source == source)
            and (dataset_id is None or e.annotation.dataset_id == dataset_id)
        ]
        return CorpusManifest(picked)

    def dataset_ids(self) -> list[str]:
        seen = dict.fromkeys(e.annotation.dataset_id for e in self.entries)
        return list(seen)

    def save(self, path: str | Path) -> int:
        return write_jsonl(
            path,
            (
                {
                    "annotation": e.annotation.to_record(),
                    "split": e.split,
                    "source": e.source,
                    "aug_seed": e.aug_seed,
                }
                for e in self.entries
            ),
        )

    @classmethod
    def load(cls, path: str | Path) -> "CorpusManifest":
        entries = []
        for lineno, rec in read_jsonl(path):
            try:
                entries.append(
                    ManifestEntry(
                        annotation=LpAnnotation.from_record(rec["annotation"]),
                        split=rec["split"],
                        source=rec["source"],
                        aug_seed=rec.get("aug_seed"),
                    )
                )
            except (KeyError, ValidationError) as exc:
                raise ValidationError(f"{path}:{lineno}: {exc}") from exc
        return cls(entries)


def load_annotations(path: str | Path, format: str = "jsonl") -> list[LpAnnotation]:
    """Load and validate annotations; errors carry the offending line number."""
    if format != "jsonl":
        raise ParseError(f"unsupported annotation format {format!r}")
    annotations = []
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from exc
            try:
                annotations.append(LpAnnotation.from_record(rec))
            except (KeyError, ValidationError, TypeError) as exc:
                raise ValidationError(f"{path}:{lineno}: {exc}") from exc
    return annotations


def save_annotations(path: str | Path, annotations: Iterable[LpAnnotation]) -> int:
    return write_jsonl(path, (a.to_record() for a in annotations))


@dataclass(frozen=True)
class SplitRule:
    """How one dataset divides into train/val/test.

    protocol: "test-only", "fraction" (params: test, val as fractions of the
    whole; counts use round-half-away so published test-set sizes are hit),
    or "file-list" (params: train/val/test id lists).
    """

    protocol: str
    params: dict = field(default_factory=dict)
    seed: int = 0
    exclusions: tuple[str, ...] = ()

    def __post_init__(self):
        if self.protocol not in ("test-only", "fraction", "file-list"):
            raise ValidationError(f"unknown split protocol {self.protocol!r}")


@dataclass(frozen=True)
class SplitProtocol:
    rules: dict[str, SplitRule]

    @classmethod
    def from_config(cls, config: dict, base_dir: str | Path = ".") -> "SplitProtocol":
        """Build from a declarative mapping: dataset_id -> rule description.

        ``exclusions`` may be an inline id list or the name of a sidecar
        text file (one image id per line) relative to ``base_dir``.
        """
        rules = {}
        for dataset_id, raw in config.items():
            exclusions = raw.get("exclusions") or ()
            if isinstance(exclusions, str):
                lines = Path(base_dir, exclusions).read_text().splitlines()
                exclusions = tuple(s.strip() for s in lines if s.strip())
            else:
                exclusions = tuple(exclusions)
            rules[dataset_id] = SplitRule(
                protocol=raw["protocol"],
                params=dict(raw.get("params", {})),
                seed=int(raw.get("seed", 0)),
                exclusions=exclusions,
            )
        return cls(rules)


def apply_split(annotations: Sequence[LpAnnotation], protocol: SplitProtocol) -> CorpusManifest:
    """Partition every dataset into train/val/test per its rule.

    Deterministic in (annotations, protocol): fraction rules shuffle image
    ids with the rule seed, then take the test block first, then val.
    """
    by_dataset: dict[str, list[LpAnnotation]] = {}
    for ann in annotations:
        by_dataset.setdefault(ann.dataset_id, []).append(ann)

    missing = sorted(set(by_dataset) - set(protocol.rules))
    if missing:
        raise UnknownDataset(f"no split rule for dataset(s): {', '.join(missing)}")

    assignment: dict[tuple[str, str], str] = {}
    kept: dict[str, list[LpAnnotation]] = {}
    for dataset_id, anns in by_dataset.items():
        rule = protocol.rules[dataset_id]
        excluded = set(rule.exclusions)
        if excluded:
            dropped = [a for a in anns if a.image_id in excluded]
            log.info("%s: excluding %d annotation(s) before splitting", dataset_id, len(dropped))
            anns = [a for a in anns if a.image_id not in excluded]
        if not anns:
            raise EmptyDataset(f"dataset {dataset_id} has no annotations after exclusions")
        kept[dataset_id] = anns

        ids = sorted({a.image_id for a in anns})
        if rule.protocol == "test-only":
            for image_id in ids:
                assignment[(dataset_id, image_id)] = "test"
        elif rule.protocol == "fraction":
            rng = rng_for(rule.seed)
            order = list(rng.permutation(ids))
            n_test = round_half_away(len(order) * float(rule.params.get("test", 0.0)))
            n_val = round_half_away(len(order) * float(rule.params.get("val", 0.0)))
            for i, image_id in enumerate(order):
                if i < n_test:
                    tag = "test"
                elif i < n_test + n_val:
                    tag = "val"
                else:
                    tag = "train"
                assignment[(dataset_id, image_id)] = tag
        else:  # file-list
            listed = {}
            for tag in SPLITS:
                for image_id in rule.params.get(tag, ()):
                    listed[image_id] = tag
            unlisted = [i for i in ids if i not in listed]
            if unlisted:
                raise ValidationError(
                    f"{dataset_id}: file-list rule misses {len(unlisted)} image(s), "
                    f"e.g. {unlisted[0]!r}"
                )
            for image_id in ids:
                assignment[(dataset_id, image_id)] = listed[image_id]

    entries = [
        ManifestEntry(ann, assignment[(dataset_id, ann.image_id)], "real")
        for dataset_id, anns in kept.items()
        for ann in anns
    ]
    return CorpusManifest(entries)


def balance_by_augmentation(
    manifest: CorpusManifest,
    target_per_dataset: int,
    aug,
    downsample: bool = False,
) -> CorpusManifest:
    """Grow each dataset's train partition to the target entry count.

    Added entries duplicate originals round-robin, each stamped with a
    distinct augmentation seed derived from the config's master seed.
    ``aug`` is an augmentation config (its ``master_seed`` is used) or a
    bare integer seed.
    """
    master_seed = int(getattr(aug, "master_seed", aug))
    counts = {}
    for e in manifest.entries:
        if e.split == "train":
            counts[e.annotation.dataset_id] = counts.get(e.annotation.dataset_id, 0) + 1
    over = {d: n for d, n in counts.items() if n > target_per_dataset}
    if over and not downsample:
        raise TargetTooSmall(
            f"target {target_per_dataset} below current train counts {over}; "
            "pass downsample to shrink"
        )

    entries = list(manifest.entries)
    if over:
        keep: dict[str, set[str]] = {}
        for dataset_id in over:
            ids = sorted(
                e.annotation.image_id
                for e in manifest.entries
                if e.split == "train" and e.annotation.dataset_id == dataset_id
            )
            order = rng_for(master_seed, hash_name(dataset_id)).permutation(ids)
            keep[dataset_id] = set(order[:target_per_dataset])
        entries = [
            e
            for e in entries
            if e.split != "train"
            or e.annotation.dataset_id not in keep
            or e.annotation.image_id in keep[e.annotation.dataset_id]
        ]

    additions = []
    for dataset_id, have in sorted(counts.items()):
        need = target_per_dataset - min(have, target_per_dataset)
        if need == 0:
            continue
        originals = [
            e
            for e in manifest.entries
            if e.split == "train" and e.annotation.dataset_id == dataset_id
        ]
        for k in range(need):
            base = originals[k % len(originals)]
            seed = int(rng_for(master_seed, hash_name(dataset_id), k).integers(0, 2**63))
            additions.append(replace(base, aug_seed=seed))
    return CorpusManifest(entries + additions)


def hash_name(name: str) -> int:
    """Stable non-cryptographic hash of a name for seed derivation."""
    h = 2166136261
    for ch in name.encode("utf-8"):
        h = ((h ^ ch) * 16777619) & 0xFFFFFFFF
    return h


def reduce_training_fraction(
    manifest: CorpusManifest, fraction: float, seed: int
) -> CorpusManifest:
    """Keep a deterministic per-dataset subsample of the train partition.

    A permutation of each dataset's train entries is fixed by the seed and
    the fraction keeps its prefix, so smaller fractions are nested inside
    larger ones. At least one entry survives per nonempty dataset.
    """
    if fraction not in SUPPORTED_FRACTIONS:
        log.warning("fraction %s is outside the standard set %s", fraction, SUPPORTED_FRACTIONS)
    if fraction >= 1.0:
        return CorpusManifest(list(manifest.entries))

    retained: set[int] = set()
    by_dataset: dict[str, list[int]] = {}
    for idx, e in enumerate(manifest.entries):
        if e.split == "train":
            by_dataset.setdefault(e.annotation.dataset_id, []).append(idx)
        else:
            retained.add(idx)

    for dataset_id, indices in by_dataset.items():
        order = rng_for(seed, hash_name(dataset_id)).permutation(len(indices))
        n_keep = max(1, round_half_away(len(indices) * fraction))
        retained.update(indices[i] for i in order[:n_keep])

    return CorpusManifest([e for i, e in enumerate(manifest.entries) if i in retained])
