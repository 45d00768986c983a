"""Paired-translation data preparation: a maximally-distinguishable class
palette, segmentation-mask rendering and decoding, side-by-side AB export
with gray target backgrounds, mask sampling for generation, and top-N
confidence filtering of generated plates."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from PIL import Image, ImageDraw
from scipy import ndimage

from .corpus import CorpusManifest, CharBox, LpAnnotation, save_annotations
from .geometry import BBox, GRAY_FILL
from .metrics import EvalConfig, normalize_plate_text
from .synth_template import BalanceState, LayoutSpec, full_image_quad, sample_sequence
from .util import read_jsonl, rng_for, write_jsonl

log = logging.getLogger(__name__)

BLACK = (0, 0, 0)

# published anchor colors; pass as overrides to pin them
REFERENCE_ANCHORS = {
    "0": (228, 28, 26),
    "A": (126, 47, 0),
    "mercosur": (187, 0, 170),
    "chinese": (127, 127, 127),
}

_GAMUT_LEVELS = 32


class GanPrepError(ValueError):
    pass


class InfeasiblePalette(GanPrepError):
    pass


class MissingClassColor(GanPrepError):
    pass


class UnknownColor(GanPrepError):
    pass


class NoPlateRegion(GanPrepError):
    pass


def srgb_to_lab(rgb: np.ndarray) -> np.ndarray:
    """sRGB (0..255) to CIE Lab under D65, vectorized over leading axes."""
    c = np.asarray(rgb, dtype=np.float64) / 255.0
    lin = np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)
    matrix = np.array(
        [
            [0.4124564, 0.3575761, 0.1804375],
            [0.2126729, 0.7151522, 0.0721750],
            [0.0193339, 0.1191920, 0.9503041],
        ]
    )
    xyz = lin @ matrix.T
    xyz /= np.array([0.95047, 1.0, 1.08883])
    eps = (6 / 29) ** 3
    f = np.where(xyz > eps, np.cbrt(xyz), xyz / (3 * (6 / 29) ** 2) + 4 / 29)
    lab = np.empty_like(f)
    lab[..., 0] = 116 * f[..., 1] - 16
    lab[..., 1] = 500 * (f[..., 0] - f[..., 1])
    lab[..., 2] = 200 * (f[..., 1] - f[..., 2])
    return lab


def lab_distance(a, b) -> float:
    return float(np.linalg.norm(srgb_to_lab(np.asarray(a)) - srgb_to_lab(np.asarray(b))))


@dataclass(frozen=True)
class ClassPalette:
    """Bijection from class keys to RGB colors with perceptual guarantees."""

    colors: dict[str, tuple[int, int, int]]
    min_pairwise_dist: float
    black_exclusion_dist: float

    def __post_init__(self):
        seen = {}
        for key, color in self.colors.items():
            if color in seen:
                raise InfeasiblePalette(f"{key!r} and {seen[color]!r} share color {color}")
            seen[color] = key

    def color_of(self, key: str) -> tuple[int, int, int]:
        try:
            return self.colors[key]
        except KeyError:
            raise MissingClassColor(f"palette has no color for class {key!r}") from None

    def key_of(self, color: tuple[int, int, int]) -> str | None:
        for key, c in self.colors.items():
            if c == tuple(color):
                return key
        return None

    def to_dict(self) -> dict:
        return {
            "colors": {k: list(v) for k, v in self.colors.items()},
            "min_pairwise_dist": self.min_pairwise_dist,
            "black_exclusion_dist": self.black_exclusion_dist,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ClassPalette":
        return cls(
            colors={k: tuple(v) for k, v in data["colors"].items()},
            min_pairwise_dist=float(data["min_pairwise_dist"]),
            black_exclusion_dist=float(data["black_exclusion_dist"]),
        )


def _gamut() -> np.ndarray:
    levels = np.round(np.linspace(0, 255, _GAMUT_LEVELS)).astype(np.uint8)
    r, g, b = np.meshgrid(levels, levels, levels, indexing="ij")
    return np.stack([r.ravel(), g.ravel(), b.ravel()], axis=1)


def generate_palette(
    keys: Sequence[str],
    seed: int = 0,
    black_exclusion_dist: float = 20.0,
    overrides: Mapping[str, tuple[int, int, int]] | None = None,
) -> ClassPalette:
    """Greedy farthest-point color selection in CIE Lab.

    Candidates come from an evenly quantized RGB gamut with everything
    within ``black_exclusion_dist`` of black removed (black is the mask
    background). Each pick maximizes the minimum Lab distance to black and
    to all colors chosen so far; ``overrides`` pins specific keys first.
    The seed only disambiguates exact score ties.
    """
    keys = list(keys)
    if len(set(keys)) != len(keys):
        raise GanPrepError("palette keys must be distinct")
    if len(keys) > 4096:
        raise GanPrepError(f"{len(keys)} keys exceed the supported 4096")
    overrides = dict(overrides or {})
    unknown = set(overrides) - set(keys)
    if unknown:
        raise GanPrepError(f"override(s) for unknown key(s): {sorted(unknown)}")

    candidates = _gamut()
    lab = srgb_to_lab(candidates)
    min_dist = np.linalg.norm(lab - srgb_to_lab(np.array(BLACK)), axis=1)
    usable = min_dist >= black_exclusion_dist
    if np.count_nonzero(usable) < len(keys) - len(overrides):
        raise InfeasiblePalette(
            f"exclusion distance {black_exclusion_dist} leaves too few candidates"
        )
    tie_break = rng_for(seed).random(len(candidates))

    colors: dict[str, tuple[int, int, int]] = {}
    for key, color in overrides.items():
        color = tuple(int(v) for v in color)
        if lab_distance(color, BLACK) < black_exclusion_dist:
            raise InfeasiblePalette(f"pinned color {color} for {key!r} is too close to black")
        colors[key] = color
        min_dist = np.minimum(min_dist, np.linalg.norm(lab - srgb_to_lab(np.array(color)), axis=1))

    for key in keys:
        if key in colors:
            continue
        score = np.where(usable, min_dist, -np.inf)
        best = score.max()
        if not np.isfinite(best) or best <= 0:
            raise InfeasiblePalette("candidate pool exhausted")
        ties = np.flatnonzero(score == best)
        pick = ties[np.argmax(tie_break[ties])]
        color = tuple(int(v) for v in candidates[pick])
        colors[key] = color
        min_dist = np.minimum(min_dist, np.linalg.norm(lab - lab[pick], axis=1))
        usable[pick] = False

    palette_rgb = np.array([colors[k] for k in keys])
    palette_lab = srgb_to_lab(palette_rgb)
    pairwise = np.linalg.norm(palette_lab[:, None] - palette_lab[None, :], axis=2)
    np.fill_diagonal(pairwise, np.inf)
    return ClassPalette(
        colors={k: colors[k] for k in keys},
        min_pairwise_dist=float(pairwise.min()) if len(keys) > 1 else float("inf"),
        black_exclusion_dist=black_exclusion_dist,
    )


def default_palette_keys(layouts: Iterable[str]) -> list[str]:
    """Digits, letters, the blurred-ideograph class, then layout keys."""
    from .corpus import ALPHABET

    return list(ALPHABET) + list(layouts)


def render_mask(
    ann: LpAnnotation,
    palette: ClassPalette,
    canvas: tuple[int, int] | None = None,
) -> np.ndarray:
    """Flat-color segmentation mask for one plate.

    Black background, the plate quad filled with its layout color, each
    character box filled (over the plate fill) with its class color. When
    ``canvas`` differs from the annotation's image size, geometry is
    scaled to fit it.
    """
    if ann.char_boxes is None:
        raise GanPrepError(f"{ann.image_id} has no character boxes")
    if ann.image_size is not None:
        src_w, src_h = ann.image_size
    else:
        pts = ann.corners.to_array()
        src_w, src_h = float(pts[:, 0].max()) + 1, float(pts[:, 1].max()) + 1
    out_w, out_h = canvas if canvas is not None else (int(src_w), int(src_h))
    sx, sy = out_w / src_w, out_h / src_h

    layout_color = palette.color_of(ann.layout)
    char_colors = [palette.color_of(cb.cls) for cb in ann.char_boxes]

    img = Image.new("RGB", (out_w, out_h), BLACK)
    draw = ImageDraw.Draw(img)
    quad_pts = [(p[0] * sx, p[1] * sy) for p in ann.corners.to_array()]
    draw.polygon(quad_pts, fill=layout_color)
    for cb, color in zip(ann.char_boxes, char_colors):
        x0 = round(cb.box.x * sx)
        y0 = round(cb.box.y * sy)
        x1 = round(cb.box.x2 * sx) - 1
        y1 = round(cb.box.y2 * sy) - 1
        draw.rectangle([x0, y0, max(x0, x1), max(y0, y1)], fill=color)
    return np.asarray(img)


def decode_mask(mask: np.ndarray, palette: ClassPalette) -> tuple[str, list[CharBox]]:
    """Inverse of render_mask: recover layout and ordered character boxes.

    Character boxes come from connected components per class color,
    ordered row-major (bands top to bottom, left to right within a band).
    """
    mask = np.asarray(mask)
    flat = mask.reshape(-1, 3)
    present = {tuple(c) for c in np.unique(flat, axis=0)}
    known = {tuple(v): k for k, v in palette.colors.items()}
    for color in present:
        if color != BLACK and color not in known:
            raise UnknownColor(f"mask contains off-palette color {color}")

    layout_keys = [k for k in palette.colors if len(k) > 1]
    layouts_present = [
        k for k in layout_keys if tuple(palette.colors[k]) in present
    ]
    if not layouts_present:
        raise NoPlateRegion("mask has no layout-colored region")
    if len(layouts_present) > 1:
        raise GanPrepError(f"mask mixes layouts: {layouts_present}")
    layout = layouts_present[0]

    boxes: list[CharBox] = []
    for key in palette.colors:
        if len(key) > 1:
            continue
        color = palette.colors[key]
        if tuple(color) not in present:
            continue
        hit = np.all(mask == np.array(color, dtype=mask.dtype), axis=2)
        labeled, count = ndimage.label(hit)
        for slice_y, slice_x in ndimage.find_objects(labeled):
            boxes.append(
                CharBox(
                    BBox(
                        slice_x.start,
                        slice_y.start,
                        slice_x.stop - slice_x.start,
                        slice_y.stop - slice_y.start,
                    ),
                    key,
                )
            )
    return layout, _row_major(boxes)


def _row_major(boxes: list[CharBox]) -> list[CharBox]:
    if not boxes:
        return boxes
    by_y = sorted(boxes, key=lambda cb: cb.box.y + cb.box.h / 2)
    heights = sorted(cb.box.h for cb in boxes)
    band_gap = heights[len(heights) // 2] / 2
    bands: list[list[CharBox]] = [[by_y[0]]]
    for cb in by_y[1:]:
        prev = bands[-1][-1]
        if (cb.box.y + cb.box.h / 2) - (prev.box.y + prev.box.h / 2) > band_gap:
            bands.append([cb])
        else:
            bands[-1].append(cb)
    ordered = []
    for band in bands:
        ordered.extend(sorted(band, key=lambda cb: cb.box.x))
    return ordered


def export_pairs(
    manifest: CorpusManifest,
    palette: ClassPalette,
    out_dir: str | Path,
    images_root: str | Path,
    pairing: str = "side-by-side-AB",
    half_size: tuple[int, int] = (256, 256),
) -> int:
    """Write side-by-side AB training pairs: mask left, target right.

    The target half is the plate photo resized to the half size with every
    pixel outside the plate quad set to mid-gray. An index file lists one
    row per pair.
    """
    if pairing != "side-by-side-AB":
        raise GanPrepError(f"unsupported pairing {pairing!r}")
    out_dir = Path(out_dir)
    pair_dir = out_dir / "ab"
    pair_dir.mkdir(parents=True, exist_ok=True)
    images_root = Path(images_root)
    w, h = half_size

    index = []
    for entry in manifest.entries:
        ann = entry.annotation
        mask = render_mask(ann, palette, canvas=half_size)
        target = _gray_background_target(ann, images_root, half_size)
        ab = np.hstack([mask, target])
        name = f"{ann.image_id}_ab.png"
        Image.fromarray(ab).save(pair_dir / name)
        index.append(
            {
                "file": f"ab/{name}",
                "image_id": ann.image_id,
                "layout": ann.layout,
                "text": ann.text,
            }
        )
    write_jsonl(out_dir / "index.jsonl", index)
    return len(index)


def _gray_background_target(
    ann: LpAnnotation, images_root: Path, half_size: tuple[int, int]
) -> np.ndarray:
    from .synth_permute import _resolve_image

    w, h = half_size
    img = Image.open(_resolve_image(images_root, ann.image_id)).convert("RGB")
    src_w, src_h = img.size
    resized = np.asarray(img.resize((w, h), Image.BILINEAR))
    quad_pts = [
        (p[0] * w / src_w, p[1] * h / src_h) for p in ann.corners.to_array()
    ]
    keep = Image.new("L", (w, h), 0)
    ImageDraw.Draw(keep).polygon(quad_pts, fill=255)
    inside = np.asarray(keep, dtype=bool)
    out = np.empty_like(resized)
    out[...] = np.asarray(GRAY_FILL, dtype=np.uint8)
    out[inside] = resized[inside]
    return out


def sample_generation_masks(
    specs: Sequence[LayoutSpec],
    palette: ClassPalette,
    total: int,
    seed: int,
    out_dir: str | Path,
    canvas: tuple[int, int] = (256, 256),
) -> int:
    """Masks for feeding a trained generator, balanced per layout and slot.

    Sequences reuse the least-used-first sampler; each mask places the
    plate over the full canvas with the layout's slot geometry, and the
    intended text is written to annotations.jsonl alongside the masks.
    """
    from .synth_template import layout_share

    layouts = list(dict.fromkeys(s.layout for s in specs))
    share = layout_share(total, layouts)
    by_layout: dict[str, list[LayoutSpec]] = {}
    for spec in specs:
        by_layout.setdefault(spec.layout, []).append(spec)

    out_dir = Path(out_dir)
    mask_dir = out_dir / "masks"
    mask_dir.mkdir(parents=True, exist_ok=True)

    state = BalanceState()
    annotations = []
    sample_index = 0
    for layout in layouts:
        for k in range(share[layout]):
            spec = by_layout[layout][k % len(by_layout[layout])]
            seq = sample_sequence(spec, state, rng_for(seed, sample_index))
            th, tw = spec.template.shape[:2]
            ann = LpAnnotation(
                dataset_id="gan-masks",
                image_id=f"{layout}_mask_{k:06d}",
                layout=layout,
                corners=full_image_quad(tw, th),
                text=seq,
                char_boxes=tuple(CharBox(s.box, c) for s, c in zip(spec.slots, seq)),
                image_size=(tw, th),
            )
            mask = render_mask(ann, palette, canvas=canvas)
            Image.fromarray(mask).save(mask_dir / f"{ann.image_id}.png")
            annotations.append(ann)
            sample_index += 1
    save_annotations(out_dir / "annotations.jsonl", annotations)
    return len(annotations)


@dataclass(frozen=True)
class GanCandidate:
    """One generated plate with its recognizer verdict."""

    image_id: str
    layout: str
    intended_text: str
    ocr_text: str
    confidence: float

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise GanPrepError(
                f"{self.image_id}: confidence {self.confidence} outside [0, 1]"
            )


def load_candidates(path: str | Path) -> list[GanCandidate]:
    return [
        GanCandidate(
            image_id=rec["image_id"],
            layout=rec["layout"],
            intended_text=rec["intended_text"],
            ocr_text=rec["ocr_text"],
            confidence=float(rec["confidence"]),
        )
        for _lineno, rec in read_jsonl(path)
    ]


def filter_top_n(
    candidates: Sequence[GanCandidate],
    n_per_layout: int,
    require_text_match: bool = True,
) -> list[GanCandidate]:
    """Keep the n highest-confidence candidates per layout.

    Ties break on ascending image id, making the order total and the
    selection invariant to input order. With require_text_match, only
    candidates whose recognized text equals the intended text (wildcards
    unified) are eligible.
    """
    if n_per_layout < 1:
        raise GanPrepError("n_per_layout must be >= 1")
    cfg = EvalConfig()
    groups: dict[str, list[GanCandidate]] = {}
    for cand in candidates:
        if require_text_match and normalize_plate_text(
            cand.ocr_text, cfg
        ) != normalize_plate_text(cand.intended_text, cfg):
            continue
        groups.setdefault(cand.layout, []).append(cand)

    selected: list[GanCandidate] = []
    for layout in sorted(groups):
        pool = sorted(groups[layout], key=lambda c: (-c.confidence, c.image_id))
        if len(pool) < n_per_layout:
            log.warning(
                "%s: only %d eligible candidates for top %d",
                layout, len(pool), n_per_layout,
            )
        selected.extend(pool[:n_per_layout])
    return selected
