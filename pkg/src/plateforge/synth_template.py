"""Template-based plate rendering: balanced sequence sampling, glyph
compositing onto blank templates, the augmentation stack, and corpus
generation."""

from __future__ import annotations

import io
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image, ImageDraw, ImageFilter

from . import assets
from .corpus import (
    ALPHABET,
    BUILTIN_LAYOUTS,
    CharBox,
    CorpusManifest,
    LpAnnotation,
    ManifestEntry,
    save_annotations,
)
from .geometry import (
    BBox,
    Point,
    Quad,
    RectifiedFrame,
    enclosing_bbox,
    homography_from_quads,
    warp_image,
)
from .util import rng_for

log = logging.getLogger(__name__)

# stream tags keeping sequence sampling and augmentation rngs apart
_SEQ_STREAM = 101
_AUG_STREAM = 202


class SynthError(ValueError):
    pass


class MissingGlyph(SynthError):
    pass


class LengthMismatch(SynthError):
    pass


@dataclass(frozen=True)
class Slot:
    box: BBox
    alphabet: str
    row: int = 0

    def __post_init__(self):
        if not self.alphabet:
            raise SynthError("slot with empty alphabet")
        bad = set(self.alphabet) - set(ALPHABET)
        if bad:
            raise SynthError(f"slot alphabet has symbols outside the class set: {bad}")


@dataclass(frozen=True)
class LayoutSpec:
    """A renderable plate style: template raster plus character slots."""

    layout: str
    template: np.ndarray
    slots: tuple[Slot, ...]
    rows: int = 1
    min_len: int = 4
    max_len: int = 8

    def __post_init__(self):
        h, w = self.template.shape[:2]
        for slot in self.slots:
            if slot.box.x < 0 or slot.box.y < 0 or slot.box.x2 > w or slot.box.y2 > h:
                raise SynthError(f"{self.layout}: slot {slot.box} outside {w}x{h} template")
            if not 0 <= slot.row < self.rows:
                raise SynthError(f"{self.layout}: slot row {slot.row} outside {self.rows} rows")
        if not self.min_len <= len(self.slots) <= self.max_len:
            raise SynthError(
                f"{self.layout}: {len(self.slots)} slots outside length range "
                f"{self.min_len}..{self.max_len}"
            )


class GlyphAtlas:
    """Lookup of RGBA glyph rasters by (layout, character class)."""

    def __init__(self, glyphs: dict[tuple[str, str], np.ndarray]):
        self._glyphs = dict(glyphs)

    def get(self, layout: str, cls: str) -> np.ndarray:
        try:
            return self._glyphs[(layout, cls)]
        except KeyError:
            raise MissingGlyph(f"no glyph for class {cls!r} in layout {layout!r}") from None

    def __contains__(self, key):
        return key in self._glyphs


@dataclass
class BalanceState:
    """Per (layout, slot index, class) usage counts for balanced sampling."""

    counts: dict[tuple[str, int, str], int] = field(default_factory=dict)

    def count(self, layout: str, slot_idx: int, cls: str) -> int:
        return self.counts.get((layout, slot_idx, cls), 0)

    def bump(self, layout: str, slot_idx: int, cls: str) -> None:
        key = (layout, slot_idx, cls)
        self.counts[key] = self.counts.get(key, 0) + 1


def sample_sequence(spec: LayoutSpec, state: BalanceState, rng) -> str:
    """Draw one character sequence, least-used class first per position.

    Ties are broken uniformly at random, so after N draws on a slot the
    class counts never spread by more than one. ``state`` is updated in
    place. ``rng`` is a numpy Generator or an int seed.
    """
    if isinstance(rng, (int, np.integer)):
        rng = rng_for(int(rng))
    chars = []
    for idx, slot in enumerate(spec.slots):
        lowest = min(state.count(spec.layout, idx, c) for c in slot.alphabet)
        candidates = [c for c in slot.alphabet if state.count(spec.layout, idx, c) == lowest]
        cls = candidates[int(rng.integers(len(candidates)))]
        state.bump(spec.layout, idx, cls)
        chars.append(cls)
    return "".join(chars)


def render_plate(
    spec: LayoutSpec, seq: str, atlas: GlyphAtlas
) -> tuple[np.ndarray, list[CharBox]]:
    """Composite a sequence onto the template; box list mirrors the slots."""
    if len(seq) != len(spec.slots):
        raise LengthMismatch(f"sequence {seq!r} vs {len(spec.slots)} slots")
    img = spec.template.copy()
    boxes = []
    for slot, cls in zip(spec.slots, seq):
        glyph = atlas.get(spec.layout, cls)
        _paste_into_box(img, glyph, slot.box)
        boxes.append(CharBox(slot.box, cls))
    return img, boxes


def _paste_into_box(img: np.ndarray, glyph: np.ndarray, box: BBox) -> None:
    gh, gw = glyph.shape[:2]
    scale = min(box.w / gw, box.h / gh)
    new_w, new_h = max(1, int(gw * scale)), max(1, int(gh * scale))
    resized = np.asarray(
        Image.fromarray(glyph).resize((new_w, new_h), Image.NEAREST)
    )
    x = int(box.x) + (int(box.w) - new_w) // 2
    y = int(box.y) + (int(box.h) - new_h) // 2
    region = img[y : y + new_h, x : x + new_w]
    alpha = resized[..., 3:4].astype(np.float64) / 255.0
    blended = resized[..., :3] * alpha + region * (1.0 - alpha)
    img[y : y + new_h, x : x + new_w] = np.clip(np.rint(blended), 0, 255).astype(np.uint8)


@dataclass(frozen=True)
class AugmentationConfig:
    """Transform ranges; every upper bound at zero disables its stage.

    perspective_jitter displaces each corner by up to that fraction of the
    matching image dimension. jpeg_quality_drop subtracts from quality 100,
    so (0, 0) skips re-encoding entirely.
    """

    perspective_jitter: float = 0.035
    shadow_opacity: tuple[float, float] = (0.2, 0.5)
    shadow_extent: float = 0.6
    hue_delta: float = 0.04
    saturation_delta: float = 0.25
    brightness_delta: float = 0.25
    noise_amplitude: float = 6.0
    blur_radius: tuple[float, float] = (0.0, 1.1)
    jpeg_quality_drop: tuple[int, int] = (5, 35)
    master_seed: int = 0

    def __post_init__(self):
        for name in ("perspective_jitter", "shadow_extent", "hue_delta",
                     "saturation_delta", "brightness_delta"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise SynthError(f"{name} must be in [0, 1], got {v}")
        if self.noise_amplitude < 0:
            raise SynthError("noise_amplitude must be >= 0")
        for name in ("shadow_opacity", "blur_radius", "jpeg_quality_drop"):
            lo, hi = getattr(self, name)
            if not 0 <= lo <= hi:
                raise SynthError(f"{name} range {lo}..{hi} is not well ordered")
        if not 0 <= self.jpeg_quality_drop[1] <= 99:
            raise SynthError("jpeg_quality_drop must stay within 0..99")

    @classmethod
    def none(cls, master_seed: int = 0) -> "AugmentationConfig":
        """Identity configuration: every stage disabled."""
        return cls(
            perspective_jitter=0.0,
            shadow_opacity=(0.0, 0.0),
            shadow_extent=0.0,
            hue_delta=0.0,
            saturation_delta=0.0,
            brightness_delta=0.0,
            noise_amplitude=0.0,
            blur_radius=(0.0, 0.0),
            jpeg_quality_drop=(0, 0),
            master_seed=master_seed,
        )

    def to_dict(self) -> dict:
        return {
            "perspective_jitter": self.perspective_jitter,
            "shadow_opacity": list(self.shadow_opacity),
            "shadow_extent": self.shadow_extent,
            "hue_delta": self.hue_delta,
            "saturation_delta": self.saturation_delta,
            "brightness_delta": self.brightness_delta,
            "noise_amplitude": self.noise_amplitude,
            "blur_radius": list(self.blur_radius),
            "jpeg_quality_drop": list(self.jpeg_quality_drop),
            "master_seed": self.master_seed,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "AugmentationConfig":
        kwargs = dict(data)
        for name in ("shadow_opacity", "blur_radius", "jpeg_quality_drop"):
            if name in kwargs:
                kwargs[name] = tuple(kwargs[name])
        return cls(**kwargs)


def full_image_quad(width: int, height: int) -> Quad:
    return Quad(
        Point(0, 0), Point(width - 1, 0), Point(width - 1, height - 1), Point(0, height - 1)
    )


def augment(
    img: np.ndarray,
    boxes: Sequence[CharBox],
    cfg: AugmentationConfig,
    sample_index: int,
) -> tuple[np.ndarray, Quad]:
    """Apply the transform stack in fixed order and return the plate quad.

    Order: perspective, shadow, hue/saturation/brightness, noise, blur,
    compression. Deterministic per (cfg.master_seed, sample_index); the
    returned quad is the exact image of the original corners under the
    perspective stage.
    """
    rng = rng_for(cfg.master_seed, _AUG_STREAM, sample_index)
    h, w = img.shape[:2]
    quad = full_image_quad(w, h)

    if cfg.perspective_jitter > 0:
        quad = _jitter_quad(quad, w, h, cfg.perspective_jitter, rng)
        warp = homography_from_quads(full_image_quad(w, h), quad)
        img = warp_image(img, warp, RectifiedFrame(w, h))

    if cfg.shadow_opacity[1] > 0 and cfg.shadow_extent > 0:
        img = _cast_shadow(img, cfg, rng)

    if cfg.hue_delta > 0 or cfg.saturation_delta > 0 or cfg.brightness_delta > 0:
        img = _color_jitter(img, cfg, rng)

    if cfg.noise_amplitude > 0:
        noise = rng.normal(0.0, cfg.noise_amplitude, size=img.shape)
        img = np.clip(img.astype(np.float64) + noise, 0, 255).astype(np.uint8)

    if cfg.blur_radius[1] > 0:
        radius = float(rng.uniform(*cfg.blur_radius))
        if radius > 0.05:
            pil = Image.fromarray(img).filter(ImageFilter.GaussianBlur(radius))
            img = np.asarray(pil)

    if cfg.jpeg_quality_drop[1] > 0:
        drop = int(rng.integers(cfg.jpeg_quality_drop[0], cfg.jpeg_quality_drop[1] + 1))
        if drop > 0:
            buf = io.BytesIO()
            Image.fromarray(img).save(buf, format="JPEG", quality=100 - drop)
            buf.seek(0)
            img = np.asarray(Image.open(buf).convert("RGB"))

    return img, quad


def _jitter_quad(quad: Quad, w: int, h: int, frac: float, rng) -> Quad:
    pts = quad.to_array()
    for _ in range(10):
        dx = rng.uniform(-frac * w, frac * w, size=4)
        dy = rng.uniform(-frac * h, frac * h, size=4)
        moved = np.stack(
            [np.clip(pts[:, 0] + dx, 0, w - 1), np.clip(pts[:, 1] + dy, 0, h - 1)],
            axis=1,
        )
        candidate = Quad.from_array(moved)
        if not candidate.is_degenerate():
            return candidate
    return quad


def _cast_shadow(img: np.ndarray, cfg: AugmentationConfig, rng) -> np.ndarray:
    h, w = img.shape[:2]
    opacity = float(rng.uniform(*cfg.shadow_opacity))
    extent = float(rng.uniform(0.15, cfg.shadow_extent))
    if opacity <= 0:
        return img
    # quadrilateral band entering from a random side
    side = int(rng.integers(4))
    span = extent * (w if side in (0, 1) else h)
    a, b = sorted(rng.uniform(0, span, size=2))
    if side == 0:  # left
        poly = [(0, 0), (a, 0), (b, h), (0, h)]
    elif side == 1:  # right
        poly = [(w, 0), (w - a, 0), (w - b, h), (w, h)]
    elif side == 2:  # top
        poly = [(0, 0), (w, 0), (w, a), (0, b)]
    else:  # bottom
        poly = [(0, h), (w, h), (w, h - a), (0, h - b)]
    mask = Image.new("L", (w, h), 0)
    ImageDraw.Draw(mask).polygon(poly, fill=255)
    factor = np.where(np.asarray(mask, dtype=bool), 1.0 - opacity, 1.0)
    return np.clip(img.astype(np.float64) * factor[..., None], 0, 255).astype(np.uint8)


def _color_jitter(img: np.ndarray, cfg: AugmentationConfig, rng) -> np.ndarray:
    hsv = np.asarray(Image.fromarray(img).convert("HSV")).astype(np.float64)
    if cfg.hue_delta > 0:
        shift = rng.uniform(-cfg.hue_delta, cfg.hue_delta) * 255.0
        hsv[..., 0] = np.mod(hsv[..., 0] + shift, 256.0)
    if cfg.saturation_delta > 0:
        factor = 1.0 + rng.uniform(-cfg.saturation_delta, cfg.saturation_delta)
        hsv[..., 1] = np.clip(hsv[..., 1] * factor, 0, 255)
    if cfg.brightness_delta > 0:
        factor = 1.0 + rng.uniform(-cfg.brightness_delta, cfg.brightness_delta)
        hsv[..., 2] = np.clip(hsv[..., 2] * factor, 0, 255)
    pil = Image.fromarray(hsv.astype(np.uint8), mode="HSV").convert("RGB")
    return np.asarray(pil)


def builtin_specs() -> tuple[list[LayoutSpec], GlyphAtlas]:
    """The six built-in layouts with their glyph atlas, all in memory."""
    specs, glyphs = [], {}
    for layout in BUILTIN_LAYOUTS:
        width, height, slot_geo = assets.builtin_layout_geometry(layout)
        template = assets.render_template(layout, width, height)
        slots = tuple(Slot(box, alphabet, row) for box, alphabet, row in slot_geo)
        rows = max(s.row for s in slots) + 1
        specs.append(LayoutSpec(layout, template, slots, rows=rows))
        _fg = assets.PLATE_COLORS[layout][1]
        for cls in sorted({c for s in slots for c in s.alphabet}):
            glyphs[(layout, cls)] = assets.render_glyph(cls, _fg)
    return specs, GlyphAtlas(glyphs)


def load_specs(specs_dir: str | Path) -> tuple[list[LayoutSpec], GlyphAtlas]:
    """Read layout specs and glyphs from the on-disk asset format."""
    specs_dir = Path(specs_dir)
    specs, glyphs = [], {}
    layout_dirs = sorted(p for p in specs_dir.iterdir() if (p / "spec.json").exists())
    if not layout_dirs:
        raise SynthError(f"no layout specs under {specs_dir}")
    for layout_dir in layout_dirs:
        geometry = json.loads((layout_dir / "spec.json").read_text())
        layout = geometry["layout"]
        template = np.asarray(Image.open(layout_dir / "template.png").convert("RGB"))
        slots = tuple(
            Slot(BBox(*s["box"]), s["alphabet"], s.get("row", 0))
            for s in geometry["slots"]
        )
        specs.append(LayoutSpec(layout, template, slots, rows=int(geometry.get("rows", 1))))
        for glyph_path in sorted((layout_dir / "glyphs").glob("*.png")):
            cls = "*" if glyph_path.stem == "STAR" else glyph_path.stem
            glyphs[(layout, cls)] = np.asarray(Image.open(glyph_path).convert("RGBA"))
    return specs, GlyphAtlas(glyphs)


def layout_share(total: int, layouts: Sequence[str]) -> dict[str, int]:
    """Near-even split of a total count; remainder goes to the first layouts."""
    base, remainder = divmod(total, len(layouts))
    return {layout: base + (1 if i < remainder else 0) for i, layout in enumerate(layouts)}


def generate_template_corpus(
    specs: Sequence[LayoutSpec],
    total: int,
    cfg: AugmentationConfig,
    out_dir: str | Path,
    atlas: GlyphAtlas | None = None,
    workers: int = 1,
    dataset_id: str = "synthetic-template",
) -> CorpusManifest:
    """Render a balanced corpus of augmented template plates.

    Sequences are planned serially against one balance state so results
    are identical for any worker count; rendering fans out per sample.
    Writes images/, annotations.jsonl and manifest.jsonl under out_dir.
    """
    if not specs:
        raise SynthError("no layout specs given")
    if atlas is None:
        atlas = builtin_specs()[1] if _all_builtin(specs) else None
        if atlas is None:
            raise SynthError("an atlas is required for non-builtin specs")
    layouts = list(dict.fromkeys(s.layout for s in specs))
    if total < len(layouts):
        raise SynthError(f"total {total} below the number of layouts {len(layouts)}")
    share = layout_share(total, layouts)
    by_layout: dict[str, list[LayoutSpec]] = {}
    for spec in specs:
        by_layout.setdefault(spec.layout, []).append(spec)

    state = BalanceState()
    tasks = []
    sample_index = 0
    for layout in layouts:
        for k in range(share[layout]):
            spec = by_layout[layout][k % len(by_layout[layout])]
            seq = sample_sequence(spec, state, rng_for(cfg.master_seed, _SEQ_STREAM, sample_index))
            tasks.append((spec, seq, cfg, sample_index, layout, k))
            sample_index += 1

    out_dir = Path(out_dir)
    image_dir = out_dir / "images"
    image_dir.mkdir(parents=True, exist_ok=True)
    spec_index = {id(spec): i for i, spec in enumerate(specs)}
    job_args = [
        (spec_index[id(spec)], seq, cfg, idx,
         str(image_dir / f"{layout}_{k:06d}.png"), dataset_id)
        for spec, seq, cfg, idx, layout, k in tasks
    ]
    if workers > 1:
        with ProcessPoolExecutor(
            max_workers=workers, initializer=_init_render_worker, initargs=(list(specs), atlas)
        ) as pool:
            annotations = list(pool.map(_render_task, job_args, chunksize=8))
    else:
        _init_render_worker(list(specs), atlas)
        annotations = [_render_task(args) for args in job_args]

    manifest = CorpusManifest(
        [ManifestEntry(ann, "train", "template") for ann in annotations]
    )
    save_annotations(out_dir / "annotations.jsonl", annotations)
    manifest.save(out_dir / "manifest.jsonl")
    log.info("generated %d template plates under %s", len(annotations), out_dir)
    return manifest


def _all_builtin(specs: Sequence[LayoutSpec]) -> bool:
    return all(s.layout in BUILTIN_LAYOUTS for s in specs)


# heavy render context passed once per worker, not per task
_RENDER_CTX: dict = {}


def _init_render_worker(specs: list, atlas: "GlyphAtlas") -> None:
    _RENDER_CTX["specs"] = specs
    _RENDER_CTX["atlas"] = atlas


def _render_task(args) -> LpAnnotation:
    spec_idx, seq, cfg, sample_index, out_path, dataset_id = args
    spec = _RENDER_CTX["specs"][spec_idx]
    atlas = _RENDER_CTX["atlas"]
    img, boxes = render_plate(spec, seq, atlas)
    augmented, quad = augment(img, boxes, cfg, sample_index)
    h, w = augmented.shape[:2]
    warp = homography_from_quads(full_image_quad(w, h), quad)
    warped_boxes = tuple(
        CharBox(_clipped_bbox(warp.apply_quad(cb.box.to_quad()), w, h), cb.cls)
        for cb in boxes
    )
    Image.fromarray(augmented).save(out_path)
    return LpAnnotation(
        dataset_id=dataset_id,
        image_id=Path(out_path).stem,
        layout=spec.layout,
        corners=quad,
        text=seq,
        char_boxes=warped_boxes,
        image_size=(w, h),
    )


def _clipped_bbox(q: Quad, w: int, h: int) -> BBox:
    box = enclosing_bbox(q)
    x1 = min(max(box.x, 0.0), w - 2.0)
    y1 = min(max(box.y, 0.0), h - 2.0)
    x2 = max(min(box.x2, w - 1.0), x1 + 1.0)
    y2 = max(min(box.y2, h - 1.0), y1 + 1.0)
    return BBox(round(x1, 2), round(y1, 2), round(x2 - x1, 2), round(y2 - y1, 2))
