"""Shared fixtures-in-code for the test suite: random geometry, images, and
benchmark-shaped prediction fixtures."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from plateforge.geometry import Quad


def random_quad(rng: np.random.Generator, scale: float = 100.0, jitter: float = 0.25) -> Quad:
    """Random non-degenerate quad: a scaled unit square with jittered corners.

    Jitter is bounded to a quarter of the side by default so corners cannot
    cross and the quad stays convex enough for stable solves.
    """
    base = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
    while True:
        offset = rng.uniform(-jitter, jitter, size=(4, 2))
        pts = (base + offset) * scale + rng.uniform(-50, 50, size=(1, 2))
        q = Quad.from_array(pts)
        if not q.is_degenerate():
            return q


def checkerboard(size: int = 256, cell: int = 64) -> np.ndarray:
    """RGB checkerboard test pattern."""
    idx = np.arange(size) // cell
    pattern = (idx[:, None] + idx[None, :]) % 2
    img = np.where(pattern[..., None] == 0, 40, 215).astype(np.uint8)
    return np.repeat(img, 3, axis=2)


def write_rate_fixture(
    root: Path,
    model: str,
    datasets: dict[str, tuple[int, int]],
    latency_ms: float | None = None,
) -> tuple[Path, Path]:
    """Ground-truth manifest plus a prediction run with exact hit counts.

    ``datasets`` maps dataset id to (test-set size, correct predictions).
    Returns (manifest path, predictions path).
    """
    from plateforge.corpus import CorpusManifest, LpAnnotation, ManifestEntry
    from plateforge.util import write_jsonl

    entries = []
    preds = []
    for dataset_id, (total, correct) in datasets.items():
        for i in range(total):
            image_id = f"{dataset_id}-{i:05d}"
            ann = LpAnnotation(
                dataset_id=dataset_id,
                image_id=image_id,
                layout="brazilian",
                corners=Quad.from_array([[0, 0], [99, 0], [99, 39], [0, 39]]),
                text="ABC1234",
            )
            entries.append(ManifestEntry(ann, "test", "real"))
            rec = {
                "image_id": image_id,
                "text": "ABC1234" if i < correct else "ABC1230",
            }
            if latency_ms is not None:
                rec["latency_ms"] = latency_ms
            preds.append(rec)
    root.mkdir(parents=True, exist_ok=True)
    manifest_path = root / "manifest.jsonl"
    CorpusManifest(entries).save(manifest_path)
    pred_path = root / f"{model}.jsonl"
    write_jsonl(pred_path, preds)
    return manifest_path, pred_path


# test-set sizes and hit counts whose rates reproduce the reference
# benchmark rows at one-decimal rounding
TRBA_INTRA_CELLS = {
    "caltech": (46, 45),       # 97.8
    "englishlp": (102, 101),   # 99.0
    "ucsd": (60, 59),          # 98.3
    "chineselp": (161, 159),   # 98.8
    "aolp": (687, 679),        # 98.8
    "ssig": (804, 798),        # 99.3
    "ufpr": (1800, 1692),      # 94.0
    "rodosol": (8000, 7784),   # 97.3
}

TRBA_CROSS_CELLS = {
    "openalpr-eu": (108, 107),  # 99.1
    "pku": (2253, 2240),        # 99.4
    "cdhard": (104, 80),        # 76.9
    "clpd": (1200, 1154),       # 96.2
}


def readback_text(img: np.ndarray, spec, atlas) -> str:
    """Template-matching read-back: re-decode a rendered plate's text.

    Independent of the renderer: for every slot it composites each candidate
    glyph onto the blank template region (centered, uniformly scaled to fit,
    matching the renderer's documented convention) and picks the candidate
    with the smallest squared difference against the image.
    """
    from PIL import Image

    chars = []
    for slot in spec.slots:
        x, y = int(slot.box.x), int(slot.box.y)
        w, h = int(slot.box.w), int(slot.box.h)
        region = img[y : y + h, x : x + w].astype(np.float64)
        background = spec.template[y : y + h, x : x + w].astype(np.float64)
        best_cls, best_err = None, None
        for cls in slot.alphabet:
            glyph = atlas.get(spec.layout, cls)
            gh, gw = glyph.shape[:2]
            scale = min(w / gw, h / gh)
            nw, nh = max(1, int(gw * scale)), max(1, int(gh * scale))
            resized = np.asarray(
                Image.fromarray(glyph).resize((nw, nh), Image.NEAREST)
            ).astype(np.float64)
            canvas = background.copy()
            ox, oy = (w - nw) // 2, (h - nh) // 2
            alpha = resized[..., 3:4] / 255.0
            patch = canvas[oy : oy + nh, ox : ox + nw]
            canvas[oy : oy + nh, ox : ox + nw] = resized[..., :3] * alpha + patch * (1 - alpha)
            err = float(((canvas - region) ** 2).sum())
            if best_err is None or err < best_err:
                best_cls, best_err = cls, err
        chars.append(best_cls)
    return "".join(chars)
