"""Built-in plate templates and character glyphs.

Glyphs come from a 5x7 bitmap face defined in-code so rendering is
deterministic everywhere; templates are flat-color plates with a border
and per-layout trim. Desk-scale stand-ins for real plate artwork: the
on-disk layout (one directory per layout holding a template image, a
slot-geometry file, and per-class glyph images) is the interface real
assets would use.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

from .corpus import BUILTIN_LAYOUTS, DIGITS, LETTERS, WILDCARD
from .geometry import BBox

FONT_5X7 = {
    "0": (" ### ", "#   #", "#  ##", "# # #", "##  #", "#   #", " ### "),
    "1": ("  #  ", " ##  ", "  #  ", "  #  ", "  #  ", "  #  ", " ### "),
    "2": (" ### ", "#   #", "    #", "   # ", "  #  ", " #   ", "#####"),
    "3": ("#####", "   # ", "  #  ", "   # ", "    #", "#   #", " ### "),
    "4": ("   # ", "  ## ", " # # ", "#  # ", "#####", "   # ", "   # "),
    "5": ("#####", "#    ", "#### ", "    #", "    #", "#   #", " ### "),
    "6": ("  ## ", " #   ", "#    ", "#### ", "#   #", "#   #", " ### "),
    "7": ("#####", "    #", "   # ", "  #  ", " #   ", " #   ", " #   "),
    "8": (" ### ", "#   #", "#   #", " ### ", "#   #", "#   #", " ### "),
    "9": (" ### ", "#   #", "#   #", " ####", "    #", "   # ", " ##  "),
    "A": (" ### ", "#   #", "#   #", "#####", "#   #", "#   #", "#   #"),
    "B": ("#### ", "#   #", "#   #", "#### ", "#   #", "#   #", "#### "),
    "C": (" ### ", "#   #", "#    ", "#    ", "#    ", "#   #", " ### "),
    "D": ("#### ", "#   #", "#   #", "#   #", "#   #", "#   #", "#### "),
    "E": ("#####", "#    ", "#    ", "#### ", "#    ", "#    ", "#####"),
    "F": ("#####", "#    ", "#    ", "#### ", "#    ", "#    ", "#    "),
    "G": (" ### ", "#   #", "#    ", "# ###", "#   #", "#   #", " ####"),
    "H": ("#   #", "#   #", "#   #", "#####", "#   #", "#   #", "#   #"),
    "I": (" ### ", "  #  ", "  #  ", "  #  ", "  #  ", "  #  ", " ### "),
    "J": ("  ###", "   # ", "   # ", "   # ", "   # ", "#  # ", " ##  "),
    "K": ("#   #", "#  # ", "# #  ", "##   ", "# #  ", "#  # ", "#   #"),
    "L": ("#    ", "#    ", "#    ", "#    ", "#    ", "#    ", "#####"),
    "M": ("#   #", "## ##", "# # #", "# # #", "#   #", "#   #", "#   #"),
    "N": ("#   #", "##  #", "# # #", "#  ##", "#   #", "#   #", "#   #"),
    "O": (" ### ", "#   #", "#   #", "#   #", "#   #", "#   #", " ### "),
    "P": ("#### ", "#   #", "#   #", "#### ", "#    ", "#    ", "#    "),
    "Q": (" ### ", "#   #", "#   #", "#   #", "# # #", "#  # ", " ## #"),
    "R": ("#### ", "#   #", "#   #", "#### ", "# #  ", "#  # ", "#   #"),
    "S": (" ####", "#    ", "#    ", " ### ", "    #", "    #", "#### "),
    "T": ("#####", "  #  ", "  #  ", "  #  ", "  #  ", "  #  ", "  #  "),
    "U": ("#   #", "#   #", "#   #", "#   #", "#   #", "#   #", " ### "),
    "V": ("#   #", "#   #", "#   #", "#   #", "#   #", " # # ", "  #  "),
    "W": ("#   #", "#   #", "#   #", "# # #", "# # #", "## ##", "#   #"),
    "X": ("#   #", "#   #", " # # ", "  #  ", " # # ", "#   #", "#   #"),
    "Y": ("#   #", "#   #", " # # ", "  #  ", "  #  ", "  #  ", "  #  "),
    "Z": ("#####", "    #", "   # ", "  #  ", " #   ", "#    ", "#####"),
    # stand-in for the blurred-ideograph class
    "*": ("  #  ", "# # #", " ### ", "## ##", " ### ", "# # #", "  #  "),
}

# (background, character color, trim color) per layout
PLATE_COLORS = {
    "american": ((238, 240, 245), (24, 44, 118), (180, 60, 60)),
    "brazilian": ((196, 200, 205), (30, 30, 30), (90, 90, 95)),
    "chinese": ((18, 78, 180), (250, 250, 250), (240, 240, 240)),
    "european": ((245, 245, 242), (25, 25, 25), (0, 60, 160)),
    "mercosur": ((250, 250, 250), (15, 15, 15), (0, 70, 165)),
    "taiwanese": ((248, 248, 244), (35, 35, 35), (150, 30, 30)),
}

# per-position alphabets; one string per row
LAYOUT_PATTERNS = {
    "american": ["LLLDDDD"],
    "brazilian": ["LLLDDDD"],
    "chinese": ["*LDDDDD"],
    "european": ["LLDDDLL"],
    "mercosur": ["LLLDLDD"],
    "taiwanese": ["LLL", "DDDD"],
}

_KIND_ALPHABETS = {"L": LETTERS, "D": DIGITS, "*": WILDCARD}


def glyph_bitmap(cls: str) -> np.ndarray:
    """7x5 boolean bitmap for one character class."""
    rows = FONT_5X7[cls]
    return np.array([[c == "#" for c in row] for row in rows], dtype=bool)


def render_glyph(cls: str, color: tuple[int, int, int], scale: int = 8) -> np.ndarray:
    """RGBA glyph image at an integer scale of the 5x7 bitmap."""
    mask = np.kron(glyph_bitmap(cls), np.ones((scale, scale), dtype=bool))
    out = np.zeros((*mask.shape, 4), dtype=np.uint8)
    out[mask, :3] = color
    out[mask, 3] = 255
    return out


def render_template(layout: str, width: int, height: int) -> np.ndarray:
    bg, _fg, trim = PLATE_COLORS[layout]
    img = np.empty((height, width, 3), dtype=np.uint8)
    img[...] = bg
    img[:3, :] = trim
    img[-3:, :] = trim
    img[:, :3] = trim
    img[:, -3:] = trim
    if layout in ("european", "mercosur"):
        if layout == "european":
            img[3:-3, 3:15] = trim
        else:
            img[3:14, 3:-3] = trim
    return img


def _spaced_boxes(x0: int, x1: int, y: int, h: int, n: int, gap: int) -> list[BBox]:
    w = (x1 - x0 - gap * (n - 1)) // n
    used = w * n + gap * (n - 1)
    left = x0 + (x1 - x0 - used) // 2
    return [BBox(left + i * (w + gap), y, w, h) for i in range(n)]


def builtin_layout_geometry(layout: str) -> tuple[int, int, list[tuple[BBox, str, int]]]:
    """Canvas size and (box, alphabet, row) slot list for a built-in layout."""
    pattern = LAYOUT_PATTERNS[layout]
    slots: list[tuple[BBox, str, int]] = []
    if len(pattern) == 1:
        width, height = 360, 120
        x0 = 24 if layout not in ("european", "mercosur") else 28
        y0, slot_h = (30, 64) if layout != "mercosur" else (36, 62)
        boxes = _spaced_boxes(x0, width - 20, y0, slot_h, len(pattern[0]), 8)
        for box, kind in zip(boxes, pattern[0]):
            slots.append((box, _KIND_ALPHABETS[kind], 0))
    else:
        width, height = 240, 170
        rows_y = [(22, 60), (94, 60)]
        gap = 8
        # one slot width across rows keeps characters swappable
        slot_w = min(
            (width - 40 - gap * (len(kinds) - 1)) // len(kinds) for kinds in pattern
        )
        for row, kinds in enumerate(pattern):
            y, slot_h = rows_y[row]
            used = slot_w * len(kinds) + gap * (len(kinds) - 1)
            left = (width - used) // 2
            for i, kind in enumerate(kinds):
                box = BBox(left + i * (slot_w + gap), y, slot_w, slot_h)
                slots.append((box, _KIND_ALPHABETS[kind], row))
    return width, height, slots


def write_builtin_assets(out_dir: str | Path) -> Path:
    """Materialize the built-in layouts in the editable on-disk format."""
    out_dir = Path(out_dir)
    for layout in BUILTIN_LAYOUTS:
        layout_dir = out_dir / layout
        glyph_dir = layout_dir / "glyphs"
        glyph_dir.mkdir(parents=True, exist_ok=True)
        width, height, slots = builtin_layout_geometry(layout)
        Image.fromarray(render_template(layout, width, height)).save(
            layout_dir / "template.png"
        )
        _bg, fg, _trim = PLATE_COLORS[layout]
        classes = sorted({c for _box, alphabet, _row in slots for c in alphabet})
        for cls in classes:
            name = "STAR" if cls == WILDCARD else cls
            Image.fromarray(render_glyph(cls, fg)).save(glyph_dir / f"{name}.png")
        geometry = {
            "layout": layout,
            "rows": len(LAYOUT_PATTERNS[layout]),
            "slots": [
                {"box": [b.x, b.y, b.w, b.h], "alphabet": alphabet, "row": row}
                for b, alphabet, row in slots
            ],
        }
        (layout_dir / "spec.json").write_text(json.dumps(geometry, indent=2) + "\n")
    return out_dir
