"""Planar geometry for plate regions.

Homography estimation between corner quads, perspective warping with
inverse-mapped bilinear sampling, rectification frame computation, and
axis-aligned box measures (enclosing box, IoU).

All functions are pure; none mutate their inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

GRAY_FILL = (127, 127, 127)

# |triangle area| below this means three corners are collinear
COLLINEAR_AREA_TOL = 1e-9
# |det| below this (after canonical scaling) means the matrix is not usable
SINGULAR_DET_TOL = 1e-12


class GeometryError(ValueError):
    """Base class for geometry failures."""


class DegenerateQuad(GeometryError):
    """Quad has collinear corners or encloses no area."""


class SingularSystem(GeometryError):
    """Linear solve failed or the homography is not invertible."""


class TooSmall(GeometryError):
    """Rectification target would be under 2 pixels on a side."""


@dataclass(frozen=True)
class Point:
    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise GeometryError(f"non-finite point ({self.x}, {self.y})")


@dataclass(frozen=True)
class Quad:
    """Four ordered corners, clockwise from top-left (tl, tr, br, bl)."""

    tl: Point
    tr: Point
    br: Point
    bl: Point

    @classmethod
    def from_array(cls, arr) -> "Quad":
        a = np.asarray(arr, dtype=float).reshape(4, 2)
        return cls(*(Point(float(x), float(y)) for x, y in a))

    def to_array(self) -> np.ndarray:
        return np.array(
            [[p.x, p.y] for p in (self.tl, self.tr, self.br, self.bl)], dtype=float
        )

    def signed_area(self) -> float:
        a = self.to_array()
        x, y = a[:, 0], a[:, 1]
        return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))

    def is_degenerate(self) -> bool:
        a = self.to_array()
        for i in range(4):
            tri = a[[i, (i + 1) % 4, (i + 2) % 4]]
            area = 0.5 * abs(
                (tri[1, 0] - tri[0, 0]) * (tri[2, 1] - tri[0, 1])
                - (tri[2, 0] - tri[0, 0]) * (tri[1, 1] - tri[0, 1])
            )
            if area <= COLLINEAR_AREA_TOL:
                return True
        return False


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box: top-left corner plus positive width/height."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.x, self.y, self.w, self.h)):
            raise GeometryError("non-finite box")
        if self.w <= 0 or self.h <= 0:
            raise GeometryError(f"box needs positive size, got {self.w}x{self.h}")

    @property
    def x2(self) -> float:
        return self.x + self.w

    @property
    def y2(self) -> float:
        return self.y + self.h

    @property
    def area(self) -> float:
        return self.w * self.h

    @property
    def diagonal(self) -> float:
        return math.hypot(self.w, self.h)

    def to_quad(self) -> Quad:
        return Quad(
            Point(self.x, self.y),
            Point(self.x2, self.y),
            Point(self.x2, self.y2),
            Point(self.x, self.y2),
        )

    def intersects(self, other: "BBox") -> bool:
        return (
            self.x < other.x2
            and other.x < self.x2
            and self.y < other.y2
            and other.y < self.y2
        )


@dataclass(frozen=True)
class Homography:
    """3x3 projective map. Canonical scale: m[2][2] == 1 where possible."""

    m: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.m, dtype=float)
        if m.shape != (3, 3) or not np.all(np.isfinite(m)):
            raise GeometryError("homography must be a finite 3x3 matrix")
        scale = np.max(np.abs(m))
        if scale == 0 or abs(np.linalg.det(m / scale)) < SINGULAR_DET_TOL:
            raise SingularSystem("homography matrix is singular")
        if abs(m[2, 2]) > SINGULAR_DET_TOL:
            m = m / m[2, 2]
        object.__setattr__(self, "m", m)

    @classmethod
    def identity(cls) -> "Homography":
        return cls(np.eye(3))

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.m))

    def compose(self, inner: "Homography") -> "Homography":
        """Map that applies ``inner`` first, then this one."""
        return Homography(self.m @ inner.m)

    def apply(self, points) -> np.ndarray:
        """Transform an (n, 2) array of points."""
        pts = np.asarray(points, dtype=float).reshape(-1, 2)
        homog = np.hstack([pts, np.ones((len(pts), 1))])
        mapped = homog @ self.m.T
        w = mapped[:, 2:3]
        if np.any(np.abs(w) < SINGULAR_DET_TOL):
            raise SingularSystem("point maps to infinity")
        return mapped[:, :2] / w

    def apply_quad(self, q: Quad) -> Quad:
        return Quad.from_array(self.apply(q.to_array()))


@dataclass(frozen=True)
class RectifiedFrame:
    """Output raster for rectification, with its axis-aligned target quad."""

    width: int
    height: int

    def __post_init__(self):
        if self.width < 2 or self.height < 2:
            raise TooSmall(f"frame {self.width}x{self.height} is under 2px a side")

    @property
    def target(self) -> Quad:
        w, h = self.width - 1, self.height - 1
        return Quad(Point(0, 0), Point(w, 0), Point(w, h), Point(0, h))


def _require_nondegenerate(q: Quad) -> None:
    if q.is_degenerate():
        raise DegenerateQuad(f"quad has collinear corners: {q}")


def homography_from_quads(src: Quad, dst: Quad) -> Homography:
    """Perspective map taking each corner of ``src`` onto ``dst``.

    Direct linear transform on the eight correspondence equations, with
    isotropic normalization of both point sets for numerical conditioning.
    Corner residuals are below 1e-6 px for any non-degenerate quad pair.
    """
    _require_nondegenerate(src)
    _require_nondegenerate(dst)
    s, t_s = _normalize_points(src.to_array())
    d, t_d = _normalize_points(dst.to_array())

    rows = []
    for (sx, sy), (dx, dy) in zip(s, d):
        rows.append([sx, sy, 1, 0, 0, 0, -dx * sx, -dx * sy, -dx])
        rows.append([0, 0, 0, sx, sy, 1, -dy * sx, -dy * sy, -dy])
    a = np.array(rows, dtype=float)
    try:
        _, sing, vt = np.linalg.svd(a)
    except np.linalg.LinAlgError as exc:
        raise SingularSystem(str(exc)) from exc
    h_norm = vt[-1].reshape(3, 3)
    return Homography(np.linalg.inv(t_d) @ h_norm @ t_s)


def _normalize_points(pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Center points and scale mean distance to sqrt(2); return (pts, T)."""
    centroid = pts.mean(axis=0)
    dist = np.linalg.norm(pts - centroid, axis=1).mean()
    scale = math.sqrt(2) / dist if dist > 0 else 1.0
    t = np.array(
        [
            [scale, 0, -scale * centroid[0]],
            [0, scale, -scale * centroid[1]],
            [0, 0, 1],
        ]
    )
    homog = np.hstack([pts, np.ones((len(pts), 1))])
    return (homog @ t.T)[:, :2], t


def rect_target_frame(q: Quad) -> RectifiedFrame:
    """Axis-aligned frame a detected quad should be rectified into.

    Side lengths come from the larger of the two opposing corner-to-corner
    Euclidean distances (top vs bottom edge for width, left vs right edge
    for height). The frame spans one more pixel than the rounded distance
    so corner separation is preserved: corners land on pixel centers 0 and
    round(d), which also makes the computation idempotent on its own
    target quads.
    """
    _require_nondegenerate(q)
    a = q.to_array()
    tl, tr, br, bl = a
    max_w = max(np.linalg.norm(tr - tl), np.linalg.norm(br - bl))
    max_h = max(np.linalg.norm(bl - tl), np.linalg.norm(br - tr))
    width = _round_half_up(max_w) + 1
    height = _round_half_up(max_h) + 1
    if width < 2 or height < 2:
        raise TooSmall(f"target frame {width}x{height} from {q}")
    return RectifiedFrame(width, height)


def _round_half_up(v: float) -> int:
    return int(math.floor(v + 0.5))


def warp_image(img: np.ndarray, h: Homography, out: RectifiedFrame) -> np.ndarray:
    """Warp an RGB image through ``h`` into the output frame.

    Every output pixel is sampled by inverse mapping with bilinear
    interpolation; samples falling outside the source raster are filled
    with mid-gray.
    """
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise GeometryError(f"expected HxWx3 image, got shape {img.shape}")
    inv = h.inverse().m

    xs, ys = np.meshgrid(
        np.arange(out.width, dtype=float), np.arange(out.height, dtype=float)
    )
    ones = np.ones_like(xs)
    denom = inv[2, 0] * xs + inv[2, 1] * ys + inv[2, 2] * ones
    safe = np.abs(denom) > SINGULAR_DET_TOL
    denom = np.where(safe, denom, 1.0)
    sx = (inv[0, 0] * xs + inv[0, 1] * ys + inv[0, 2]) / denom
    sy = (inv[1, 0] * xs + inv[1, 1] * ys + inv[1, 2]) / denom

    src_h, src_w = img.shape[:2]
    inside = safe & (sx >= 0) & (sx <= src_w - 1) & (sy >= 0) & (sy <= src_h - 1)
    sx = np.clip(sx, 0, src_w - 1)
    sy = np.clip(sy, 0, src_h - 1)

    x0 = np.floor(sx).astype(int)
    y0 = np.floor(sy).astype(int)
    x1 = np.minimum(x0 + 1, src_w - 1)
    y1 = np.minimum(y0 + 1, src_h - 1)
    fx = (sx - x0)[..., None]
    fy = (sy - y0)[..., None]

    src = img.astype(float)
    top = src[y0, x0] * (1 - fx) + src[y0, x1] * fx
    bottom = src[y1, x0] * (1 - fx) + src[y1, x1] * fx
    blended = top * (1 - fy) + bottom * fy

    result = np.empty((out.height, out.width, 3), dtype=np.uint8)
    result[...] = np.asarray(GRAY_FILL, dtype=np.uint8)
    rounded = np.clip(np.rint(blended), 0, 255).astype(np.uint8)
    result[inside] = rounded[inside]
    return result


def rectify(img: np.ndarray, corners: Quad) -> tuple[np.ndarray, RectifiedFrame]:
    """Crop-and-unwarp a plate region to a frontal view."""
    frame = rect_target_frame(corners)
    h = homography_from_quads(corners, frame.target)
    return warp_image(img, h, frame), frame


def enclosing_bbox(q: Quad) -> BBox:
    """Smallest axis-aligned box containing all four corners."""
    a = q.to_array()
    x1, y1 = a.min(axis=0)
    x2, y2 = a.max(axis=0)
    if x2 - x1 <= 0 or y2 - y1 <= 0:
        raise DegenerateQuad(f"quad spans no area: {q}")
    return BBox(float(x1), float(y1), float(x2 - x1), float(y2 - y1))


def iou(a: BBox, b: BBox) -> float:
    """Intersection-over-union of two boxes; 0 when disjoint."""
    ix = min(a.x2, b.x2) - max(a.x, b.x)
    iy = min(a.y2, b.y2) - max(a.y, b.y)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)
