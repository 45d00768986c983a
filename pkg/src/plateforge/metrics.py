"""Scoring: corner error (LP-NME), end-to-end recognition rate, detection
precision/recall/F-score at a fixed IoU threshold, and throughput."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .geometry import BBox, DegenerateQuad, Quad, enclosing_bbox, iou
from .util import read_jsonl

log = logging.getLogger(__name__)

WILDCARD = "*"


class MetricsError(ValueError):
    pass


class DegenerateGroundTruth(MetricsError):
    """Ground-truth quad encloses no area, so the normalizer is undefined."""


class NoTimings(MetricsError):
    """Prediction run carries no latency data."""


@dataclass(frozen=True)
class EvalConfig:
    iou_threshold: float = 0.7
    chinese_wildcard: bool = True
    case_fold: bool = True

    def __post_init__(self):
        if not 0 < self.iou_threshold <= 1:
            raise MetricsError(f"iou_threshold must be in (0, 1], got {self.iou_threshold}")


@dataclass
class PredictionRun:
    """One model's outputs over a test set."""

    model_id: str
    texts: dict[str, str] = field(default_factory=dict)
    boxes: dict[str, list[tuple[BBox, float]]] = field(default_factory=dict)
    quads: dict[str, Quad] = field(default_factory=dict)
    latencies_ms: dict[str, float] = field(default_factory=dict)

    def add_latency(self, image_id: str, ms: float) -> None:
        if ms <= 0:
            raise MetricsError(f"latency must be positive, got {ms} for {image_id}")
        self.latencies_ms[image_id] = ms


def load_prediction_run(path: str | Path, model_id: str | None = None) -> PredictionRun:
    """Read a prediction run from JSONL.

    Each record may carry any of: ``text``, ``box`` [x, y, w, h] with
    ``score``, ``quad`` [8 corner reals, tl/tr/br/bl], ``latency_ms``.
    Several records may share an ``image_id`` (one per detection).
    """
    path = Path(path)
    run = PredictionRun(model_id=model_id or path.stem)
    for lineno, rec in read_jsonl(path):
        try:
            image_id = rec["image_id"]
        except KeyError:
            raise MetricsError(f"{path}:{lineno}: record lacks image_id") from None
        if rec.get("text") is not None:
            run.texts[image_id] = rec["text"]
        if rec.get("box") is not None:
            score = float(rec.get("score", 0.0))
            run.boxes.setdefault(image_id, []).append((BBox(*rec["box"]), score))
        if rec.get("quad") is not None:
            run.quads[image_id] = Quad.from_array(rec["quad"])
        if rec.get("latency_ms") is not None:
            run.add_latency(image_id, float(rec["latency_ms"]))
    return run


def lp_nme(gt: Quad, pred: Quad) -> float:
    """Mean corner displacement over the ground-truth enclosing-box diagonal.

    Corners are compared by role (tl with tl, and so on); the result is
    invariant under joint uniform scaling and translation of both quads.
    """
    try:
        d = enclosing_bbox(gt).diagonal
    except DegenerateQuad as exc:
        raise DegenerateGroundTruth(str(exc)) from exc
    deltas = np.linalg.norm(gt.to_array() - pred.to_array(), axis=1)
    return float(deltas.mean() / d)


def normalize_plate_text(text: str, cfg: EvalConfig = EvalConfig()) -> str:
    """Canonical form for full-string comparison.

    Uppercases when case folding is on; maps CJK ideographs to the wildcard
    class when wildcard handling is on (the wildcard itself passes through).
    """
    if cfg.case_fold:
        text = text.upper()
    if cfg.chinese_wildcard:
        text = "".join(
            WILDCARD if 0x4E00 <= ord(ch) <= 0x9FFF else ch for ch in text
        )
    return text


def recognition_rate(
    gt: Sequence[tuple[str, str]],
    run: PredictionRun,
    cfg: EvalConfig = EvalConfig(),
) -> float:
    """Fraction of plates whose full text is predicted exactly.

    Plates missing from the run count as incorrect (a plate the pipeline
    never produced text for was not recognized).
    """
    if not gt:
        raise MetricsError("empty ground truth")
    missing = [image_id for image_id, _ in gt if image_id not in run.texts]
    if missing:
        log.warning(
            "%s: %d of %d ground-truth plates have no prediction (counted incorrect)",
            run.model_id, len(missing), len(gt),
        )
    correct = sum(
        1
        for image_id, text in gt
        if image_id in run.texts
        and normalize_plate_text(run.texts[image_id], cfg) == normalize_plate_text(text, cfg)
    )
    return correct / len(gt)


def detection_prf(
    gt: Mapping[str, Sequence[BBox]],
    preds: Mapping[str, Sequence[tuple[BBox, float]]],
    cfg: EvalConfig = EvalConfig(),
) -> tuple[float, float, float]:
    """Dataset-wide precision, recall and F-score at the config threshold.

    Per image, predictions in descending score order claim the unmatched
    ground-truth box of highest IoU; the claim counts as a true positive
    only when that IoU exceeds the threshold.
    """
    tp = fp = fn = 0
    for image_id in set(gt) | set(preds):
        gt_boxes = list(gt.get(image_id, ()))
        matched = [False] * len(gt_boxes)
        scored = sorted(preds.get(image_id, ()), key=lambda bs: -bs[1])
        for box, _score in scored:
            best, best_iou = None, 0.0
            for i, g in enumerate(gt_boxes):
                if matched[i]:
                    continue
                overlap = iou(box, g)
                if overlap > best_iou:
                    best, best_iou = i, overlap
            if best is not None and best_iou > cfg.iou_threshold:
                matched[best] = True
                tp += 1
            else:
                fp += 1
        fn += matched.count(False)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f_score = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f_score


def fps(run: PredictionRun) -> float:
    """Frames per second from the mean per-image latency."""
    if not run.latencies_ms:
        raise NoTimings(f"run {run.model_id} has no latency data")
    return 1000.0 / (sum(run.latencies_ms.values()) / len(run.latencies_ms))
