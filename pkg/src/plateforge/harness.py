"""Experiment orchestration: turns prediction files plus a ground-truth
manifest into the benchmark's report shapes (intra/cross tables, ablation
rows, reduced-data grids, detection and corner tables, speed/accuracy)."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from .corpus import CorpusManifest
from .geometry import enclosing_bbox
from .metrics import (
    EvalConfig,
    PredictionRun,
    detection_prf,
    fps,
    load_prediction_run,
    lp_nme,
    NoTimings,
    recognition_rate,
)
from .util import config_hash, fmt1

log = logging.getLogger(__name__)

REPORT_KINDS = (
    "intra",
    "cross",
    "ablation",
    "reduced-data",
    "detection",
    "corner",
    "speed-accuracy",
)


class HarnessError(ValueError):
    pass


class MissingPredictions(HarnessError):
    """A configured (model, dataset/arm) cell has no usable predictions."""


@dataclass(frozen=True)
class ExperimentConfig:
    """Declarative description of one evaluation table."""

    kind: str
    gt_manifest: str | Path | None = None
    models: dict[str, str] = field(default_factory=dict)
    datasets: tuple[str, ...] | None = None
    metric: EvalConfig = EvalConfig()
    grouping: str = "dataset"
    extra: dict = field(default_factory=dict)
    base_dir: Path = Path(".")

    def __post_init__(self):
        if self.kind not in REPORT_KINDS:
            raise HarnessError(f"unknown table kind {self.kind!r}")
        if self.grouping not in ("dataset", "layout", "vehicle_type"):
            raise HarnessError(f"unknown grouping {self.grouping!r}")

    @classmethod
    def from_file(cls, path: str | Path) -> "ExperimentConfig":
        path = Path(path)
        raw = json.loads(path.read_text())
        metric = EvalConfig(**raw.get("metric", {}))
        known = {"kind", "gt_manifest", "models", "datasets", "metric", "grouping"}
        return cls(
            kind=raw["kind"],
            gt_manifest=raw.get("gt_manifest"),
            models=dict(raw.get("models", {})),
            datasets=tuple(raw["datasets"]) if raw.get("datasets") else None,
            metric=metric,
            grouping=raw.get("grouping", "dataset"),
            extra={k: v for k, v in raw.items() if k not in known},
            base_dir=path.parent,
        )

    def resolve(self, rel: str | Path) -> Path:
        rel = Path(rel)
        return rel if rel.is_absolute() else self.base_dir / rel

    def describe(self) -> dict:
        return {
            "kind": self.kind,
            "gt_manifest": str(self.gt_manifest),
            "models": {k: str(v) for k, v in sorted(self.models.items())},
            "datasets": list(self.datasets) if self.datasets else None,
            "metric": {
                "iou_threshold": self.metric.iou_threshold,
                "chinese_wildcard": self.metric.chinese_wildcard,
                "case_fold": self.metric.case_fold,
            },
            "grouping": self.grouping,
            "extra": self.extra,
        }


Cell = float | tuple[float, float] | None


@dataclass
class ExperimentReport:
    kind: str
    row_labels: list[str]
    col_labels: list[str]
    cells: list[list[Cell]]
    row_averages: list[float] | None = None
    higher_is_better: bool = True
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.cells) != len(self.row_labels):
            raise HarnessError("cell rows do not match row labels")
        for row in self.cells:
            if len(row) != len(self.col_labels):
                raise HarnessError("cell columns do not match column labels")
        self.check_averages()

    def check_averages(self) -> None:
        """Row averages must equal the unweighted mean of their cells."""
        if self.row_averages is None:
            return
        for label, row, avg in zip(self.row_labels, self.cells, self.row_averages):
            values = [c for c in row if isinstance(c, (int, float))]
            if not values:
                continue
            expected = sum(values) / len(values)
            if abs(expected - avg) > 1e-9:
                raise HarnessError(
                    f"row {label!r}: average {avg} != mean of cells {expected}"
                )


def _group_key(entry, grouping: str) -> str | None:
    if grouping == "dataset":
        return entry.annotation.dataset_id
    if grouping == "layout":
        return entry.annotation.layout
    return entry.annotation.vehicle_type


def _test_groups(
    manifest: CorpusManifest, cfg: ExperimentConfig
) -> dict[str, list]:
    groups: dict[str, list] = {}
    for entry in manifest.entries:
        if entry.split != "test":
            continue
        key = _group_key(entry, cfg.grouping)
        if key is None:
            continue
        groups.setdefault(key, []).append(entry)
    if cfg.datasets:
        missing = [d for d in cfg.datasets if d not in groups]
        if missing:
            raise MissingPredictions(
                f"configured dataset(s) with no test entries: {', '.join(missing)}"
            )
        groups = {d: groups[d] for d in cfg.datasets}
    if not groups:
        raise HarnessError("manifest has no test entries to evaluate")
    return groups


def run_eval(cfg: ExperimentConfig) -> ExperimentReport:
    """One cell per (model, group) under the configured metric.

    intra/cross report recognition rate (%); "detection" reports
    recall/precision/F-score rows per model; "corner" reports mean corner
    error (lower is better). Row averages are unweighted across groups.
    """
    if cfg.kind not in ("intra", "cross", "detection", "corner"):
        raise HarnessError(f"run_eval does not handle kind {cfg.kind!r}")
    if not cfg.models:
        raise MissingPredictions("no models configured")
    manifest = CorpusManifest.load(cfg.resolve(cfg.gt_manifest))
    groups = _test_groups(manifest, cfg)
    col_labels = list(groups)

    runs = {
        model: load_prediction_run(cfg.resolve(path), model)
        for model, path in cfg.models.items()
    }

    row_labels: list[str] = []
    cells: list[list[Cell]] = []
    if cfg.kind in ("intra", "cross"):
        for model, run in runs.items():
            row = []
            for dataset, entries in groups.items():
                gt = [(e.annotation.image_id, e.annotation.text) for e in entries]
                covered = sum(1 for i, _t in gt if i in run.texts)
                if covered == 0:
                    raise MissingPredictions(f"model {model!r} has no predictions for {dataset!r}")
                row.append(100.0 * recognition_rate(gt, run, cfg.metric))
            row_labels.append(model)
            cells.append(row)
    elif cfg.kind == "corner":
        for model, run in runs.items():
            row = []
            for dataset, entries in groups.items():
                errors = []
                for e in entries:
                    pred = run.quads.get(e.annotation.image_id)
                    if pred is None:
                        continue
                    errors.append(lp_nme(e.annotation.corners, pred))
                if not errors:
                    raise MissingPredictions(f"model {model!r} has no corner predictions for {dataset!r}")
                row.append(sum(errors) / len(errors))
            row_labels.append(model)
            cells.append(row)
    else:  # detection
        for model, run in runs.items():
            per_metric: dict[str, list[float]] = {"Recall": [], "Precision": [], "F-score": []}
            for dataset, entries in groups.items():
                gt_boxes = {
                    e.annotation.image_id: [enclosing_bbox(e.annotation.corners)]
                    for e in entries
                }
                preds = {i: run.boxes.get(i, []) for i in gt_boxes}
                if not any(preds.values()):
                    raise MissingPredictions(f"model {model!r} has no boxes for {dataset!r}")
                p, r, f = detection_prf(gt_boxes, preds, cfg.metric)
                per_metric["Recall"].append(100.0 * r)
                per_metric["Precision"].append(100.0 * p)
                per_metric["F-score"].append(100.0 * f)
            for metric_name, values in per_metric.items():
                row_labels.append(f"{model} ({metric_name})")
                cells.append(list(values))

    averages = [
        sum(v for v in row if v is not None) / len(row) for row in cells
    ]
    return ExperimentReport(
        kind=cfg.kind,
        row_labels=row_labels,
        col_labels=col_labels,
        cells=cells,
        row_averages=averages,
        higher_is_better=cfg.kind != "corner",
        metadata={"config_hash": config_hash(cfg.describe())},
    )


def _mean_std(values: Sequence[float]) -> tuple[float, float]:
    mean = sum(values) / len(values)
    if len(values) < 2:
        return mean, 0.0
    var = sum((v - mean) ** 2 for v in values) / (len(values) - 1)
    return mean, var**0.5


def run_ablation(cfg: ExperimentConfig, arms: Sequence[Mapping] | None = None) -> ExperimentReport:
    """Training-composition rows; cells are mean +/- sample stddev across
    every (model, dataset) recognition rate, one column per variant
    (typically unrectified and rectified)."""
    arms = list(arms if arms is not None else cfg.extra.get("arms", ()))
    if not arms:
        raise MissingPredictions("no ablation arms configured")
    manifest = CorpusManifest.load(cfg.resolve(cfg.gt_manifest))
    groups = _test_groups(manifest, cfg)

    col_labels: list[str] = []
    for arm in arms:
        for variant in arm["runs"]:
            if variant not in col_labels:
                col_labels.append(variant)

    row_labels, cells = [], []
    for arm in arms:
        label = "+".join(arm["sources"]) if arm.get("sources") else arm.get("label", "arm")
        row: list[Cell] = []
        for variant in col_labels:
            model_paths = arm["runs"].get(variant)
            if not model_paths:
                row.append(None)
                continue
            values = []
            for model, path in model_paths.items():
                path = cfg.resolve(path)
                if not Path(path).exists():
                    raise MissingPredictions(
                        f"arm {label!r}, variant {variant!r}: missing run for {model!r}"
                    )
                run = load_prediction_run(path, model)
                for dataset, entries in groups.items():
                    gt = [(e.annotation.image_id, e.annotation.text) for e in entries]
                    values.append(100.0 * recognition_rate(gt, run, cfg.metric))
            if not values:
                raise MissingPredictions(f"arm {label!r}: no values for {variant!r}")
            row.append(_mean_std(values))
        row_labels.append(label)
        cells.append(row)

    return ExperimentReport(
        kind="ablation",
        row_labels=row_labels,
        col_labels=col_labels,
        cells=cells,
        metadata={"config_hash": config_hash(cfg.describe()), "spread": "sample stddev over (model, dataset) cells"},
    )


def run_reduced_data(
    cfg: ExperimentConfig, fractions: Sequence[float] | None = None
) -> ExperimentReport:
    """Grid of dataset-averaged recognition rates for training fractions.

    extra["runs"] maps model -> variant -> fraction (as str or float) ->
    prediction path; every configured (model, variant, fraction) must be
    present.
    """
    fractions = list(fractions if fractions is not None else cfg.extra.get("fractions", (1.0, 0.5, 0.25, 0.10, 0.05, 0.01)))
    runs_cfg = cfg.extra.get("runs", {})
    if not runs_cfg:
        raise MissingPredictions("no reduced-data runs configured")
    manifest = CorpusManifest.load(cfg.resolve(cfg.gt_manifest))
    groups = _test_groups(manifest, cfg)

    col_labels = [f"{round(f * 100)}%" for f in fractions]
    row_labels, cells = [], []
    for model, variants in runs_cfg.items():
        for variant, by_fraction in variants.items():
            row = []
            for f in fractions:
                path = by_fraction.get(str(f), by_fraction.get(f))
                if path is None:
                    raise MissingPredictions(
                        f"no run for model {model!r} at fraction {f}"
                    )
                run = load_prediction_run(cfg.resolve(path), model)
                rates = []
                for dataset, entries in groups.items():
                    gt = [(e.annotation.image_id, e.annotation.text) for e in entries]
                    rates.append(100.0 * recognition_rate(gt, run, cfg.metric))
                row.append(sum(rates) / len(rates))
            row_labels.append(f"{model} ({variant})")
            cells.append(row)

    return ExperimentReport(
        kind="reduced-data",
        row_labels=row_labels,
        col_labels=col_labels,
        cells=cells,
        metadata={"config_hash": config_hash(cfg.describe())},
    )


def speed_accuracy_export(
    runs: Sequence[PredictionRun], accuracy_report: ExperimentReport
) -> ExperimentReport:
    """Join each model's throughput with its report row average.

    Models without timing data are dropped with a warning; rows come out
    sorted by FPS, fastest first.
    """
    averages = dict(zip(accuracy_report.row_labels, accuracy_report.row_averages or ()))
    rows = []
    for run in runs:
        if run.model_id not in averages:
            log.warning("model %s absent from the accuracy report; skipped", run.model_id)
            continue
        try:
            rate = fps(run)
        except NoTimings:
            log.warning("model %s has no timings; skipped", run.model_id)
            continue
        rows.append((run.model_id, rate, averages[run.model_id]))
    rows.sort(key=lambda r: -r[1])
    return ExperimentReport(
        kind="speed-accuracy",
        row_labels=[r[0] for r in rows],
        col_labels=["FPS", "average accuracy"],
        cells=[[r[1], r[2]] for r in rows],
        metadata={"source": accuracy_report.kind},
    )


def _fmt_cell(cell: Cell) -> str:
    if cell is None:
        return "-"
    if isinstance(cell, tuple):
        return f"{fmt1(cell[0])} ± {fmt1(cell[1])}"
    return fmt1(cell)


def _cell_sort_value(cell: Cell) -> float | None:
    if cell is None:
        return None
    return cell[0] if isinstance(cell, tuple) else cell


def emit_report(report: ExperimentReport, format: str, out_path: str | Path) -> Path:
    """Serialize a report; bytes depend only on the report contents.

    markdown rounds to one decimal (halves away from zero) and bolds every
    per-column best value; csv and json keep raw values.
    """
    report.check_averages()
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    if format == "csv":
        _emit_csv(report, out_path)
    elif format == "markdown":
        _emit_markdown(report, out_path)
    elif format == "json":
        _emit_json(report, out_path)
    else:
        raise HarnessError(f"unknown report format {format!r}")
    return out_path


def _emit_csv(report: ExperimentReport, out_path: Path) -> None:
    tuple_cells = any(
        isinstance(c, tuple) for row in report.cells for c in row
    )
    with open(out_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if tuple_cells:
            header = ["row"]
            for col in report.col_labels:
                header += [f"{col} (mean)", f"{col} (std)"]
            writer.writerow(header)
            for label, row in zip(report.row_labels, report.cells):
                out = [label]
                for cell in row:
                    if cell is None:
                        out += ["", ""]
                    elif isinstance(cell, tuple):
                        out += [repr(cell[0]), repr(cell[1])]
                    else:
                        out += [repr(cell), ""]
                writer.writerow(out)
        else:
            header = ["row"] + list(report.col_labels)
            if report.row_averages is not None:
                header.append("average")
            writer.writerow(header)
            for i, (label, row) in enumerate(zip(report.row_labels, report.cells)):
                out = [label] + [("" if c is None else repr(c)) for c in row]
                if report.row_averages is not None:
                    out.append(repr(report.row_averages[i]))
                writer.writerow(out)


def _emit_markdown(report: ExperimentReport, out_path: Path) -> None:
    best_per_col: list[float | None] = []
    for j in range(len(report.col_labels)):
        vals = [
            _cell_sort_value(report.cells[i][j]) for i in range(len(report.row_labels))
        ]
        vals = [v for v in vals if v is not None]
        if not vals:
            best_per_col.append(None)
        else:
            best_per_col.append(max(vals) if report.higher_is_better else min(vals))

    lines = []
    header = [""] + list(report.col_labels)
    if report.row_averages is not None:
        header.append("Average")
    lines.append("| " + " | ".join(header) + " |")
    lines.append("|" + "---|" * len(header))
    best_avg = None
    if report.row_averages:
        best_avg = max(report.row_averages) if report.higher_is_better else min(report.row_averages)
    for i, label in enumerate(report.row_labels):
        parts = [label]
        for j, cell in enumerate(report.cells[i]):
            text = _fmt_cell(cell)
            value = _cell_sort_value(cell)
            # bold using displayed precision so every displayed tie is marked
            if (
                value is not None
                and best_per_col[j] is not None
                and fmt1(value) == fmt1(best_per_col[j])
            ):
                text = f"**{text}**"
            parts.append(text)
        if report.row_averages is not None:
            text = fmt1(report.row_averages[i])
            if best_avg is not None and fmt1(report.row_averages[i]) == fmt1(best_avg):
                text = f"**{text}**"
            parts.append(text)
        lines.append("| " + " | ".join(parts) + " |")
    out_path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_report(path: str | Path) -> ExperimentReport:
    """Read back a report emitted as json."""
    raw = json.loads(Path(path).read_text())
    cells = [
        [tuple(c) if isinstance(c, list) else c for c in row]
        for row in raw["cells"]
    ]
    return ExperimentReport(
        kind=raw["kind"],
        row_labels=list(raw["rows"]),
        col_labels=list(raw["columns"]),
        cells=cells,
        row_averages=raw.get("row_averages"),
        higher_is_better=raw.get("higher_is_better", True),
        metadata=raw.get("metadata", {}),
    )


def _emit_json(report: ExperimentReport, out_path: Path) -> None:
    payload = {
        "kind": report.kind,
        "rows": report.row_labels,
        "columns": report.col_labels,
        "cells": [
            [list(c) if isinstance(c, tuple) else c for c in row]
            for row in report.cells
        ],
        "row_averages": report.row_averages,
        "higher_is_better": report.higher_is_better,
        "metadata": report.metadata,
    }
    out_path.write_text(
        json.dumps(payload, sort_keys=True, indent=2, ensure_ascii=False) + "\n",
        encoding="utf-8",
    )
