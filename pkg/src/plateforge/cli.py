"""Command-line entry points for corpus generation and evaluation."""

from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click
import numpy as np
from PIL import Image

from . import __version__
from .corpus import (
    CorpusManifest,
    SplitProtocol,
    load_annotations,
    save_annotations,
)
from .ganprep import (
    ClassPalette,
    REFERENCE_ANCHORS,
    default_palette_keys,
    export_pairs,
    filter_top_n,
    generate_palette,
    load_candidates,
    sample_generation_masks,
)
from .geometry import rectify
from .harness import (
    ExperimentConfig,
    emit_report,
    load_report,
    run_ablation,
    run_eval,
    run_reduced_data,
    speed_accuracy_export,
)
from .metrics import load_prediction_run
from .synth_permute import PermutationPolicy, generate_permuted_corpus
from .synth_template import (
    AugmentationConfig,
    builtin_specs,
    generate_template_corpus,
    load_specs,
)

log = logging.getLogger("plateforge")


@click.group()
@click.version_option(__version__)
@click.option("--seed", type=int, default=0, show_default=True, help="Master seed.")
@click.option("--workers", type=int, default=1, show_default=True, help="Parallel workers.")
@click.option(
    "--config",
    "config_path",
    type=click.Path(exists=True, dir_okay=False),
    default=None,
    help="JSON file with shared defaults (augmentation, palette).",
)
@click.option("-v", "--verbose", is_flag=True, help="Debug logging.")
@click.pass_context
def main(ctx, seed, workers, config_path, verbose):
    """Synthetic license-plate corpora and recognition benchmarking."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    shared = {}
    if config_path:
        shared = json.loads(Path(config_path).read_text())
    ctx.obj = {"seed": seed, "workers": workers, "shared": shared}


def _augmentation(ctx, seed) -> AugmentationConfig:
    raw = dict(ctx.obj["shared"].get("augmentation", {}))
    raw.setdefault("master_seed", seed)
    return AugmentationConfig.from_dict(raw)


def _specs_and_atlas(specs_dir):
    if specs_dir is None:
        return builtin_specs()
    return load_specs(specs_dir)


@main.command()
@click.option("--annotations", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--protocol", "protocol_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path())
def split(annotations, protocol_path, out):
    """Partition annotations into train/val/test per a protocol file."""
    anns = load_annotations(annotations)
    protocol = SplitProtocol.from_config(
        json.loads(Path(protocol_path).read_text()), base_dir=Path(protocol_path).parent
    )
    from .corpus import apply_split

    manifest = apply_split(anns, protocol)
    manifest.save(out)
    counts = {}
    for e in manifest.entries:
        counts[e.split] = counts.get(e.split, 0) + 1
    click.echo(f"wrote {len(manifest)} entries to {out} ({counts})")


@main.command("gen-templates")
@click.option("--specs", "specs_dir", type=click.Path(exists=True, file_okay=False), default=None,
              help="Layout asset directory; omit for the built-in layouts.")
@click.option("--total", required=True, type=int)
@click.option("--seed", type=int, default=None, help="Override the global seed.")
@click.option("--out", required=True, type=click.Path())
@click.pass_context
def gen_templates(ctx, specs_dir, total, seed, out):
    """Render an augmented template-plate corpus."""
    seed = ctx.obj["seed"] if seed is None else seed
    specs, atlas = _specs_and_atlas(specs_dir)
    cfg = _augmentation(ctx, seed)
    manifest = generate_template_corpus(
        specs, total, cfg, out, atlas=atlas, workers=ctx.obj["workers"]
    )
    click.echo(f"wrote {len(manifest)} template plates to {out}")


@main.command("gen-permute")
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--images", "images_root", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--policy", type=click.Choice(["same-kind", "cross-kind"]), default="same-kind",
              show_default=True)
@click.option("--max-variants", type=int, default=8, show_default=True)
@click.option("--total", required=True, type=int)
@click.option("--seed", type=int, default=None)
@click.option("--out", required=True, type=click.Path())
@click.pass_context
def gen_permute(ctx, manifest_path, images_root, policy, max_variants, total, seed, out):
    """Generate plates by permuting character patches within each plate."""
    seed = ctx.obj["seed"] if seed is None else seed
    manifest = CorpusManifest.load(manifest_path)
    result = generate_permuted_corpus(
        manifest,
        PermutationPolicy(mode=policy, max_variants=max_variants),
        total,
        out,
        images_root=images_root,
        seed=seed,
        workers=ctx.obj["workers"],
    )
    click.echo(f"wrote {len(result)} permuted plates to {out}")


def _load_or_create_palette(palette_path, layouts, seed) -> ClassPalette:
    path = Path(palette_path)
    if path.exists():
        return ClassPalette.from_dict(json.loads(path.read_text()))
    palette = generate_palette(
        default_palette_keys(layouts), seed=seed, overrides=REFERENCE_ANCHORS
    )
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(palette.to_dict(), sort_keys=True, indent=2) + "\n")
    log.info("wrote palette with %d classes to %s", len(palette.colors), path)
    return palette


@main.command("gen-masks")
@click.option("--specs", "specs_dir", type=click.Path(exists=True, file_okay=False), default=None)
@click.option("--palette", "palette_path", required=True, type=click.Path(),
              help="Palette json; created (with pinned anchors) when absent.")
@click.option("--total", required=True, type=int)
@click.option("--seed", type=int, default=None)
@click.option("--canvas", type=(int, int), default=(256, 256), show_default=True)
@click.option("--out", required=True, type=click.Path())
@click.pass_context
def gen_masks(ctx, specs_dir, palette_path, total, seed, canvas, out):
    """Sample class-balanced segmentation masks for plate generation."""
    seed = ctx.obj["seed"] if seed is None else seed
    specs, _atlas = _specs_and_atlas(specs_dir)
    layouts = list(dict.fromkeys(s.layout for s in specs))
    palette = _load_or_create_palette(palette_path, layouts, seed)
    n = sample_generation_masks(specs, palette, total, seed, out, canvas=canvas)
    click.echo(f"wrote {n} masks to {out}")


@main.command("export-pairs")
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--images", "images_root", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--palette", "palette_path", required=True, type=click.Path())
@click.option("--half-size", type=(int, int), default=(256, 256), show_default=True)
@click.option("--out", required=True, type=click.Path())
@click.pass_context
def export_pairs_cmd(ctx, manifest_path, images_root, palette_path, half_size, out):
    """Write side-by-side AB pairs (mask | gray-background target)."""
    manifest = CorpusManifest.load(manifest_path)
    layouts = list(dict.fromkeys(e.annotation.layout for e in manifest.entries))
    palette = _load_or_create_palette(palette_path, layouts, ctx.obj["seed"])
    n = export_pairs(
        manifest, palette, out, images_root=images_root, half_size=half_size
    )
    click.echo(f"wrote {n} AB pairs to {out}")


@main.command("filter-gan")
@click.option("--predictions", required=True, type=click.Path(exists=True, dir_okay=False),
              help="Candidate JSONL: image_id, layout, intended_text, ocr_text, confidence.")
@click.option("--n", "n_per_layout", required=True, type=int)
@click.option("--text-match/--no-text-match", default=True, show_default=True)
@click.option("--out", required=True, type=click.Path())
def filter_gan(predictions, n_per_layout, text_match, out):
    """Keep the top-N generated plates per layout by recognizer confidence."""
    candidates = load_candidates(predictions)
    selected = filter_top_n(candidates, n_per_layout, require_text_match=text_match)
    from .util import write_jsonl

    write_jsonl(
        out,
        (
            {
                "image_id": c.image_id,
                "layout": c.layout,
                "intended_text": c.intended_text,
                "ocr_text": c.ocr_text,
                "confidence": c.confidence,
            }
            for c in selected
        ),
    )
    click.echo(f"kept {len(selected)} of {len(candidates)} candidates -> {out}")


@main.command("rectify")
@click.option("--annotations", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--images", "images_root", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", required=True, type=click.Path())
def rectify_cmd(annotations, images_root, out):
    """Warp each annotated plate quad to a frontal axis-aligned crop."""
    from .synth_permute import _resolve_image

    anns = load_annotations(annotations)
    out_dir = Path(out)
    crop_dir = out_dir / "rectified"
    crop_dir.mkdir(parents=True, exist_ok=True)
    rectified_anns = []
    for ann in anns:
        img = np.asarray(Image.open(_resolve_image(Path(images_root), ann.image_id)).convert("RGB"))
        crop, frame = rectify(img, ann.corners)
        Image.fromarray(crop).save(crop_dir / f"{ann.image_id}.png")
        from dataclasses import replace

        rectified_anns.append(
            replace(
                ann,
                corners=frame.target,
                char_boxes=None,
                image_size=(frame.width, frame.height),
            )
        )
    save_annotations(out_dir / "annotations.jsonl", rectified_anns)
    click.echo(f"rectified {len(rectified_anns)} plates into {crop_dir}")


def _emit(report, format, out):
    path = emit_report(report, format, out)
    click.echo(f"wrote {report.kind} report to {path}")


@main.command("eval")
@click.option("--config", "eval_config", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--format", "fmt", type=click.Choice(["csv", "markdown", "json"]), default="json",
              show_default=True)
@click.option("--out", required=True, type=click.Path())
def eval_cmd(eval_config, fmt, out):
    """Evaluate prediction runs into an intra/cross/detection/corner table."""
    cfg = ExperimentConfig.from_file(eval_config)
    _emit(run_eval(cfg), fmt, out)


@main.command("ablation")
@click.option("--config", "eval_config", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--format", "fmt", type=click.Choice(["csv", "markdown", "json"]), default="json",
              show_default=True)
@click.option("--out", required=True, type=click.Path())
def ablation_cmd(eval_config, fmt, out):
    """Mean +/- stddev rows per training-set composition arm."""
    cfg = ExperimentConfig.from_file(eval_config)
    _emit(run_ablation(cfg), fmt, out)


@main.command("reduced-data")
@click.option("--config", "eval_config", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--format", "fmt", type=click.Choice(["csv", "markdown", "json"]), default="json",
              show_default=True)
@click.option("--out", required=True, type=click.Path())
def reduced_data_cmd(eval_config, fmt, out):
    """Recognition-rate grid over training-set fractions."""
    cfg = ExperimentConfig.from_file(eval_config)
    _emit(run_reduced_data(cfg), fmt, out)


@main.command("report")
@click.option("--report", "report_path", required=True, type=click.Path(exists=True, dir_okay=False),
              help="A report previously emitted as json.")
@click.option("--format", "fmt", type=click.Choice(["csv", "markdown", "json"]), default="markdown",
              show_default=True)
@click.option("--out", required=True, type=click.Path())
@click.option("--speed-from", "runs_dir", type=click.Path(exists=True, file_okay=False), default=None,
              help="Directory of prediction runs with timings; joins FPS with row averages.")
def report_cmd(report_path, fmt, out, runs_dir):
    """Re-emit a saved report, optionally joining model throughput."""
    report = load_report(report_path)
    if runs_dir:
        runs = [
            load_prediction_run(p) for p in sorted(Path(runs_dir).glob("*.jsonl"))
        ]
        report = speed_accuracy_export(runs, report)
    _emit(report, fmt, out)


if __name__ == "__main__":
    main()
