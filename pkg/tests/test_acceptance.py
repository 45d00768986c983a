"""Acceptance suite: every exit criterion at its stated tolerance and
runtime budget. One summary line per criterion is printed at the end of
the pytest run."""

import hashlib
import json
import time
from pathlib import Path

import numpy as np
import pytest
from click.testing import CliRunner
from PIL import Image

from plateforge.cli import main as cli_main
from plateforge.corpus import (
    BUILTIN_LAYOUTS,
    SplitProtocol,
    SplitRule,
    apply_split,
    reduce_training_fraction,
)
from plateforge.ganprep import (
    GanCandidate,
    REFERENCE_ANCHORS,
    decode_mask,
    default_palette_keys,
    filter_top_n,
    generate_palette,
    render_mask,
    srgb_to_lab,
)
from plateforge.geometry import (
    BBox,
    Point,
    Quad,
    RectifiedFrame,
    homography_from_quads,
    iou,
    rect_target_frame,
    warp_image,
)
from plateforge.harness import ExperimentConfig, run_eval
from plateforge.metrics import detection_prf, lp_nme
from plateforge.synth_permute import (
    Infeasible,
    PermutationPolicy,
    apply_permutation,
    check_feasible,
    plan_permutations,
)
from plateforge.synth_template import (
    AugmentationConfig,
    builtin_specs,
    generate_template_corpus,
)
from plateforge.util import fmt1, write_jsonl

from helpers import (
    TRBA_CROSS_CELLS,
    TRBA_INTRA_CELLS,
    checkerboard,
    random_quad,
    write_rate_fixture,
)
from test_ganprep import random_mask_annotation
from test_metrics import brute_force_nme
from test_geometry import pixel_count_iou, random_int_box


class Budget:
    """Context asserting the block finished within its runtime budget."""

    def __init__(self, seconds: float):
        self.seconds = seconds

    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            elapsed = time.perf_counter() - self.start
            assert elapsed < self.seconds, (
                f"runtime {elapsed:.2f}s exceeded the {self.seconds}s budget"
            )


@pytest.mark.acceptance(1, "table-average reproduction (intra 97.9, cross 92.9)")
def test_criterion_1_table_averages(tmp_path):
    intra_manifest, intra_preds = write_rate_fixture(
        tmp_path / "intra", "TRBA", TRBA_INTRA_CELLS
    )
    cross_manifest, cross_preds = write_rate_fixture(
        tmp_path / "cross", "TRBA", TRBA_CROSS_CELLS
    )
    with Budget(1.0):
        report = run_eval(
            ExperimentConfig(
                kind="intra", gt_manifest=intra_manifest, models={"TRBA": str(intra_preds)}
            )
        )
        assert fmt1(report.row_averages[0]) == "97.9"

        report = run_eval(
            ExperimentConfig(
                kind="cross", gt_manifest=cross_manifest, models={"TRBA": str(cross_preds)}
            )
        )
        assert fmt1(report.row_averages[0]) == "92.9"


@pytest.mark.acceptance(2, "corner-error formula matches brute force within 1e-9")
def test_criterion_2_corner_error_oracle():
    with Budget(1.0):
        gt = Quad(Point(0, 0), Point(30, 0), Point(30, 40), Point(0, 40))
        pred = Quad.from_array(gt.to_array() + [3, 4])
        assert lp_nme(gt, pred) == 0.1

        rng = np.random.default_rng(101)
        for _ in range(1000):
            a, b = random_quad(rng), random_quad(rng)
            assert abs(lp_nme(a, b) - brute_force_nme(a, b)) < 1e-9


@pytest.mark.acceptance(3, "geometry suite: residuals, warp round trip, idempotence")
def test_criterion_3_geometry_suite():
    with Budget(10.0):
        rng = np.random.default_rng(103)
        for _ in range(100):
            src, dst = random_quad(rng), random_quad(rng)
            h = homography_from_quads(src, dst)
            assert np.abs(h.apply(src.to_array()) - dst.to_array()).max() < 1e-6

        img = checkerboard(256, 64)
        src = Quad(Point(0, 0), Point(255, 0), Point(255, 255), Point(0, 255))
        dst = Quad(Point(6, 4), Point(250, 9), Point(247, 252), Point(3, 249))
        h = homography_from_quads(src, dst)
        frame = RectifiedFrame(256, 256)
        back = warp_image(warp_image(img, h, frame), h.inverse(), frame)
        inner = slice(20, 236)
        assert np.abs(back[inner, inner].astype(float) - img[inner, inner]).mean() < 3.0

        for _ in range(100):
            frame = rect_target_frame(random_quad(rng))
            assert rect_target_frame(frame.target) == frame


@pytest.mark.acceptance(4, "IoU pixel-count oracle and detection P/R/F hand cases")
def test_criterion_4_iou_and_detection():
    with Budget(5.0):
        rng = np.random.default_rng(107)
        for _ in range(500):
            a, b = random_int_box(rng), random_int_box(rng)
            assert abs(iou(a, b) - pixel_count_iou(a, b)) < 1e-3

        gt = {"img": [BBox(0, 0, 100, 100)]}
        hit = {"img": [(BBox(0, 0, 100, 71), 0.9)]}
        assert iou(gt["img"][0], hit["img"][0][0]) == pytest.approx(0.71)
        assert detection_prf(gt, hit) == (1.0, 1.0, 1.0)

        spurious = {"img": [(BBox(0, 0, 100, 100), 0.9), (BBox(400, 400, 10, 10), 0.8)]}
        p, r, f = detection_prf(gt, spurious)
        assert (p, r) == (0.5, 1.0)
        assert f == pytest.approx(2 / 3)


def _tree_digest(root: Path) -> str:
    digest = hashlib.sha256()
    for path in sorted(root.rglob("*")):
        if path.is_file():
            digest.update(str(path.relative_to(root)).encode())
            digest.update(path.read_bytes())
    return digest.hexdigest()


@pytest.mark.acceptance(5, "template corpus: balance, per-slot counts, worker invariance")
def test_criterion_5_template_corpus(tmp_path):
    with Budget(120.0):
        specs, atlas = builtin_specs()
        cfg = AugmentationConfig(master_seed=55)
        run_a = generate_template_corpus(
            specs, 600, cfg, tmp_path / "a", atlas=atlas, workers=1
        )
        per_layout: dict[str, int] = {}
        slot_counts: dict[tuple[str, int, str], int] = {}
        for entry in run_a.entries:
            ann = entry.annotation
            per_layout[ann.layout] = per_layout.get(ann.layout, 0) + 1
            for idx, cls in enumerate(ann.text):
                key = (ann.layout, idx, cls)
                slot_counts[key] = slot_counts.get(key, 0) + 1
        assert per_layout == {layout: 100 for layout in BUILTIN_LAYOUTS}

        by_spec = {s.layout: s for s in specs}
        for layout, spec in by_spec.items():
            for idx, slot in enumerate(spec.slots):
                counts = [slot_counts.get((layout, idx, c), 0) for c in slot.alphabet]
                assert max(counts) - min(counts) <= 1, (layout, idx)

        generate_template_corpus(specs, 600, cfg, tmp_path / "b", atlas=atlas, workers=8)
        assert _tree_digest(tmp_path / "a") == _tree_digest(tmp_path / "b")


@pytest.mark.acceptance(6, "permutation locality, same-kind soundness, overlap rejection")
def test_criterion_6_permutation(tmp_path):
    with Budget(60.0):
        specs, atlas = builtin_specs()
        corpus = generate_template_corpus(
            specs, 24, AugmentationConfig.none(master_seed=66), tmp_path / "src",
            atlas=atlas,
        )
        policy = PermutationPolicy(max_variants=8)
        class_counts: dict[str, int] = {}
        for e in corpus.entries:
            for ch in e.annotation.text:
                class_counts[ch] = class_counts.get(ch, 0) + 1

        checked = 0
        for k, entry in enumerate(corpus.entries):
            if checked >= 100:
                break
            ann = entry.annotation
            img = np.asarray(
                Image.open(tmp_path / "src" / "images" / f"{ann.image_id}.png")
            )
            plans = plan_permutations(ann, policy, class_counts, seed=660 + k)
            for plan in plans:
                if checked >= 100:
                    break
                out, new_ann = apply_permutation(img, ann, plan)
                mask = np.ones(img.shape[:2], dtype=bool)
                for cb in new_ann.char_boxes:
                    mask[int(cb.box.y): int(cb.box.y2), int(cb.box.x): int(cb.box.x2)] = False
                assert np.array_equal(out[mask], img[mask])
                for old, new in zip(ann.text, new_ann.text):
                    assert (old.isdigit(), old.isalpha(), old == "*") == (
                        new.isdigit(), new.isalpha(), new == "*",
                    )
                checked += 1
        assert checked == 100

        from plateforge.corpus import CharBox

        tight = []
        x = 10
        for i, c in enumerate("AB12"):
            w = 10 if i % 2 == 0 else 24
            tight.append(CharBox(BBox(x, 10, w, 30), c))
            x += w + 3
        assert check_feasible(tight) is False
        from test_synth_permute import plate_ann

        bad = plate_ann("AB1234", gap=2, widths=[12, 30, 12, 30, 12, 30])
        with pytest.raises(Infeasible):
            plan_permutations(bad, policy, {}, seed=1)


@pytest.mark.acceptance(7, "mask round trip, palette invariants, pinned anchors")
def test_criterion_7_masks_and_palette():
    with Budget(30.0):
        palette = generate_palette(
            default_palette_keys(BUILTIN_LAYOUTS), seed=77, black_exclusion_dist=20.0,
            overrides=REFERENCE_ANCHORS,
        )
        assert palette.colors["0"] == (228, 28, 26)
        assert palette.colors["A"] == (126, 47, 0)
        assert palette.colors["mercosur"] == (187, 0, 170)
        assert palette.colors["chinese"] == (127, 127, 127)

        colors = list(palette.colors.values())
        assert len(set(colors)) == len(colors)
        labs = srgb_to_lab(np.array(colors))
        assert np.linalg.norm(labs - srgb_to_lab(np.array([0, 0, 0])), axis=1).min() >= 20.0
        pairwise = np.linalg.norm(labs[:, None] - labs[None, :], axis=2)
        np.fill_diagonal(pairwise, np.inf)
        assert pairwise.min() >= palette.min_pairwise_dist - 1e-9
        assert palette.min_pairwise_dist > 0

        rng = np.random.default_rng(770)
        for trial in range(200):
            ann = random_mask_annotation(rng, rows=1 if trial % 3 else 2)
            layout, boxes = decode_mask(render_mask(ann, palette), palette)
            assert layout == ann.layout
            assert "".join(cb.cls for cb in boxes) == ann.text
            for got, want in zip(boxes, ann.char_boxes):
                assert abs(got.box.x - want.box.x) <= 1
                assert abs(got.box.y - want.box.y) <= 1
                assert abs(got.box.w - want.box.w) <= 1
                assert abs(got.box.h - want.box.h) <= 1


@pytest.mark.acceptance(8, "top-N filter equals oracle prefix at production scale")
def test_criterion_8_top_n_filter():
    with Budget(30.0):
        rng = np.random.default_rng(880)
        per_layout = 200_000
        candidates = []
        for layout in BUILTIN_LAYOUTS:
            conf = rng.random(per_layout)
            candidates.extend(
                GanCandidate(f"{layout}_{i:07d}", layout, "ABC1234", "ABC1234", float(c))
                for i, c in enumerate(conf)
            )
        assert len(candidates) == 1_200_000

        selected = filter_top_n(candidates, 50_000)
        assert len(selected) == 300_000

        # oracle: per layout, the 50k highest-confidence ids (total order)
        for layout in BUILTIN_LAYOUTS:
            pool = [c for c in candidates if c.layout == layout]
            pool.sort(key=lambda c: (-c.confidence, c.image_id))
            expected_ids = [c.image_id for c in pool[:50_000]]
            got_ids = [c.image_id for c in selected if c.layout == layout]
            assert got_ids == expected_ids

        # invariance to input order on a manageable slice
        small = candidates[::97]
        shuffled = list(small)
        rng.shuffle(shuffled)
        assert filter_top_n(small, 1000) == filter_top_n(shuffled, 1000)


@pytest.mark.acceptance(9, "split counts, disjoint/exhaustive, nested subsampling")
def test_criterion_9_splits():
    with Budget(1.0):
        from test_corpus import make_anns, manifest_with_train

        anns = make_anns("caltech", 126) + make_anns("englishlp", 509)
        protocol = SplitProtocol({
            "caltech": SplitRule("fraction", {"test": 0.365}, seed=9),
            "englishlp": SplitRule("fraction", {"test": 0.2}, seed=9),
        })
        manifest = apply_split(anns, protocol)
        assert len(manifest.subset(split="test", dataset_id="caltech")) == 46
        assert len(manifest.subset(split="test", dataset_id="englishlp")) == 102

        seen = {}
        for e in manifest.entries:
            key = (e.annotation.dataset_id, e.annotation.image_id)
            assert key not in seen
            seen[key] = e.split
        assert len(seen) == 126 + 509

        big = manifest_with_train({"a": 400, "b": 160})
        kept = {
            f: {e.annotation.image_id for e in reduce_training_fraction(big, f, seed=5).subset(split="train").entries}
            for f in (0.5, 0.25, 0.10)
        }
        assert kept[0.10] <= kept[0.25] <= kept[0.5]
        assert len(kept[0.5]) == 280


def _run_pipeline(workdir: Path, runner: CliRunner) -> None:
    workdir.mkdir(parents=True, exist_ok=True)
    tpl = workdir / "templates"
    res = runner.invoke(cli_main, [
        "--seed", "11", "gen-templates", "--total", "600", "--out", str(tpl),
    ], catch_exceptions=False)
    assert res.exit_code == 0, res.output

    perm = workdir / "permuted"
    res = runner.invoke(cli_main, [
        "--seed", "11", "gen-permute", "--manifest", str(tpl / "manifest.jsonl"),
        "--images", str(tpl / "images"), "--total", "60", "--out", str(perm),
    ], catch_exceptions=False)
    assert res.exit_code == 0, res.output

    palette = workdir / "palette.json"
    masks = workdir / "masks"
    res = runner.invoke(cli_main, [
        "--seed", "11", "gen-masks", "--palette", str(palette),
        "--total", "60", "--out", str(masks),
    ], catch_exceptions=False)
    assert res.exit_code == 0, res.output

    pairs = workdir / "pairs"
    res = runner.invoke(cli_main, [
        "export-pairs", "--manifest", str(perm / "manifest.jsonl"),
        "--images", str(perm / "images"), "--palette", str(palette),
        "--out", str(pairs),
    ], catch_exceptions=False)
    assert res.exit_code == 0, res.output

    cands = workdir / "candidates.jsonl"
    write_jsonl(cands, (
        {"image_id": f"{layout}_{i:05d}", "layout": layout,
         "intended_text": "ABC1234", "ocr_text": "ABC1234" if i % 7 else "ABC1230",
         "confidence": ((i * 2654435761) % 1000) / 999.0}
        for layout in BUILTIN_LAYOUTS for i in range(40)
    ))
    res = runner.invoke(cli_main, [
        "filter-gan", "--predictions", str(cands), "--n", "20",
        "--out", str(workdir / "selected.jsonl"),
    ], catch_exceptions=False)
    assert res.exit_code == 0, res.output

    fixture_dir = workdir / "fixtures"
    manifest, preds = write_rate_fixture(fixture_dir, "TRBA", TRBA_INTRA_CELLS)
    eval_cfg = workdir / "eval.json"
    # paths relative to the config file keep the report hash run-independent
    eval_cfg.write_text(json.dumps({
        "kind": "intra",
        "gt_manifest": str(manifest.relative_to(workdir)),
        "models": {"TRBA": str(preds.relative_to(workdir))},
    }, sort_keys=True))
    res = runner.invoke(cli_main, [
        "eval", "--config", str(eval_cfg), "--format", "json",
        "--out", str(workdir / "report.json"),
    ], catch_exceptions=False)
    assert res.exit_code == 0, res.output
    res = runner.invoke(cli_main, [
        "report", "--report", str(workdir / "report.json"), "--format", "markdown",
        "--out", str(workdir / "report.md"),
    ], catch_exceptions=False)
    assert res.exit_code == 0, res.output


@pytest.mark.acceptance(10, "end-to-end pipeline runs twice with identical bytes")
def test_criterion_10_end_to_end(tmp_path):
    with Budget(300.0):
        runner = CliRunner()
        _run_pipeline(tmp_path / "run1", runner)
        _run_pipeline(tmp_path / "run2", runner)
        d1 = _tree_digest(tmp_path / "run1")
        d2 = _tree_digest(tmp_path / "run2")
        assert d1 == d2

        report = (tmp_path / "run1" / "report.md").read_text()
        assert "**97.9**" in report
