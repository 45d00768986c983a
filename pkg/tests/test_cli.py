import json

import pytest
from click.testing import CliRunner

from plateforge.cli import main
from plateforge.corpus import CorpusManifest, load_annotations, save_annotations
from plateforge.util import write_jsonl

from helpers import TRBA_INTRA_CELLS, write_rate_fixture
from test_corpus import make_anns


@pytest.fixture()
def runner():
    return CliRunner()


def invoke(runner, args):
    result = runner.invoke(main, args, catch_exceptions=False)
    assert result.exit_code == 0, result.output
    return result


class TestSplitCommand:
    def test_split(self, runner, tmp_path):
        ann_path = tmp_path / "anns.jsonl"
        save_annotations(ann_path, make_anns("caltech", 126))
        protocol = tmp_path / "protocol.json"
        protocol.write_text(json.dumps({
            "caltech": {"protocol": "fraction", "params": {"test": 0.365}, "seed": 1}
        }))
        out = tmp_path / "manifest.jsonl"
        result = invoke(runner, ["split", "--annotations", str(ann_path),
                                 "--protocol", str(protocol), "--out", str(out)])
        manifest = CorpusManifest.load(out)
        assert len(manifest.subset(split="test")) == 46
        assert "126 entries" in result.output


class TestGenerationCommands:
    def test_template_permute_chain(self, runner, tmp_path):
        tpl = tmp_path / "tpl"
        invoke(runner, ["--seed", "9", "gen-templates", "--total", "12", "--out", str(tpl)])
        assert len(list((tpl / "images").glob("*.png"))) == 12

        perm = tmp_path / "perm"
        invoke(runner, [
            "--seed", "9", "gen-permute",
            "--manifest", str(tpl / "manifest.jsonl"),
            "--images", str(tpl / "images"),
            "--total", "6", "--out", str(perm),
        ])
        manifest = CorpusManifest.load(perm / "manifest.jsonl")
        assert len(manifest) == 6
        assert all(e.source == "permuted" for e in manifest.entries)

    def test_masks_and_pairs(self, runner, tmp_path):
        tpl = tmp_path / "tpl"
        invoke(runner, ["gen-templates", "--total", "6", "--out", str(tpl)])
        palette = tmp_path / "palette.json"
        masks = tmp_path / "masks"
        invoke(runner, ["gen-masks", "--palette", str(palette),
                        "--total", "6", "--out", str(masks)])
        assert palette.exists()
        assert len(list((masks / "masks").glob("*.png"))) == 6

        pairs = tmp_path / "pairs"
        invoke(runner, ["export-pairs", "--manifest", str(tpl / "manifest.jsonl"),
                        "--images", str(tpl / "images"), "--palette", str(palette),
                        "--out", str(pairs)])
        assert len(list((pairs / "ab").glob("*.png"))) == 6

    def test_filter_gan(self, runner, tmp_path):
        cands = tmp_path / "cands.jsonl"
        write_jsonl(cands, (
            {"image_id": f"i{k}", "layout": "brazilian", "intended_text": "ABC1234",
             "ocr_text": "ABC1234", "confidence": k / 10}
            for k in range(8)
        ))
        out = tmp_path / "selected.jsonl"
        result = invoke(runner, ["filter-gan", "--predictions", str(cands),
                                 "--n", "3", "--out", str(out)])
        assert "kept 3 of 8" in result.output
        rows = [json.loads(line) for line in out.read_text().splitlines()]
        assert [r["image_id"] for r in rows] == ["i7", "i6", "i5"]

    def test_rectify(self, runner, tmp_path):
        tpl = tmp_path / "tpl"
        invoke(runner, ["gen-templates", "--total", "6", "--out", str(tpl)])
        out = tmp_path / "rect"
        invoke(runner, ["rectify", "--annotations", str(tpl / "annotations.jsonl"),
                        "--images", str(tpl / "images"), "--out", str(out)])
        assert len(list((out / "rectified").glob("*.png"))) == 6
        rect_anns = load_annotations(out / "annotations.jsonl")
        for ann in rect_anns:
            pts = ann.corners.to_array()
            assert pts[0].tolist() == [0, 0]


class TestEvalCommands:
    def test_eval_and_report(self, runner, tmp_path):
        manifest, preds = write_rate_fixture(tmp_path, "TRBA", TRBA_INTRA_CELLS)
        cfg = tmp_path / "eval.json"
        cfg.write_text(json.dumps({
            "kind": "intra",
            "gt_manifest": str(manifest),
            "models": {"TRBA": str(preds)},
        }))
        out_json = tmp_path / "report.json"
        invoke(runner, ["eval", "--config", str(cfg), "--out", str(out_json)])
        payload = json.loads(out_json.read_text())
        assert payload["rows"] == ["TRBA"]

        out_md = tmp_path / "report.md"
        invoke(runner, ["report", "--report", str(out_json), "--format", "markdown",
                        "--out", str(out_md)])
        assert "97.9" in out_md.read_text()

    def test_help_lists_subcommands(self, runner):
        result = invoke(runner, ["--help"])
        for name in ("split", "gen-templates", "gen-permute", "gen-masks",
                     "export-pairs", "filter-gan", "rectify", "eval", "ablation",
                     "reduced-data", "report"):
            assert name in result.output
