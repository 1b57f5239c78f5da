import json
import shutil
import subprocess
from pathlib import Path

import pytest

from embexport.datasets import DatasetLayoutError, parse_dataset
from embexport.export import ExportJob, export

from conftest import build_generic_dataset, criterion, make_image
from test_formats import read_embedding_file

ENGINE = shutil.which("cirtrain")

needs_engine = pytest.mark.skipif(ENGINE is None, reason="engine CLI not on PATH")


def run_export(dataset, out, **overrides):
    job = ExportJob(dataset_root=dataset, out_dir=out, **overrides)
    return export(job)


class TestGenericExport:
    def test_counts_and_files(self, generic_dataset, tmp_path):
        out = tmp_path / "out"
        report = run_export(generic_dataset, out, engine_command=None)
        assert report.corpus_count == 10
        assert report.query_count == 2
        assert report.annotation_count == 2
        assert report.dim == 256
        for name in ("corpus.emb", "query_img.emb", "query_txt.emb",
                     "manifest.jsonl", "report.json"):
            assert (out / name).exists()
        ids, values = read_embedding_file(out / "corpus.emb")
        assert len(ids) == 10
        assert values.shape == (10, 256)
        saved = json.loads((out / "report.json").read_text())
        assert saved["corpus_count"] == 10
        assert saved["query_count"] == 2

    def test_manifest_contents(self, generic_dataset, tmp_path):
        out = tmp_path / "out"
        run_export(generic_dataset, out, engine_command=None)
        lines = [json.loads(l) for l in (out / "manifest.jsonl").read_text().splitlines()]
        assert lines[0]["target_id"] == "img01"
        assert lines[1]["subset_ids"] == ["img03", "img04", "img05"]
        ref_ids, _ = read_embedding_file(out / "query_img.emb")
        assert ref_ids == ["q0-ref", "q1-ref"]

    def test_missing_image_excludes_query(self, tmp_path):
        dataset = build_generic_dataset(
            tmp_path / "toy",
            annotations=[
                {"query_id": "good", "ref_image": "img00", "text": "t",
                 "target_image": "img01"},
                {"query_id": "bad", "ref_image": "img-nope", "text": "t",
                 "target_image": "img01"},
            ],
        )
        report = run_export(dataset, tmp_path / "out", engine_command=None)
        assert report.query_count == 1
        assert report.annotation_count == 2
        assert [e["query_id"] for e in report.excluded_queries] == ["bad"]

    def test_missing_target_excludes_query(self, tmp_path):
        dataset = build_generic_dataset(
            tmp_path / "toy",
            annotations=[
                {"query_id": "bad", "ref_image": "img00", "text": "t",
                 "target_image": "ghost"},
                {"query_id": "good", "ref_image": "img00", "text": "t",
                 "target_image": "img02"},
            ],
        )
        report = run_export(dataset, tmp_path / "out", engine_command=None)
        assert report.query_count == 1
        assert report.excluded_queries[0]["reason"].startswith("target")

    def test_unreadable_image_skipped(self, tmp_path):
        dataset = build_generic_dataset(tmp_path / "toy")
        (dataset / "images" / "img05.png").write_bytes(b"this is not a png")
        report = run_export(dataset, tmp_path / "out", engine_command=None)
        assert report.corpus_count == 9
        assert any(s["image"] == "img05" for s in report.skipped_images)

    def test_unreadable_target_excludes_query(self, tmp_path):
        dataset = build_generic_dataset(
            tmp_path / "toy",
            annotations=[
                {"query_id": "q", "ref_image": "img00", "text": "t",
                 "target_image": "img05"},
            ],
        )
        (dataset / "images" / "img05.png").write_bytes(b"junk")
        report = run_export(dataset, tmp_path / "out", engine_command=None)
        assert report.query_count == 0
        assert report.excluded_queries[0]["query_id"] == "q"

    def test_reexport_is_byte_identical(self, generic_dataset, tmp_path):
        out1, out2 = tmp_path / "o1", tmp_path / "o2"
        run_export(generic_dataset, out1, engine_command=None)
        run_export(generic_dataset, out2, engine_command=None)
        for name in ("corpus.emb", "query_img.emb", "query_txt.emb",
                     "manifest.jsonl", "report.json"):
            assert (out1 / name).read_bytes() == (out2 / name).read_bytes(), name

    def test_query_count_identity(self, generic_dataset, tmp_path):
        report = run_export(generic_dataset, tmp_path / "out", engine_command=None)
        assert report.query_count == report.annotation_count - len(report.excluded_queries)

    @needs_engine
    def test_engine_validation_runs(self, generic_dataset, tmp_path):
        report = run_export(generic_dataset, tmp_path / "out", engine_command="auto")
        assert report.validation["mode"] == "engine-cli"
        assert report.validation["ok"] is True

    def test_missing_layout_raises(self, tmp_path):
        with pytest.raises(DatasetLayoutError):
            run_export(tmp_path / "nothing", tmp_path / "out", engine_command=None)


def build_fashioniq_dataset(root: Path):
    images = root / "images"
    names = [f"B{i:05d}" for i in range(6)]
    for i, name in enumerate(names):
        make_image(images / f"{name}.png", (40 * i % 255, 90, 200 - 30 * i))
    (root / "image_splits").mkdir(parents=True)
    (root / "image_splits" / "split.shirt.val.json").write_text(json.dumps(names))
    (root / "captions").mkdir()
    (root / "captions" / "cap.shirt.val.json").write_text(
        json.dumps(
            [
                {"candidate": "B00000", "target": "B00001",
                 "captions": ["is blue", "has short sleeves"]},
                {"candidate": "B00002", "target": "B00003",
                 "captions": ["darker", "no stripes"]},
            ]
        )
    )
    return root


class TestFashionIqFlavor:
    def test_parse_and_export(self, tmp_path):
        dataset = build_fashioniq_dataset(tmp_path / "fiq")
        corpus, annotations = parse_dataset(dataset, "fashioniq", split="val")
        assert len(corpus) == 6
        assert annotations[0]["text"] == "is blue [SEP] has short sleeves"
        report = run_export(
            dataset, tmp_path / "out", flavor="fashioniq", split="val",
            engine_command=None,
        )
        assert report.corpus_count == 6
        assert report.query_count == 2

    def test_category_filter(self, tmp_path):
        dataset = build_fashioniq_dataset(tmp_path / "fiq")
        corpus, annotations = parse_dataset(
            dataset, "fashioniq", split="val", category="shirt"
        )
        assert len(annotations) == 2
        with pytest.raises(DatasetLayoutError):
            parse_dataset(dataset, "fashioniq", split="train")

    def test_custom_separator(self, tmp_path):
        dataset = build_fashioniq_dataset(tmp_path / "fiq")
        _, annotations = parse_dataset(
            dataset, "fashioniq", split="val", separator=" and "
        )
        assert annotations[0]["text"] == "is blue and has short sleeves"


def build_cirr_dataset(root: Path):
    images = root / "img_raw"
    names = [f"dev-{i}" for i in range(5)]
    mapping = {}
    for i, name in enumerate(names):
        rel = f"img_raw/{name}.png"
        make_image(root / rel, (20 + 40 * i, 130, 220 - 35 * i))
        mapping[name] = rel
    (root / "image_splits").mkdir(parents=True)
    (root / "image_splits" / "split.rc2.val.json").write_text(json.dumps(mapping))
    (root / "captions").mkdir()
    (root / "captions" / "cap.rc2.val.json").write_text(
        json.dumps(
            [
                {"pairid": "p0", "reference": "dev-0", "target_hard": "dev-1",
                 "caption": "add a stripe",
                 "img_set": {"members": ["dev-1", "dev-2", "dev-3"]}},
            ]
        )
    )
    return root


class TestCirrFlavor:
    def test_parse_and_export_with_subsets(self, tmp_path):
        dataset = build_cirr_dataset(tmp_path / "cirr")
        report = run_export(
            dataset, tmp_path / "out", flavor="cirr", split="val", engine_command=None
        )
        assert report.corpus_count == 5
        assert report.query_count == 1
        manifest = [
            json.loads(l) for l in (tmp_path / "out" / "manifest.jsonl").read_text().splitlines()
        ]
        assert manifest[0]["subset_ids"] == ["dev-1", "dev-2", "dev-3"]


class TestCli:
    def test_cli_end_to_end(self, generic_dataset, tmp_path):
        out = tmp_path / "out"
        proc = subprocess.run(
            ["embexport", "--dataset-root", str(generic_dataset), "--out", str(out),
             "--engine-cmd", "none"],
            capture_output=True, text=True,
        )
        assert proc.returncode == 0, proc.stderr
        report = json.loads(proc.stdout.strip().splitlines()[-1])
        assert report["corpus_count"] == 10

    def test_cli_bad_root_exits_nonzero(self, tmp_path):
        proc = subprocess.run(
            ["embexport", "--dataset-root", str(tmp_path / "missing"),
             "--out", str(tmp_path / "o")],
            capture_output=True, text=True,
        )
        assert proc.returncode == 1
        json.loads(proc.stderr.strip())


@needs_engine
def test_criterion_10_exporter_round_trip(tmp_path):
    """Toy 10-image export: validate exit 0, report matches, re-export identical."""
    with criterion(10, "exporter round-trip on a 10-image toy dataset") as info:
        dataset = build_generic_dataset(tmp_path / "toy")
        out1, out2 = tmp_path / "o1", tmp_path / "o2"
        report = export(ExportJob(dataset_root=dataset, out_dir=out1, engine_command="auto"))
        assert report.validation["mode"] == "engine-cli"
        assert report.validation["ok"] is True

        proc = subprocess.run(
            [ENGINE, "validate",
             "--manifest", str(out1 / "manifest.jsonl"),
             "--corpus", str(out1 / "corpus.emb"),
             "--query-img", str(out1 / "query_img.emb"),
             "--query-txt", str(out1 / "query_txt.emb")],
            capture_output=True, text=True,
        )
        assert proc.returncode == 0

        ids, values = read_embedding_file(out1 / "corpus.emb")
        assert len(ids) == report.corpus_count == 10
        assert values.shape[1] == report.dim
        q_ids, q_values = read_embedding_file(out1 / "query_img.emb")
        assert len(q_ids) == report.query_count
        assert q_values.shape[1] == report.dim

        export(ExportJob(dataset_root=dataset, out_dir=out2, engine_command="auto"))
        identical = all(
            (out1 / name).read_bytes() == (out2 / name).read_bytes()
            for name in ("corpus.emb", "query_img.emb", "query_txt.emb",
                         "manifest.jsonl", "report.json")
        )
        assert identical
        info["detail"] = (
            f"corpus={report.corpus_count} queries={report.query_count} "
            f"dim={report.dim}, validate exit 0, byte-identical re-export"
        )
