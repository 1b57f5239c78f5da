"""Export pipeline: parse a dataset, encode, emit engine-format files.

Emits corpus.emb, query_img.emb, query_txt.emb, manifest.jsonl, and
report.json into the output directory.  Unreadable images are skipped with a
report entry; annotations whose images are missing or skipped are excluded
and reported.  The output is validated before the exporter returns: with the
engine CLI when available, and always against the same structural rules
internally.
"""

from __future__ import annotations

import json
import shutil
import subprocess
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datasets import FASHIONIQ_CAPTION_SEPARATOR, parse_dataset
from .encoders import PREPROCESS, build_encoder
from .formats import write_embedding_file, write_manifest_file


class ExportError(RuntimeError):
    pass


class ValidationFailed(ExportError):
    """Emitted files did not pass validation."""


@dataclass
class ExportJob:
    dataset_root: Path
    flavor: str = "generic"
    encoder: str = "patch-stat"
    out_dir: Path = Path("export")
    batch_size: int = 32
    device: str = "cpu"
    split: str = "train"
    category: str | None = None
    caption_separator: str = FASHIONIQ_CAPTION_SEPARATOR
    engine_command: str | None = "auto"  # auto: use cirtrain when on PATH; None: skip


@dataclass
class ExportReport:
    encoder: str
    dim: int
    corpus_count: int
    query_count: int
    annotation_count: int
    skipped_images: list = field(default_factory=list)
    excluded_queries: list = field(default_factory=list)
    validation: dict = field(default_factory=dict)
    preprocess: dict = field(default_factory=lambda: dict(PREPROCESS))

    def to_jsonable(self) -> dict:
        return {
            "encoder": self.encoder,
            "dim": self.dim,
            "corpus_count": self.corpus_count,
            "query_count": self.query_count,
            "annotation_count": self.annotation_count,
            "skipped_images": self.skipped_images,
            "excluded_queries": self.excluded_queries,
            "validation": self.validation,
            "preprocess": self.preprocess,
        }


def _encode_images_batched(encoder, paths, batch_size):
    if not paths:
        return np.empty((0, encoder.dim), dtype=np.float32)
    blocks = [
        encoder.encode_images(paths[i : i + batch_size])
        for i in range(0, len(paths), batch_size)
    ]
    return np.concatenate(blocks, axis=0)


def _internal_validation(corpus_ids, queries, dims) -> list[str]:
    problems = []
    corpus = set(corpus_ids)
    if len(dims) > 1:
        problems.append(f"inconsistent dims {sorted(dims)}")
    if queries and len(corpus) < 2:
        problems.append("corpus smaller than 2 images with queries present")
    seen = set()
    for q in queries:
        if q["query_id"] in seen:
            problems.append(f"duplicate query_id {q['query_id']}")
        seen.add(q["query_id"])
        if q["target_id"] not in corpus:
            problems.append(f"{q['query_id']}: target {q['target_id']} not in corpus")
        for s in q.get("subset_ids") or []:
            if s not in corpus:
                problems.append(f"{q['query_id']}: subset id {s} not in corpus")
        if q.get("subset_ids") and q["target_id"] not in q["subset_ids"]:
            problems.append(f"{q['query_id']}: target outside subset")
    return problems


def _engine_validation(out_dir: Path, command: str) -> tuple[bool, str]:
    proc = subprocess.run(
        [
            command, "validate",
            "--manifest", str(out_dir / "manifest.jsonl"),
            "--corpus", str(out_dir / "corpus.emb"),
            "--query-img", str(out_dir / "query_img.emb"),
            "--query-txt", str(out_dir / "query_txt.emb"),
        ],
        capture_output=True,
        text=True,
    )
    return proc.returncode == 0, proc.stdout.strip().splitlines()[-1] if proc.stdout else ""


def export(job: ExportJob) -> ExportReport:
    """Run the full export; raises ValidationFailed if the output is unusable."""
    out_dir = Path(job.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    encoder = build_encoder(job.encoder, device=job.device, batch_size=job.batch_size)

    corpus_paths, annotations = parse_dataset(
        job.dataset_root, job.flavor, split=job.split, category=job.category,
        separator=job.caption_separator,
    )

    report = ExportReport(
        encoder=encoder.name, dim=encoder.dim,
        corpus_count=0, query_count=0, annotation_count=len(annotations),
    )

    # Corpus: drop unlisted or unreadable files, keep going.
    usable_ids, usable_paths = [], []
    for image_id in sorted(corpus_paths):
        path = corpus_paths[image_id]
        if path is None:
            report.skipped_images.append({"image": image_id, "reason": "file not found"})
            continue
        usable_ids.append(image_id)
        usable_paths.append(path)

    corpus_rows = []
    corpus_ids = []
    for i in range(0, len(usable_ids), job.batch_size):
        batch_ids = usable_ids[i : i + job.batch_size]
        batch_paths = usable_paths[i : i + job.batch_size]
        for image_id, path in zip(batch_ids, batch_paths):
            try:
                corpus_rows.append(encoder.encode_images([path])[0])
                corpus_ids.append(image_id)
            except Exception as exc:
                report.skipped_images.append(
                    {"image": image_id, "reason": f"unreadable: {exc}"}
                )
    corpus_values = (
        np.stack(corpus_rows)
        if corpus_rows
        else np.empty((0, encoder.dim), dtype=np.float32)
    )
    corpus_set = set(corpus_ids)
    report.corpus_count = len(corpus_ids)

    # Queries: exclude anything that references a missing or skipped image.
    kept = []
    for ann in annotations:
        ref_path = corpus_paths.get(ann["ref_image"])
        if ann["target_image"] not in corpus_set:
            report.excluded_queries.append(
                {"query_id": ann["query_id"], "reason": f"target {ann['target_image']} unavailable"}
            )
            continue
        if ref_path is None:
            report.excluded_queries.append(
                {"query_id": ann["query_id"], "reason": f"reference {ann['ref_image']} unavailable"}
            )
            continue
        subset = ann.get("subset_ids")
        if subset is not None:
            subset = sorted(set(subset) & corpus_set | {ann["target_image"]})
        kept.append((ann, ref_path, subset))

    queries = []
    ref_rows, txt_rows = [], []
    for ann, ref_path, subset in kept:
        try:
            ref_rows.append(encoder.encode_images([ref_path])[0])
        except Exception as exc:
            report.excluded_queries.append(
                {"query_id": ann["query_id"], "reason": f"reference unreadable: {exc}"}
            )
            continue
        txt_rows.append(encoder.encode_texts([ann["text"]])[0])
        queries.append(
            {
                "query_id": ann["query_id"],
                "ref_image_id": f"{ann['query_id']}-ref",
                "text_embed_id": f"{ann['query_id']}-txt",
                "target_id": ann["target_image"],
                "subset_ids": subset,
            }
        )
    report.query_count = len(queries)

    write_embedding_file(corpus_ids, corpus_values, out_dir / "corpus.emb")
    write_embedding_file(
        [q["ref_image_id"] for q in queries],
        np.stack(ref_rows) if ref_rows else np.empty((0, encoder.dim), dtype=np.float32),
        out_dir / "query_img.emb",
    )
    write_embedding_file(
        [q["text_embed_id"] for q in queries],
        np.stack(txt_rows) if txt_rows else np.empty((0, encoder.dim), dtype=np.float32),
        out_dir / "query_txt.emb",
    )
    write_manifest_file(queries, out_dir / "manifest.jsonl")

    problems = _internal_validation(corpus_ids, queries, {encoder.dim})
    if problems:
        report.validation = {"mode": "internal", "ok": False, "problems": problems}
        _write_report(report, out_dir)
        raise ValidationFailed("; ".join(problems))

    command = job.engine_command
    if command == "auto":
        command = "cirtrain" if shutil.which("cirtrain") else None
    if command:
        ok, summary = _engine_validation(out_dir, command)
        report.validation = {"mode": "engine-cli", "ok": ok, "summary": summary}
        if not ok:
            _write_report(report, out_dir)
            raise ValidationFailed(f"engine validation failed: {summary}")
    else:
        report.validation = {"mode": "internal", "ok": True}

    _write_report(report, out_dir)
    return report


def _write_report(report: ExportReport, out_dir: Path) -> None:
    (out_dir / "report.json").write_text(
        json.dumps(report.to_jsonable(), sort_keys=True, indent=2) + "\n",
        encoding="utf-8",
    )
