"""Command-line entry point for the exporter."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .datasets import DatasetLayoutError, FASHIONIQ_CAPTION_SEPARATOR
from .export import ExportJob, ValidationFailed, export


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="embexport",
        description="Export image/text embeddings for the retrieval engine",
    )
    parser.add_argument("--dataset-root", required=True)
    parser.add_argument("--flavor", choices=("generic", "fashioniq", "cirr"), default="generic")
    parser.add_argument(
        "--encoder", default="patch-stat",
        help="'patch-stat' (offline, deterministic) or 'st:<model>' "
        "(sentence-transformers vision-language model)",
    )
    parser.add_argument("--out", required=True)
    parser.add_argument("--batch-size", type=int, default=32)
    parser.add_argument("--device", default="cpu")
    parser.add_argument("--split", default="train")
    parser.add_argument("--category", default=None, help="fashioniq category filter")
    parser.add_argument(
        "--caption-separator", default=FASHIONIQ_CAPTION_SEPARATOR,
        help="joins fashioniq caption pairs",
    )
    parser.add_argument(
        "--engine-cmd", default="auto",
        help="engine binary used to validate output ('auto', 'none', or a path)",
    )
    return parser


def main(argv=None) -> None:
    args = build_parser().parse_args(argv)
    job = ExportJob(
        dataset_root=Path(args.dataset_root),
        flavor=args.flavor,
        encoder=args.encoder,
        out_dir=Path(args.out),
        batch_size=args.batch_size,
        device=args.device,
        split=args.split,
        category=args.category,
        caption_separator=args.caption_separator,
        engine_command=None if args.engine_cmd == "none" else args.engine_cmd,
    )
    try:
        report = export(job)
    except (DatasetLayoutError, ValidationFailed, RuntimeError, ValueError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        sys.exit(1)
    print(json.dumps(report.to_jsonable(), sort_keys=True))
    sys.exit(0)


if __name__ == "__main__":
    main()
