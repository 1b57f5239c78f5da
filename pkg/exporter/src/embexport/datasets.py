"""Dataset layout parsers.

Each parser returns (corpus, annotations): corpus maps image id -> file
path; annotations are dicts with query_id, ref_image, target_image, text,
and optional subset_ids (image ids).  Missing or broken references are NOT
resolved here; the export step decides what to skip and reports it.

Supported layouts:

generic:
    root/images/<file>            any Pillow-readable images
    root/annotations.jsonl        {"query_id"?, "ref_image", "text",
                                   "target_image", "subset_ids"?}
                                  image fields name files inside images/

fashioniq:
    root/images/<name>.png|.jpg
    root/captions/cap.<category>.<split>.json
                                  [{"candidate", "target", "captions": [..]}]
    root/image_splits/split.<category>.<split>.json
                                  ["<name>", ...]

cirr:
    root/captions/cap.rc2.<split>.json
                                  [{"pairid", "reference", "target_hard",
                                    "caption", "img_set": {"members": [..]}}]
    root/image_splits/split.rc2.<split>.json
                                  {"<name>": "<relative path>"}
"""

from __future__ import annotations

import json
from pathlib import Path

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".webp")

FASHIONIQ_CAPTION_SEPARATOR = " [SEP] "


class DatasetLayoutError(ValueError):
    """The dataset root does not hold the flavor's expected files."""


def _read_json(path: Path):
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DatasetLayoutError(f"missing annotation file {path}") from None
    except json.JSONDecodeError as exc:
        raise DatasetLayoutError(f"{path}: not valid JSON: {exc}") from None


def _strip_suffix(name: str) -> str:
    p = Path(name)
    return p.stem if p.suffix.lower() in IMAGE_SUFFIXES else name


def _find_image(images_dir: Path, name: str) -> Path | None:
    direct = images_dir / name
    if direct.is_file():
        return direct
    for suffix in IMAGE_SUFFIXES:
        candidate = images_dir / f"{name}{suffix}"
        if candidate.is_file():
            return candidate
    return None


def parse_generic(root: Path, split: str = "train"):
    images_dir = root / "images"
    if not images_dir.is_dir():
        raise DatasetLayoutError(f"missing images directory {images_dir}")
    corpus = {}
    for path in sorted(images_dir.iterdir()):
        if path.suffix.lower() in IMAGE_SUFFIXES:
            corpus[path.stem] = path
    annotations_path = root / "annotations.jsonl"
    if not annotations_path.is_file():
        raise DatasetLayoutError(f"missing {annotations_path}")
    annotations = []
    with open(annotations_path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetLayoutError(
                    f"annotations.jsonl:{line_no}: not valid JSON: {exc}"
                ) from None
            annotations.append(
                {
                    "query_id": str(raw.get("query_id", f"{split}-{line_no - 1:05d}")),
                    "ref_image": _strip_suffix(str(raw["ref_image"])),
                    "target_image": _strip_suffix(str(raw["target_image"])),
                    "text": str(raw["text"]),
                    "subset_ids": [
                        _strip_suffix(str(s)) for s in raw.get("subset_ids", [])
                    ] or None,
                }
            )
    return corpus, annotations


def parse_fashioniq(
    root: Path,
    split: str = "train",
    category: str | None = None,
    separator: str = FASHIONIQ_CAPTION_SEPARATOR,
):
    images_dir = root / "images"
    captions_dir = root / "captions"
    splits_dir = root / "image_splits"
    if category:
        categories = [category]
    else:
        categories = sorted(
            p.name.split(".")[1] for p in captions_dir.glob(f"cap.*.{split}.json")
        )
    if not categories:
        raise DatasetLayoutError(f"no cap.*.{split}.json under {captions_dir}")

    corpus = {}
    annotations = []
    for cat in categories:
        names = _read_json(splits_dir / f"split.{cat}.{split}.json")
        for name in names:
            name = _strip_suffix(str(name))
            path = _find_image(images_dir, name)
            corpus[name] = path  # may be None; export reports it
        records = _read_json(captions_dir / f"cap.{cat}.{split}.json")
        for idx, raw in enumerate(records):
            captions = [str(c).strip() for c in raw.get("captions", [])]
            annotations.append(
                {
                    "query_id": f"{cat}-{split}-{idx:05d}",
                    "ref_image": _strip_suffix(str(raw["candidate"])),
                    "target_image": _strip_suffix(str(raw["target"])),
                    "text": separator.join(captions),
                    "subset_ids": None,
                }
            )
    return corpus, annotations


def parse_cirr(root: Path, split: str = "train"):
    captions_path = root / "captions" / f"cap.rc2.{split}.json"
    split_path = root / "image_splits" / f"split.rc2.{split}.json"
    name_to_rel = _read_json(split_path)
    corpus = {}
    for name, rel in name_to_rel.items():
        path = root / str(rel)
        corpus[str(name)] = path if path.is_file() else None
    annotations = []
    for raw in _read_json(captions_path):
        members = raw.get("img_set", {}).get("members", [])
        annotations.append(
            {
                "query_id": str(raw["pairid"]),
                "ref_image": str(raw["reference"]),
                "target_image": str(raw["target_hard"]),
                "text": str(raw["caption"]),
                "subset_ids": [str(m) for m in members] or None,
            }
        )
    return corpus, annotations


def parse_dataset(root, flavor: str, split: str = "train", category: str | None = None,
                  separator: str = FASHIONIQ_CAPTION_SEPARATOR):
    root = Path(root)
    if not root.is_dir():
        raise DatasetLayoutError(f"dataset root {root} is not a directory")
    if flavor == "generic":
        return parse_generic(root, split=split)
    if flavor == "fashioniq":
        return parse_fashioniq(root, split=split, category=category, separator=separator)
    if flavor == "cirr":
        return parse_cirr(root, split=split)
    raise DatasetLayoutError(f"unknown dataset flavor {flavor!r}")
