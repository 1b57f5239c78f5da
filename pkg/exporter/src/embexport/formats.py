"""Writer for the retrieval engine's on-disk interfaces.

Embedding container (little-endian): magic "QURE", version 1, dtype code 1
(f32), two reserved zero bytes, u32 dim, u64 count, count*dim f32 row-major
values, then per row a u16 byte length plus UTF-8 id.  Manifests are JSON
lines with keys query_id, ref_image_id, text_embed_id, target_id and an
optional subset_ids array.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"QURE"
VERSION = 1
DTYPE_F32 = 1

_HEADER = struct.Struct("<4sBBHIQ")


def write_embedding_file(ids, values, destination) -> None:
    """Write one embedding container; ids and rows must correspond 1:1."""
    values = np.ascontiguousarray(values, dtype="<f4")
    if values.ndim != 2:
        raise ValueError(f"values must be 2-D, got {values.shape}")
    ids = [str(i) for i in ids]
    count, dim = values.shape
    if len(ids) != count:
        raise ValueError(f"{len(ids)} ids for {count} rows")
    if len(set(ids)) != count:
        raise ValueError("duplicate ids")
    if not np.isfinite(values).all():
        raise ValueError("non-finite embedding value")
    with open(Path(destination), "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, DTYPE_F32, 0, dim, count))
        fh.write(values.tobytes())
        for row_id in ids:
            encoded = row_id.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)


def write_manifest_file(queries, destination) -> None:
    """queries: iterable of dicts with the manifest keys."""
    with open(Path(destination), "w", encoding="utf-8") as fh:
        for q in queries:
            record = {
                "query_id": q["query_id"],
                "ref_image_id": q["ref_image_id"],
                "text_embed_id": q["text_embed_id"],
                "target_id": q["target_id"],
            }
            if q.get("subset_ids"):
                record["subset_ids"] = list(q["subset_ids"])
            fh.write(json.dumps(record, sort_keys=True) + "\n")
