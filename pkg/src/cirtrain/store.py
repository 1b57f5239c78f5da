"""Binary persistence and validation for embedding matrices and dataset manifests.

File container layout (little-endian throughout):

    bytes 0-3    magic "QURE"
    byte  4      version (1)
    byte  5      dtype code (1 = f32 embedding payload, 2 = checkpoint payload)
    bytes 6-7    reserved, zero
    bytes 8-11   dim   (u32)
    bytes 12-19  count (u64)
    payload      count*dim f32 values, row-major
    id table     per row: u16 byte length + UTF-8 id bytes

Checkpoint files reuse the same header with dtype code 2; their payload is
defined in `cirtrain.trainer`.

Manifests are JSON lines, one query record per line.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"QURE"
VERSION = 1
DTYPE_F32 = 1
DTYPE_CHECKPOINT = 2

_HEADER = struct.Struct("<4sBBHIQ")  # magic, version, dtype, reserved, dim, count


class StoreError(Exception):
    """Base class for storage failures."""


class FormatError(StoreError):
    """File is not a recognized container (bad magic, version, or dtype)."""


class CorruptionError(StoreError):
    """Container header and payload disagree (truncation, short id table)."""


class InvariantError(StoreError):
    """In-memory object violates its own invariants."""


@dataclass(frozen=True)
class EmbeddingMatrix:
    """Dense float32 matrix with one stable string id per row.

    Immutable after construction; safe for concurrent reads.
    """

    dim: int
    ids: tuple[str, ...]
    values: np.ndarray  # (count, dim) float32
    _index: dict[str, int] = field(repr=False, compare=False, default_factory=dict)

    @staticmethod
    def create(ids, values) -> "EmbeddingMatrix":
        values = np.ascontiguousarray(values, dtype=np.float32)
        if values.ndim != 2:
            raise InvariantError(f"values must be 2-D, got shape {values.shape}")
        ids = tuple(str(i) for i in ids)
        count, dim = values.shape
        if dim <= 0:
            raise InvariantError("feature dimension must be positive")
        if len(ids) != count:
            raise InvariantError(f"{len(ids)} ids for {count} rows")
        if any(not i for i in ids):
            raise InvariantError("empty id")
        index = {}
        for pos, row_id in enumerate(ids):
            if row_id in index:
                raise InvariantError(f"duplicate id {row_id!r}")
            index[row_id] = pos
        if not np.isfinite(values).all():
            raise InvariantError("non-finite value in embedding matrix")
        m = EmbeddingMatrix(dim=dim, ids=ids, values=values)
        m._index.update(index)
        return m

    @property
    def count(self) -> int:
        return len(self.ids)

    def row(self, row_id: str) -> np.ndarray:
        try:
            return self.values[self._index[row_id]]
        except KeyError:
            raise KeyError(f"unknown embedding id {row_id!r}") from None

    def __contains__(self, row_id: str) -> bool:
        return row_id in self._index

    def position(self, row_id: str) -> int:
        return self._index[row_id]


@dataclass(frozen=True)
class QueryRecord:
    query_id: str
    ref_image_id: str
    text_embed_id: str
    target_id: str
    subset_ids: tuple[str, ...] | None = None


@dataclass(frozen=True)
class DatasetManifest:
    """Corpus listing plus query records for one split."""

    corpus_ids: tuple[str, ...]
    queries: tuple[QueryRecord, ...]
    split: str = "train"

    @property
    def n_img(self) -> int:
        return len(self.corpus_ids)

    @property
    def n_data(self) -> int:
        return len(self.queries)


def _write_header(fh, dtype_code: int, dim: int, count: int) -> None:
    fh.write(_HEADER.pack(MAGIC, VERSION, dtype_code, 0, dim, count))


def read_header(fh) -> tuple[int, int, int]:
    """Read and check a container header; returns (dtype_code, dim, count)."""
    raw = fh.read(_HEADER.size)
    if len(raw) < _HEADER.size:
        raise FormatError("file too short to hold a header")
    magic, version, dtype_code, reserved, dim, count = _HEADER.unpack(raw)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    if dtype_code not in (DTYPE_F32, DTYPE_CHECKPOINT):
        raise FormatError(f"unsupported dtype code {dtype_code}")
    if reserved != 0:
        raise FormatError("reserved header bytes must be zero")
    return dtype_code, dim, count


def write_embeddings(matrix: EmbeddingMatrix, destination) -> None:
    """Persist a matrix; rejects invalid matrices before writing any bytes."""
    # Validate up front even for matrices built without create().
    matrix = EmbeddingMatrix.create(matrix.ids, matrix.values)
    destination = Path(destination)
    id_blob = bytearray()
    for row_id in matrix.ids:
        encoded = row_id.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise InvariantError(f"id too long: {row_id[:32]!r}...")
        id_blob += struct.pack("<H", len(encoded))
        id_blob += encoded
    with open(destination, "wb") as fh:
        _write_header(fh, DTYPE_F32, matrix.dim, matrix.count)
        fh.write(np.ascontiguousarray(matrix.values, dtype="<f4").tobytes())
        fh.write(bytes(id_blob))


def load_embeddings(source) -> EmbeddingMatrix:
    """Load a matrix written by write_embeddings, bit-exactly."""
    source = Path(source)
    with open(source, "rb") as fh:
        dtype_code, dim, count = read_header(fh)
        if dtype_code != DTYPE_F32:
            raise FormatError(f"not an embedding file (dtype code {dtype_code})")
        if dim == 0:
            raise FormatError("embedding file declares dim=0")
        payload_bytes = count * dim * 4
        payload = fh.read(payload_bytes)
        if len(payload) < payload_bytes:
            raise CorruptionError(
                f"payload truncated: expected {payload_bytes} bytes, got {len(payload)}"
            )
        values = np.frombuffer(payload, dtype="<f4").reshape(count, dim)
        ids = []
        for _ in range(count):
            length_raw = fh.read(2)
            if len(length_raw) < 2:
                raise CorruptionError("id table truncated")
            (length,) = struct.unpack("<H", length_raw)
            encoded = fh.read(length)
            if len(encoded) < length:
                raise CorruptionError("id table truncated")
            ids.append(encoded.decode("utf-8"))
    return EmbeddingMatrix.create(ids, values.copy())


def write_manifest(queries, destination) -> None:
    """Write query records as JSON lines."""
    destination = Path(destination)
    with open(destination, "w", encoding="utf-8") as fh:
        for q in queries:
            record = {
                "query_id": q.query_id,
                "ref_image_id": q.ref_image_id,
                "text_embed_id": q.text_embed_id,
                "target_id": q.target_id,
            }
            if q.subset_ids is not None:
                record["subset_ids"] = list(q.subset_ids)
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def load_manifest(source, corpus_ids, split: str = "train") -> DatasetManifest:
    """Read JSON-line query records and bind them to a corpus listing."""
    source = Path(source)
    queries = []
    with open(source, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{source.name}:{line_no}: not valid JSON: {exc}") from None
            try:
                subset = record.get("subset_ids")
                queries.append(
                    QueryRecord(
                        query_id=str(record["query_id"]),
                        ref_image_id=str(record["ref_image_id"]),
                        text_embed_id=str(record["text_embed_id"]),
                        target_id=str(record["target_id"]),
                        subset_ids=tuple(str(s) for s in subset) if subset is not None else None,
                    )
                )
            except KeyError as exc:
                raise FormatError(f"{source.name}:{line_no}: missing key {exc}") from None
    return DatasetManifest(corpus_ids=tuple(corpus_ids), queries=tuple(queries), split=split)


@dataclass(frozen=True)
class ValidationIssue:
    code: str
    query_id: str | None
    detail: str


@dataclass
class ValidationReport:
    issues: list[ValidationIssue] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.issues

    def add(self, code: str, query_id: str | None, detail: str) -> None:
        self.issues.append(ValidationIssue(code, query_id, detail))

    def to_jsonable(self) -> list[dict]:
        return [
            {"code": i.code, "query_id": i.query_id, "detail": i.detail} for i in self.issues
        ]


def validate_manifest(
    manifest: DatasetManifest,
    corpus: EmbeddingMatrix,
    queries_img: EmbeddingMatrix,
    queries_txt: EmbeddingMatrix,
) -> ValidationReport:
    """Check id resolution, dimensions, and subset rules.

    Problems become report entries, never exceptions; an empty report means
    every lookup the scorer, miner, and trainer will perform succeeds.
    """
    report = ValidationReport()
    corpus_set = set(corpus.ids)

    if tuple(manifest.corpus_ids) != tuple(corpus.ids):
        missing = set(manifest.corpus_ids) - corpus_set
        extra = corpus_set - set(manifest.corpus_ids)
        if missing or extra:
            report.add(
                "corpus_mismatch",
                None,
                f"manifest corpus listing disagrees with corpus file "
                f"({len(missing)} missing, {len(extra)} extra)",
            )

    if queries_img.dim != queries_txt.dim:
        report.add(
            "dim_mismatch",
            None,
            f"query image dim {queries_img.dim} != query text dim {queries_txt.dim}",
        )
    if corpus.dim != queries_img.dim:
        report.add(
            "dim_mismatch",
            None,
            f"corpus dim {corpus.dim} != query image dim {queries_img.dim}",
        )

    if manifest.queries and manifest.n_img < 2:
        report.add(
            "corpus_too_small",
            None,
            f"trainable manifest needs at least 2 corpus images, found {manifest.n_img}",
        )

    seen_query_ids: set[str] = set()
    for q in manifest.queries:
        if q.query_id in seen_query_ids:
            report.add("duplicate_query", q.query_id, "query_id appears more than once")
        seen_query_ids.add(q.query_id)
        if q.ref_image_id not in queries_img:
            report.add("dangling_ref", q.query_id, f"ref image {q.ref_image_id!r} not found")
        if q.text_embed_id not in queries_txt:
            report.add("dangling_text", q.query_id, f"text embed {q.text_embed_id!r} not found")
        if q.target_id not in corpus_set:
            report.add("dangling_target", q.query_id, f"target {q.target_id!r} not in corpus")
        if q.subset_ids is not None:
            subset = set(q.subset_ids)
            if q.target_id not in subset:
                report.add("target_outside_subset", q.query_id, "target not in subset_ids")
            stray = subset - corpus_set
            if stray:
                report.add(
                    "subset_outside_corpus",
                    q.query_id,
                    f"{len(stray)} subset ids missing from corpus",
                )
    return report
