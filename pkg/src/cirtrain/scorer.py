"""Relevance scoring between fused bi-modal queries and corpus images.

A query is the concatenation of its reference-image and text embeddings,
projected by a trainable linear fusion head; corpus images go through a
separate linear projection.  Both sides are L2-normalized, so the score is
a temperature-scaled cosine: score = (q . v) * exp(log_inv_tau).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .seeding import STREAM_INIT, derive_rng
from .store import DatasetManifest, EmbeddingMatrix, QueryRecord

# Inverse temperature stays inside [1, 100] after every optimizer step.
# The upper bound is the largest double whose exp does not round above 100.
LOG_INV_TAU_MIN = 0.0
LOG_INV_TAU_MAX = 4.605170185988091

DEFAULT_CHUNK_ROWS = 8192

_NORM_FLOOR = 1e-12


class DegenerateQueryError(ValueError):
    """Projected vector vanished; it cannot be normalized."""


@dataclass
class AdapterParams:
    """Trainable fusion/projection weights and the learned temperature.

    w_fuse maps the concatenated (image, text) pair to the shared space,
    w_img maps corpus images.  All arrays are float64 internally; embeddings
    on disk stay float32 and are upcast on the fly.
    """

    w_fuse: np.ndarray  # (d_out, 2*d_in)
    b_fuse: np.ndarray  # (d_out,)
    w_img: np.ndarray  # (d_out, d_in)
    b_img: np.ndarray  # (d_out,)
    log_inv_tau: float

    def __post_init__(self):
        self.w_fuse = np.asarray(self.w_fuse, dtype=np.float64)
        self.b_fuse = np.asarray(self.b_fuse, dtype=np.float64)
        self.w_img = np.asarray(self.w_img, dtype=np.float64)
        self.b_img = np.asarray(self.b_img, dtype=np.float64)
        self.log_inv_tau = float(self.log_inv_tau)
        d_out, two_d_in = self.w_fuse.shape
        if two_d_in % 2 != 0:
            raise ValueError("w_fuse second dimension must be 2*d_in")
        if self.w_img.shape != (d_out, two_d_in // 2):
            raise ValueError(
                f"w_img shape {self.w_img.shape} incompatible with w_fuse {self.w_fuse.shape}"
            )
        if self.b_fuse.shape != (d_out,) or self.b_img.shape != (d_out,):
            raise ValueError("bias shapes must be (d_out,)")
        for name, arr in self.named_arrays():
            if not np.isfinite(arr).all():
                raise ValueError(f"non-finite entries in {name}")
        if not math.isfinite(self.log_inv_tau):
            raise ValueError("non-finite log_inv_tau")

    @property
    def d_in(self) -> int:
        return self.w_img.shape[1]

    @property
    def d_out(self) -> int:
        return self.w_img.shape[0]

    @property
    def inv_tau(self) -> float:
        return math.exp(self.log_inv_tau)

    def named_arrays(self):
        return [
            ("w_fuse", self.w_fuse),
            ("b_fuse", self.b_fuse),
            ("w_img", self.w_img),
            ("b_img", self.b_img),
        ]

    def clamp_temperature(self) -> None:
        self.log_inv_tau = min(max(self.log_inv_tau, LOG_INV_TAU_MIN), LOG_INV_TAU_MAX)

    def copy(self) -> "AdapterParams":
        return AdapterParams(
            w_fuse=self.w_fuse.copy(),
            b_fuse=self.b_fuse.copy(),
            w_img=self.w_img.copy(),
            b_img=self.b_img.copy(),
            log_inv_tau=self.log_inv_tau,
        )


def _identity_block(d_out: int, d_in: int) -> np.ndarray:
    block = np.zeros((d_out, d_in))
    for i in range(min(d_out, d_in)):
        block[i, i] = 1.0
    return block


def init_params(
    d_in: int,
    d_out: int | None = None,
    inv_tau_init: float = 20.0,
    seed: int = 0,
    noise_scale: float = 1e-3,
) -> AdapterParams:
    """Scaled-identity initialization plus small uniform noise.

    The fusion head starts by averaging ([x_img ; x_txt] mapped by
    (1/sqrt(2))*I per block) so the initial score approximates raw
    similarity, which gives the warm-up phase a meaningful ranking.
    """
    if d_out is None:
        d_out = d_in
    if inv_tau_init <= 0:
        raise ValueError("inv_tau_init must be positive")
    rng = derive_rng(seed, STREAM_INIT)
    eye = _identity_block(d_out, d_in)
    w_fuse = np.concatenate([eye, eye], axis=1) / math.sqrt(2.0)
    w_img = eye.copy()
    w_fuse += rng.uniform(-noise_scale, noise_scale, size=w_fuse.shape)
    w_img += rng.uniform(-noise_scale, noise_scale, size=w_img.shape)
    params = AdapterParams(
        w_fuse=w_fuse,
        b_fuse=np.zeros(d_out),
        w_img=w_img,
        b_img=np.zeros(d_out),
        log_inv_tau=math.log(inv_tau_init),
    )
    params.clamp_temperature()
    return params


def _normalize(u: np.ndarray, context: str) -> np.ndarray:
    norm = float(np.linalg.norm(u))
    if norm < _NORM_FLOOR:
        raise DegenerateQueryError(f"{context}: projected vector has norm {norm:.3e}")
    return u / norm


def fuse_query(params: AdapterParams, x_img: np.ndarray, x_txt: np.ndarray) -> np.ndarray:
    """Project and L2-normalize the concatenated (image, text) pair."""
    z = np.concatenate(
        [np.asarray(x_img, dtype=np.float64), np.asarray(x_txt, dtype=np.float64)]
    )
    u = params.w_fuse @ z + params.b_fuse
    return _normalize(u, "fuse_query")


def embed_image(params: AdapterParams, v: np.ndarray) -> np.ndarray:
    """Project and L2-normalize a corpus image embedding."""
    u = params.w_img @ np.asarray(v, dtype=np.float64) + params.b_img
    return _normalize(u, "embed_image")


def relevance_score(params: AdapterParams, q: np.ndarray, v: np.ndarray) -> float:
    """Temperature-scaled inner product of two unit vectors."""
    return float(np.dot(q, v)) * math.exp(params.log_inv_tau)


def embed_image_rows(
    params: AdapterParams, rows: np.ndarray, chunk_rows: int = DEFAULT_CHUNK_ROWS
) -> np.ndarray:
    """Vectorized embed_image over a (n, d_in) block, in fixed-size chunks.

    Results are chunking-invariant: each output row depends only on its own
    input row.
    """
    rows = np.asarray(rows, dtype=np.float64)
    n = rows.shape[0]
    out = np.empty((n, params.d_out), dtype=np.float64)
    for start in range(0, n, chunk_rows):
        stop = min(start + chunk_rows, n)
        block = rows[start:stop] @ params.w_img.T + params.b_img
        norms = np.linalg.norm(block, axis=1)
        bad = np.flatnonzero(norms < _NORM_FLOOR)
        if bad.size:
            raise DegenerateQueryError(
                f"embed_image: row {start + int(bad[0])} has norm {norms[bad[0]]:.3e}"
            )
        out[start:stop] = block / norms[:, None]
    return out


@dataclass(frozen=True)
class RankedList:
    """Descending-score ranking of corpus images for one query.

    Ties are broken by ascending image id so rankings are deterministic.
    target_rank is 1-based and present only when the target was scored.
    """

    query_id: str
    entries: tuple[tuple[str, float], ...]
    target_rank: int | None

    @property
    def ids(self) -> tuple[str, ...]:
        return tuple(image_id for image_id, _ in self.entries)

    @property
    def scores(self) -> tuple[float, ...]:
        return tuple(score for _, score in self.entries)


def _rank_scored_ids(ids: np.ndarray, scores: np.ndarray) -> np.ndarray:
    # lexsort's last key is primary: descending score, then ascending id.
    return np.lexsort((ids, -scores))


def rank_corpus(
    params: AdapterParams,
    query: QueryRecord,
    corpus: EmbeddingMatrix,
    queries_img: EmbeddingMatrix,
    queries_txt: EmbeddingMatrix,
    restrict_to=None,
    chunk_rows: int = DEFAULT_CHUNK_ROWS,
) -> RankedList:
    """Score and sort the corpus (or a subset of it) for one query."""
    q = fuse_query(
        params, queries_img.row(query.ref_image_id), queries_txt.row(query.text_embed_id)
    )

    if restrict_to is not None:
        chosen = sorted(restrict_to)
        missing = [i for i in chosen if i not in corpus]
        if missing:
            raise KeyError(f"restrict_to ids not in corpus: {missing[:5]!r}")
        rows = np.stack([corpus.row(i) for i in chosen]) if chosen else np.empty((0, corpus.dim))
        ids = np.asarray(chosen, dtype=object)
    else:
        rows = corpus.values
        ids = np.asarray(corpus.ids, dtype=object)

    inv_tau = math.exp(params.log_inv_tau)
    n = rows.shape[0]
    scores = np.empty(n, dtype=np.float64)
    for start in range(0, n, chunk_rows):
        stop = min(start + chunk_rows, n)
        embedded = embed_image_rows(params, rows[start:stop], chunk_rows=chunk_rows)
        scores[start:stop] = (embedded @ q) * inv_tau

    order = _rank_scored_ids(ids, scores)
    entries = tuple((str(ids[i]), float(scores[i])) for i in order)
    target_rank = None
    for pos, (image_id, _) in enumerate(entries, start=1):
        if image_id == query.target_id:
            target_rank = pos
            break
    return RankedList(query_id=query.query_id, entries=entries, target_rank=target_rank)


def rank_all(
    params: AdapterParams,
    manifest: DatasetManifest,
    corpus: EmbeddingMatrix,
    queries_img: EmbeddingMatrix,
    queries_txt: EmbeddingMatrix,
    restrict_to_subsets: bool = False,
    chunk_rows: int = DEFAULT_CHUNK_ROWS,
) -> list[RankedList]:
    """rank_corpus for every manifest query, in manifest order.

    With restrict_to_subsets=True each query is scored only against its own
    subset_ids (queries without subsets raise).
    """
    out = []
    for query in manifest.queries:
        restrict = None
        if restrict_to_subsets:
            if query.subset_ids is None:
                raise ValueError(f"query {query.query_id!r} has no subset_ids")
            restrict = query.subset_ids
        out.append(
            rank_corpus(
                params, query, corpus, queries_img, queries_txt,
                restrict_to=restrict, chunk_rows=chunk_rows,
            )
        )
    return out


def top_k(ranked: RankedList, k: int) -> list[str]:
    """First min(k, len) ids of a ranking."""
    if k < 1:
        raise ValueError("k must be >= 1")
    return list(ranked.ids[:k])
