"""Synthetic planted-attribute datasets for desk-scale verification.

Every image is a sum of one unit basis direction per attribute (orthogonal
blocks of the feature space) plus Gaussian noise.  A query modifies one
attribute of a reference image; its text embedding is the signed indicator
of that change, so reference + text equals the target exactly and a linear
scorer can solve the task.

Each planted target comes with a configurable number of corpus duplicates
sharing its attribute signature but not its noise: relevant images that are
not the annotated target.  Ground truth records target plus duplicates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .evaluator import GroundTruth
from .seeding import STREAM_SYNTH_CORPUS, STREAM_SYNTH_QUERIES, derive_rng, stable_key
from .store import DatasetManifest, EmbeddingMatrix, QueryRecord


class SynthConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    n_attributes: int
    dim: int
    n_corpus: int
    n_queries: int
    noise_sigma: float = 0.0
    false_negative_rate: float = 0.0
    seed: int = 0
    split: str = "train"  # corpus depends only on seed; queries also on split

    def __post_init__(self):
        if self.n_attributes < 1:
            raise SynthConfigError("n_attributes must be >= 1")
        if self.dim < 2 * self.n_attributes:
            raise SynthConfigError("dim must be >= 2 * n_attributes")
        if self.n_corpus < 10:
            raise SynthConfigError("n_corpus must be >= 10")
        if self.n_queries < 1:
            raise SynthConfigError("n_queries must be >= 1")
        if self.noise_sigma < 0:
            raise SynthConfigError("noise_sigma must be non-negative")
        if not 0.0 <= self.false_negative_rate < 1.0:
            raise SynthConfigError("false_negative_rate must be in [0, 1)")
        if self.duplicates_per_target + 1 > self.n_corpus:
            raise SynthConfigError(
                "false_negative_rate too high: a target group would exceed the corpus"
            )

    @property
    def block_size(self) -> int:
        return self.dim // self.n_attributes

    @property
    def duplicates_per_target(self) -> int:
        return int(round(self.false_negative_rate * self.n_corpus))


def _signature_vector(signature: tuple[int, ...], config: SynthConfig) -> np.ndarray:
    vec = np.zeros(config.dim)
    for attribute, value in enumerate(signature):
        vec[attribute * config.block_size + value] = 1.0
    return vec


def _draw_signature(rng: np.random.Generator, config: SynthConfig) -> tuple[int, ...]:
    return tuple(int(v) for v in rng.integers(0, config.block_size, size=config.n_attributes))


def _plan_groups(config: SynthConfig) -> int:
    group_size = config.duplicates_per_target + 1
    capacity = config.block_size**config.n_attributes
    n_groups = min(config.n_queries, max(1, int(0.8 * config.n_corpus) // group_size))
    planted = n_groups * group_size
    if planted < config.n_corpus:
        # fillers need at least one signature outside the target set
        n_groups = min(n_groups, capacity - 1)
    else:
        n_groups = min(n_groups, capacity)
    if n_groups < 1:
        raise SynthConfigError("attribute space too small to plant any target group")
    return n_groups


def generate(
    config: SynthConfig,
) -> tuple[
    EmbeddingMatrix,
    EmbeddingMatrix,
    EmbeddingMatrix,
    DatasetManifest,
    dict[str, GroundTruth],
]:
    """Build (corpus, query_img, query_txt, manifest, truth), all seed-deterministic.

    Two configs differing only in split share the corpus bit-for-bit, which
    gives held-out query sets over the same planted structure.
    """
    corpus_rng = derive_rng(config.seed, STREAM_SYNTH_CORPUS)
    n_groups = _plan_groups(config)
    k_fn = config.duplicates_per_target
    group_size = k_fn + 1

    # Distinct target signatures.
    target_signatures: list[tuple[int, ...]] = []
    seen: set[tuple[int, ...]] = set()
    while len(target_signatures) < n_groups:
        sig = _draw_signature(corpus_rng, config)
        if sig not in seen:
            seen.add(sig)
            target_signatures.append(sig)

    def noised(vec: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        if config.noise_sigma == 0.0:
            return vec
        return vec + config.noise_sigma * rng.standard_normal(config.dim)

    # Planted group members first, fillers after; positions shuffled below.
    vectors: list[np.ndarray] = []
    member_of_group: list[int | None] = []
    is_target: list[bool] = []
    for g, sig in enumerate(target_signatures):
        base = _signature_vector(sig, config)
        for j in range(group_size):
            vectors.append(noised(base, corpus_rng))
            member_of_group.append(g)
            is_target.append(j == 0)
    n_fillers = config.n_corpus - n_groups * group_size
    for _ in range(n_fillers):
        while True:
            sig = _draw_signature(corpus_rng, config)
            if sig not in seen:
                break
        vectors.append(noised(_signature_vector(sig, config), corpus_rng))
        member_of_group.append(None)
        is_target.append(False)

    order = corpus_rng.permutation(config.n_corpus)
    corpus_ids = [f"img{i:05d}" for i in range(config.n_corpus)]
    corpus_values = np.empty((config.n_corpus, config.dim), dtype=np.float64)
    group_target_id: dict[int, str] = {}
    group_duplicate_ids: dict[int, list[str]] = {g: [] for g in range(n_groups)}
    for new_pos, src in enumerate(order):
        corpus_values[new_pos] = vectors[src]
        g = member_of_group[src]
        if g is not None:
            if is_target[src]:
                group_target_id[g] = corpus_ids[new_pos]
            else:
                group_duplicate_ids[g].append(corpus_ids[new_pos])
    corpus = EmbeddingMatrix.create(corpus_ids, corpus_values.astype(np.float32))
    target_vector_of_group = {
        g: corpus.row(group_target_id[g]).astype(np.float64) for g in range(n_groups)
    }

    query_rng = derive_rng(
        config.seed, STREAM_SYNTH_QUERIES, stable_key(config.split)
    )
    ref_values = np.empty((config.n_queries, config.dim), dtype=np.float64)
    txt_values = np.zeros((config.n_queries, config.dim), dtype=np.float64)
    queries: list[QueryRecord] = []
    truth: dict[str, GroundTruth] = {}
    non_target_pool = np.asarray(
        [i for i in corpus_ids], dtype=object
    )
    for i in range(config.n_queries):
        g = i % n_groups
        sig = target_signatures[g]
        attribute = int(query_rng.integers(config.n_attributes))
        offset = 1 + int(query_rng.integers(config.block_size - 1))
        ref_value = (sig[attribute] + offset) % config.block_size

        delta = np.zeros(config.dim)
        delta[attribute * config.block_size + sig[attribute]] = 1.0
        delta[attribute * config.block_size + ref_value] = -1.0

        target_id = group_target_id[g]
        ref = target_vector_of_group[g] - delta
        if config.noise_sigma > 0.0:
            ref = ref + config.noise_sigma * query_rng.standard_normal(config.dim)
        ref_values[i] = ref
        txt_values[i] = delta

        query_id = f"q{i:05d}"
        subset = {target_id}
        while len(subset) < min(6, config.n_corpus):
            pick = str(non_target_pool[int(query_rng.integers(config.n_corpus))])
            subset.add(pick)
        queries.append(
            QueryRecord(
                query_id=query_id,
                ref_image_id=f"{query_id}-ref",
                text_embed_id=f"{query_id}-txt",
                target_id=target_id,
                subset_ids=tuple(sorted(subset)),
            )
        )
        truth[query_id] = GroundTruth(
            query_id=query_id,
            relevant_ids=frozenset({target_id, *group_duplicate_ids[g]}),
        )

    queries_img = EmbeddingMatrix.create(
        [q.ref_image_id for q in queries], ref_values.astype(np.float32)
    )
    queries_txt = EmbeddingMatrix.create(
        [q.text_embed_id for q in queries], txt_values.astype(np.float32)
    )
    manifest = DatasetManifest(
        corpus_ids=tuple(corpus_ids), queries=tuple(queries), split=config.split
    )
    return corpus, queries_img, queries_txt, manifest, truth
