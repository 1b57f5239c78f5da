"""Retrieval metrics and human-preference alignment.

All metric values are percentages in [0, 100].  Recall counts queries whose
target lands in the top-k; the subset variant does the same inside each
query's candidate subset; mAP@k handles multi-ground-truth data.  Preference
rate conditions on the model scoring Set 1 above Set 2 and reports how often
humans agreed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .scorer import AdapterParams, RankedList, fuse_query, embed_image, relevance_score
from .store import EmbeddingMatrix, FormatError, QueryRecord


class MissingTruthError(KeyError):
    """A ranking has no ground-truth entry."""


class UndefinedRateError(RuntimeError):
    """No record satisfied the preference-rate condition; the rate is undefined."""

    def __init__(self, excluded: int):
        super().__init__(
            f"preference rate undefined: all {excluded} records were excluded by the condition"
        )
        self.excluded = excluded


@dataclass(frozen=True)
class GroundTruth:
    query_id: str
    relevant_ids: frozenset[str]

    def __post_init__(self):
        if not self.relevant_ids:
            raise ValueError(f"query {self.query_id!r}: relevant set must be nonempty")


class Choice(Enum):
    SET1 = "set1"
    SET2 = "set2"


@dataclass(frozen=True)
class PreferenceRecord:
    """One human annotation comparing two retrieved 5-image sets."""

    query_id: str
    set1_ids: tuple[str, ...]
    set2_ids: tuple[str, ...]
    human_choice: Choice

    def __post_init__(self):
        if len(self.set1_ids) != 5 or len(self.set2_ids) != 5:
            raise ValueError(
                f"query {self.query_id!r}: preference sets must hold exactly 5 ids"
            )


@dataclass
class EvalReport:
    metrics: dict[str, float]
    query_count: int
    split: str
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.query_count <= 0:
            raise ValueError("query_count must be positive")
        for name, value in self.metrics.items():
            if not 0.0 <= value <= 100.0:
                raise ValueError(f"metric {name!r} = {value} outside [0, 100]")

    def to_jsonable(self) -> dict:
        return {
            "metrics": {k: round(v, 2) for k, v in self.metrics.items()},
            "query_count": self.query_count,
            "split": self.split,
            "config": self.config,
        }


def _truth_for(truth: dict[str, GroundTruth], query_id: str) -> GroundTruth:
    try:
        return truth[query_id]
    except KeyError:
        raise MissingTruthError(f"no ground truth for query {query_id!r}") from None


def _best_relevant_rank(ranking: RankedList, relevant: frozenset[str]) -> int | None:
    for pos, image_id in enumerate(ranking.ids, start=1):
        if image_id in relevant:
            return pos
    return None


def recall_at_k(rankings: list[RankedList], truth: dict[str, GroundTruth], k: int) -> float:
    """Percent of queries whose target appears in the top-k.

    For multi-ground-truth data a query counts as a hit when any relevant
    image makes the top-k.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if not rankings:
        raise ValueError("rankings must be nonempty")
    hits = 0
    for ranking in rankings:
        gt = _truth_for(truth, ranking.query_id)
        rank = _best_relevant_rank(ranking, gt.relevant_ids)
        if rank is not None and rank <= k:
            hits += 1
    return 100.0 * hits / len(rankings)


def recall_subset_at_k(
    subset_rankings: list[RankedList], truth: dict[str, GroundTruth], k: int
) -> float:
    """recall_at_k over rankings already restricted to each query's subset.

    Restricting a full ranking to the subset and re-scoring the subset give
    the same order, so either path may produce the input.
    """
    return recall_at_k(subset_rankings, truth, k)


def restrict_ranking(ranking: RankedList, subset_ids) -> RankedList:
    """Drop entries outside subset_ids, preserving order and rescoring nothing."""
    subset = set(subset_ids)
    entries = tuple((i, s) for i, s in ranking.entries if i in subset)
    target_rank = None
    if ranking.target_rank is not None:
        target_id = ranking.entries[ranking.target_rank - 1][0]
        for pos, (image_id, _) in enumerate(entries, start=1):
            if image_id == target_id:
                target_rank = pos
                break
    return RankedList(query_id=ranking.query_id, entries=entries, target_rank=target_rank)


def map_at_k(rankings: list[RankedList], truth: dict[str, GroundTruth], k: int) -> float:
    """Mean average precision at k, normalized by min(k, |relevant|), as a percent."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if not rankings:
        raise ValueError("rankings must be nonempty")
    ap_sum = 0.0
    for ranking in rankings:
        gt = _truth_for(truth, ranking.query_id)
        relevant = gt.relevant_ids
        hits = 0
        precision_sum = 0.0
        for pos, image_id in enumerate(ranking.ids[:k], start=1):
            if image_id in relevant:
                hits += 1
                precision_sum += hits / pos
        ap_sum += precision_sum / min(k, len(relevant))
    return 100.0 * ap_sum / len(rankings)


def set_relevance(
    params: AdapterParams,
    query: QueryRecord,
    set_ids,
    corpus: EmbeddingMatrix,
    queries_img: EmbeddingMatrix,
    queries_txt: EmbeddingMatrix,
) -> float:
    """Mean relevance score of a retrieved 5-image set under the given params."""
    set_ids = tuple(set_ids)
    if len(set_ids) != 5:
        raise ValueError(f"set must hold exactly 5 ids, got {len(set_ids)}")
    q = fuse_query(
        params, queries_img.row(query.ref_image_id), queries_txt.row(query.text_embed_id)
    )
    scores = [
        relevance_score(params, q, embed_image(params, corpus.row(image_id)))
        for image_id in set_ids
    ]
    return float(np.mean(scores))


@dataclass(frozen=True)
class PreferenceRateResult:
    rate: float  # percent
    evaluated: int  # records satisfying the condition
    excluded: int  # records dropped because s_rel(Set1) <= s_rel(Set2)


def score_preference_records(
    params: AdapterParams,
    records: list[PreferenceRecord],
    corpus: EmbeddingMatrix,
    queries_img: EmbeddingMatrix,
    queries_txt: EmbeddingMatrix,
    query_lookup: dict[str, QueryRecord],
) -> list[tuple[float, float, Choice]]:
    """Per-record (s_rel(Set1), s_rel(Set2), human_choice) triples."""
    scored = []
    for record in records:
        try:
            query = query_lookup[record.query_id]
        except KeyError:
            raise MissingTruthError(
                f"no query record for preference query {record.query_id!r}"
            ) from None
        s1 = set_relevance(params, query, record.set1_ids, corpus, queries_img, queries_txt)
        s2 = set_relevance(params, query, record.set2_ids, corpus, queries_img, queries_txt)
        scored.append((s1, s2, record.human_choice))
    return scored


def rate_from_scored(scored: list[tuple[float, float, Choice]]) -> PreferenceRateResult:
    """Conditional agreement rate; records with s1 <= s2 (ties included) are excluded."""
    evaluated = [(s1, s2, choice) for s1, s2, choice in scored if s1 > s2]
    excluded = len(scored) - len(evaluated)
    if not evaluated:
        raise UndefinedRateError(excluded=excluded)
    agreements = sum(1 for _, _, choice in evaluated if choice is Choice.SET1)
    return PreferenceRateResult(
        rate=100.0 * agreements / len(evaluated),
        evaluated=len(evaluated),
        excluded=excluded,
    )


def preference_rate(
    params: AdapterParams,
    records: list[PreferenceRecord],
    corpus: EmbeddingMatrix,
    queries_img: EmbeddingMatrix,
    queries_txt: EmbeddingMatrix,
    query_lookup: dict[str, QueryRecord],
) -> PreferenceRateResult:
    """P(humans chose Set 1 | model scored Set 1 above Set 2), as a percent.

    Raises UndefinedRateError when no record satisfies the condition.
    """
    if not records:
        raise ValueError("records must be nonempty")
    scored = score_preference_records(
        params, records, corpus, queries_img, queries_txt, query_lookup
    )
    return rate_from_scored(scored)


def load_truth(source) -> dict[str, GroundTruth]:
    """Read JSON-line ground truth: {query_id, relevant_ids: [...]}."""
    truth = {}
    with open(Path(source), "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
                gt = GroundTruth(
                    query_id=str(record["query_id"]),
                    relevant_ids=frozenset(str(i) for i in record["relevant_ids"]),
                )
            except (json.JSONDecodeError, KeyError, ValueError) as exc:
                raise FormatError(f"truth file line {line_no}: {exc}") from None
            truth[gt.query_id] = gt
    return truth


def write_truth(truth: dict[str, GroundTruth], destination) -> None:
    with open(Path(destination), "w", encoding="utf-8") as fh:
        for query_id in truth:
            gt = truth[query_id]
            fh.write(
                json.dumps(
                    {"query_id": gt.query_id, "relevant_ids": sorted(gt.relevant_ids)},
                    sort_keys=True,
                )
                + "\n"
            )


def load_preference_records(source) -> list[PreferenceRecord]:
    """Read JSON-line preference annotations."""
    records = []
    with open(Path(source), "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                raw = json.loads(line)
                records.append(
                    PreferenceRecord(
                        query_id=str(raw["query_id"]),
                        set1_ids=tuple(str(i) for i in raw["set1_ids"]),
                        set2_ids=tuple(str(i) for i in raw["set2_ids"]),
                        human_choice=Choice(raw["choice"]),
                    )
                )
            except (json.JSONDecodeError, KeyError, ValueError) as exc:
                raise FormatError(f"preference file line {line_no}: {exc}") from None
    return records


def load_rankings(source) -> list[RankedList]:
    """Read JSON-line rankings: {query_id, ids: [...], scores: [...]}."""
    rankings = []
    with open(Path(source), "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                raw = json.loads(line)
                ids = [str(i) for i in raw["ids"]]
                scores = [float(s) for s in raw["scores"]]
                if len(ids) != len(scores):
                    raise ValueError("ids and scores length mismatch")
                rankings.append(
                    RankedList(
                        query_id=str(raw["query_id"]),
                        entries=tuple(zip(ids, scores)),
                        target_rank=raw.get("target_rank"),
                    )
                )
            except (json.JSONDecodeError, KeyError, ValueError) as exc:
                raise FormatError(f"rankings file line {line_no}: {exc}") from None
    return rankings
