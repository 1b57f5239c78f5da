"""Hard-negative set mining over sorted relevance scores.

The default rule keeps the images that sit between the two largest adjacent
score drops below the target: items above the first drop score too close to
the target (likely relevant), items past the second are easy.  Three ablation
strategies (whole corpus, plain top-k, top-k after the target) are kept for
comparison runs.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from statistics import median

import numpy as np

from .scorer import AdapterParams, RankedList, rank_corpus
from .seeding import query_rng
from .store import DatasetManifest, EmbeddingMatrix


class Strategy(Enum):
    TWO_DROPS = "two-drops"
    ALL_CORPUS = "all"
    TOP_K = "top-k"
    AFTER_TARGET_TOP_K = "after-target-top-k"


class InsufficientDrops(Exception):
    """Fewer than two adjacent score differences below the target."""


class FallbackRequired(Exception):
    """Strategy cannot produce a set for this query; caller must fall back."""


@dataclass(frozen=True)
class SortedScoreView:
    """Descending scores with parallel image ids for one query; ranks are 1-based."""

    query_id: str
    scores: np.ndarray  # float64, non-increasing
    image_ids: tuple[str, ...]
    target_pos: int

    @staticmethod
    def from_ranked(ranked: RankedList) -> "SortedScoreView":
        if ranked.target_rank is None:
            raise ValueError(f"query {ranked.query_id!r}: target was not scored")
        return SortedScoreView(
            query_id=ranked.query_id,
            scores=np.asarray(ranked.scores, dtype=np.float64),
            image_ids=ranked.ids,
            target_pos=ranked.target_rank,
        )

    @property
    def n_img(self) -> int:
        return len(self.image_ids)

    @property
    def target_id(self) -> str:
        return self.image_ids[self.target_pos - 1]

    @property
    def target_score(self) -> float:
        return float(self.scores[self.target_pos - 1])

    def score_at(self, rank: int) -> float:
        return float(self.scores[rank - 1])

    def id_at(self, rank: int) -> str:
        return self.image_ids[rank - 1]


@dataclass(frozen=True)
class HardNegativeSet:
    """Per-query negative pool; never contains the query's target."""

    query_id: str
    negative_ids: tuple[str, ...]  # sorted ascending for deterministic sampling
    strategy: Strategy
    epoch_defined: int

    def __post_init__(self):
        if not self.negative_ids:
            raise ValueError("hard negative set must be nonempty")

    def __len__(self) -> int:
        return len(self.negative_ids)


@dataclass(frozen=True)
class MinerStats:
    epoch: int
    strategy: Strategy
    query_count: int
    mean_size: float
    median_size: float
    min_size: int
    max_size: int
    fallback_count: int

    def to_jsonable(self) -> dict:
        return {
            "epoch": self.epoch,
            "strategy": self.strategy.value,
            "query_count": self.query_count,
            "mean_size": self.mean_size,
            "median_size": self.median_size,
            "min_size": self.min_size,
            "max_size": self.max_size,
            "fallback_count": self.fallback_count,
        }


def below_target_slice(view: SortedScoreView, target_score: float) -> range:
    """Ranks whose score is strictly below target_score (a suffix; may be empty)."""
    # Scores are descending, so negating them gives an ascending array and
    # searchsorted finds the first strictly-smaller score.
    first_below = int(np.searchsorted(-view.scores, -target_score, side="right"))
    return range(first_below + 1, view.n_img + 1)


def _eligible_drop_ranks(view: SortedScoreView, below: range) -> range:
    # d_j needs a successor score, so the last corpus rank never qualifies.
    if len(below) == 0:
        return range(0)
    return range(below.start, min(below.stop, view.n_img))


def top2_drops(view: SortedScoreView, below: range) -> tuple[int, int]:
    """Ranks of the two largest adjacent score drops inside the below-target suffix.

    Ties go to the smaller rank.  Raises InsufficientDrops when fewer than two
    adjacent differences exist.
    """
    eligible = _eligible_drop_ranks(view, below)
    if len(eligible) < 2:
        raise InsufficientDrops(
            f"query {view.query_id!r}: {len(eligible)} eligible score drops, need 2"
        )
    ranks = np.arange(eligible.start, eligible.stop)
    diffs = view.scores[ranks - 1] - view.scores[ranks]
    order = np.lexsort((ranks, -diffs))
    k1 = int(ranks[order[0]])
    k2 = int(ranks[order[1]])
    return k1, k2


def two_drops_set(view: SortedScoreView, target_score: float, epoch: int = 0) -> HardNegativeSet:
    """Members are the ranks strictly between the two largest drops.

    The interval is (min(k1,k2), max(k1,k2)], restricted to scores strictly
    below the target.
    """
    below = below_target_slice(view, target_score)
    try:
        k1, k2 = top2_drops(view, below)
    except InsufficientDrops as exc:
        raise FallbackRequired(str(exc)) from exc
    lo, hi = min(k1, k2) + 1, max(k1, k2)
    ids = [
        view.id_at(rank)
        for rank in range(lo, hi + 1)
        if view.score_at(rank) < target_score
    ]
    return HardNegativeSet(
        query_id=view.query_id,
        negative_ids=tuple(sorted(ids)),
        strategy=Strategy.TWO_DROPS,
        epoch_defined=epoch,
    )


def all_corpus_set(view: SortedScoreView, epoch: int = 0) -> HardNegativeSet:
    ids = [i for i in view.image_ids if i != view.target_id]
    if not ids:
        raise FallbackRequired(f"query {view.query_id!r}: corpus has no non-target image")
    return HardNegativeSet(
        query_id=view.query_id,
        negative_ids=tuple(sorted(ids)),
        strategy=Strategy.ALL_CORPUS,
        epoch_defined=epoch,
    )


def strategy_set(
    view: SortedScoreView,
    target_score: float,
    strategy: Strategy,
    k: int = 100,
    epoch: int = 0,
) -> HardNegativeSet:
    """Build the negative set for one query under the requested strategy."""
    if strategy is Strategy.ALL_CORPUS:
        return all_corpus_set(view, epoch=epoch)
    if strategy is Strategy.TWO_DROPS:
        return two_drops_set(view, target_score, epoch=epoch)
    if k < 1:
        raise ValueError("k must be >= 1 for top-k strategies")

    if strategy is Strategy.TOP_K:
        ids = []
        for rank in range(1, view.n_img + 1):
            image_id = view.id_at(rank)
            if image_id == view.target_id:
                continue
            ids.append(image_id)
            if len(ids) == k:
                break
        if not ids:
            raise FallbackRequired(f"query {view.query_id!r}: no non-target image to rank")
        return HardNegativeSet(
            query_id=view.query_id,
            negative_ids=tuple(sorted(ids)),
            strategy=Strategy.TOP_K,
            epoch_defined=epoch,
        )

    if strategy is Strategy.AFTER_TARGET_TOP_K:
        below = below_target_slice(view, target_score)
        if len(below) == 0:
            raise FallbackRequired(
                f"query {view.query_id!r}: no score strictly below the target"
            )
        ids = [view.id_at(rank) for rank in list(below)[:k]]
        return HardNegativeSet(
            query_id=view.query_id,
            negative_ids=tuple(sorted(ids)),
            strategy=Strategy.AFTER_TARGET_TOP_K,
            epoch_defined=epoch,
        )

    raise ValueError(f"unknown strategy {strategy!r}")


def _resolve_with_fallback(
    view: SortedScoreView, strategy: Strategy, k: int, epoch: int
) -> tuple[HardNegativeSet, bool]:
    """Apply the strategy; on failure use the below-target suffix, then the whole corpus."""
    target_score = view.target_score
    try:
        return strategy_set(view, target_score, strategy, k=k, epoch=epoch), False
    except FallbackRequired:
        below = below_target_slice(view, target_score)
        if len(below) > 0:
            ids = tuple(sorted(view.id_at(rank) for rank in below))
            return (
                HardNegativeSet(
                    query_id=view.query_id,
                    negative_ids=ids,
                    strategy=strategy,
                    epoch_defined=epoch,
                ),
                True,
            )
        return all_corpus_set(view, epoch=epoch), True


def mine_all(
    params_snapshot: AdapterParams,
    manifest: DatasetManifest,
    corpus: EmbeddingMatrix,
    queries_img: EmbeddingMatrix,
    queries_txt: EmbeddingMatrix,
    strategy: Strategy = Strategy.TWO_DROPS,
    k: int = 100,
    epoch: int = 0,
    threads: int = 1,
) -> tuple[dict[str, HardNegativeSet], MinerStats]:
    """Mine one negative set per query from a frozen parameter snapshot.

    Epoch 0 is the warm-up: every query gets the whole corpus minus its
    target, whatever strategy was requested.  Per-query fallbacks are
    resolved internally and counted, never fatal.
    """
    if epoch == 0:
        strategy_used = Strategy.ALL_CORPUS
    else:
        strategy_used = strategy

    def mine_one(query) -> tuple[HardNegativeSet, bool]:
        ranked = rank_corpus(params_snapshot, query, corpus, queries_img, queries_txt)
        view = SortedScoreView.from_ranked(ranked)
        if strategy_used is Strategy.ALL_CORPUS:
            return all_corpus_set(view, epoch=epoch), False
        return _resolve_with_fallback(view, strategy_used, k, epoch)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(mine_one, manifest.queries))
    else:
        results = [mine_one(q) for q in manifest.queries]

    sets = {q.query_id: s for q, (s, _) in zip(manifest.queries, results)}
    sizes = [len(s) for s, _ in results]
    fallbacks = sum(1 for _, fell_back in results if fell_back)
    stats = MinerStats(
        epoch=epoch,
        strategy=strategy_used,
        query_count=len(sizes),
        mean_size=float(np.mean(sizes)) if sizes else 0.0,
        median_size=float(median(sizes)) if sizes else 0.0,
        min_size=min(sizes) if sizes else 0,
        max_size=max(sizes) if sizes else 0,
        fallback_count=fallbacks,
    )
    return sets, stats


def sample_negative(negative_set: HardNegativeSet, rng: np.random.Generator) -> str:
    """Draw one member uniformly; deterministic given the generator state."""
    ids = negative_set.negative_ids
    return ids[int(rng.integers(len(ids)))]


def sample_epoch_negatives(
    sets: dict[str, HardNegativeSet], seed: int, epoch: int
) -> dict[str, str]:
    """One uniform draw per query from per-(query, epoch) streams.

    Streams depend only on (seed, epoch, query_id), so parallel or reordered
    epochs reproduce serial runs.
    """
    return {
        query_id: sample_negative(negative_set, query_rng(seed, epoch, query_id))
        for query_id, negative_set in sets.items()
    }
