"""Composed-retrieval training and evaluation engine on precomputed embeddings."""

from .evaluator import (
    EvalReport,
    GroundTruth,
    PreferenceRecord,
    map_at_k,
    preference_rate,
    recall_at_k,
    recall_subset_at_k,
    set_relevance,
)
from .miner import (
    HardNegativeSet,
    MinerStats,
    SortedScoreView,
    Strategy,
    below_target_slice,
    mine_all,
    sample_negative,
    strategy_set,
    top2_drops,
    two_drops_set,
)
from .scorer import (
    AdapterParams,
    RankedList,
    embed_image,
    fuse_query,
    init_params,
    rank_corpus,
    relevance_score,
    top_k,
)
from .store import (
    DatasetManifest,
    EmbeddingMatrix,
    QueryRecord,
    load_embeddings,
    load_manifest,
    validate_manifest,
    write_embeddings,
    write_manifest,
)
from .synthgen import SynthConfig, generate
from .trainer import (
    Checkpoint,
    OptimizerState,
    TrainingConfig,
    TrainingLog,
    adamw_step,
    bt_probability,
    load_checkpoint,
    loss_and_gradients,
    nll_loss,
    save_checkpoint,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "AdapterParams",
    "Checkpoint",
    "DatasetManifest",
    "EmbeddingMatrix",
    "EvalReport",
    "GroundTruth",
    "HardNegativeSet",
    "MinerStats",
    "OptimizerState",
    "PreferenceRecord",
    "QueryRecord",
    "RankedList",
    "SortedScoreView",
    "Strategy",
    "SynthConfig",
    "TrainingConfig",
    "TrainingLog",
    "adamw_step",
    "below_target_slice",
    "bt_probability",
    "embed_image",
    "fuse_query",
    "generate",
    "init_params",
    "load_checkpoint",
    "load_embeddings",
    "load_manifest",
    "loss_and_gradients",
    "map_at_k",
    "mine_all",
    "nll_loss",
    "preference_rate",
    "rank_corpus",
    "recall_at_k",
    "recall_subset_at_k",
    "relevance_score",
    "sample_negative",
    "save_checkpoint",
    "set_relevance",
    "strategy_set",
    "top2_drops",
    "top_k",
    "train",
    "two_drops_set",
    "validate_manifest",
    "write_embeddings",
    "write_manifest",
]
