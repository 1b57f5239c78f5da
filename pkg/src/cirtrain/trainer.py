"""Preference training of the scoring adapter against mined hard negatives.

Each example pairs the query's target (positive) with one sampled negative;
the model maximizes the pairwise preference probability sigmoid(s_pos - s_neg).
Gradients are analytic (through the normalizations, projections, and the
temperature) and updates use decoupled-weight-decay Adam.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .evaluator import GroundTruth, recall_at_k
from .miner import HardNegativeSet, MinerStats, Strategy, mine_all, sample_epoch_negatives
from .scorer import AdapterParams, DegenerateQueryError, init_params, rank_all
from .seeding import STREAM_SHUFFLE, derive_rng
from .store import (
    DTYPE_CHECKPOINT,
    DatasetManifest,
    EmbeddingMatrix,
    FormatError,
    MAGIC,
    VERSION,
    read_header,
    validate_manifest,
)

PARAM_NAMES = ("w_fuse", "b_fuse", "w_img", "b_img", "log_inv_tau")

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    """TrainingConfig violates one of its invariants."""


class NonFiniteGradError(RuntimeError):
    """A gradient block went NaN or infinite."""


class TrainError(RuntimeError):
    """Training aborted; message carries epoch/batch context."""


@dataclass
class TrainingConfig:
    n_epoch: int
    n_def: int = 6
    batch_size: int = 64
    learning_rate: float = 1e-3
    weight_decay: float = 0.01
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    inv_tau_init: float = 20.0
    strategy: Strategy = Strategy.TWO_DROPS
    k: int = 100
    d_out: int | None = None  # defaults to the input dimension
    eval_every: int = 0  # 0 disables in-loop recall snapshots
    eval_k: int = 10

    def __post_init__(self):
        if isinstance(self.strategy, str):
            self.strategy = Strategy(self.strategy)
        self.validate()

    def validate(self) -> None:
        if self.n_epoch < 1:
            raise ConfigError("n_epoch must be >= 1")
        if self.n_def < 1:
            raise ConfigError("n_def must be >= 1")
        if self.n_def > self.n_epoch:
            raise ConfigError(
                f"n_def must be <= n_epoch (got n_def={self.n_def}, n_epoch={self.n_epoch})"
            )
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")
        for name in ("adam_beta1", "adam_beta2"):
            beta = getattr(self, name)
            if not 0.0 < beta < 1.0:
                raise ConfigError(f"{name} must be in (0, 1)")
        if self.adam_eps <= 0:
            raise ConfigError("adam_eps must be positive")
        if self.inv_tau_init <= 0:
            raise ConfigError("inv_tau_init must be positive")
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if self.eval_every < 0:
            raise ConfigError("eval_every must be >= 0")

    @property
    def mining_interval(self) -> int:
        return self.n_epoch // self.n_def

    def to_jsonable(self) -> dict:
        d = asdict(self)
        d["strategy"] = self.strategy.value
        return d

    def canonical_json(self) -> str:
        return json.dumps(self.to_jsonable(), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()

    @staticmethod
    def from_dict(raw: dict) -> "TrainingConfig":
        known = {f for f in TrainingConfig.__dataclass_fields__}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return TrainingConfig(**raw)


@dataclass
class OptimizerState:
    """Adam moment accumulators shaped like the parameters."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @staticmethod
    def zeros_like(params: AdapterParams) -> "OptimizerState":
        m = {name: np.zeros_like(arr) for name, arr in params.named_arrays()}
        v = {name: np.zeros_like(arr) for name, arr in params.named_arrays()}
        m["log_inv_tau"] = np.zeros(())
        v["log_inv_tau"] = np.zeros(())
        return OptimizerState(m=m, v=v, step=0)

    def copy(self) -> "OptimizerState":
        return OptimizerState(
            m={k: np.array(a) for k, a in self.m.items()},
            v={k: np.array(a) for k, a in self.v.items()},
            step=self.step,
        )


def mining_epochs(n_epoch: int, n_def: int) -> list[int]:
    """Epochs at which the negative sets are (re)defined, warm-up included."""
    interval = n_epoch // n_def
    return [e for e in range(n_epoch) if e == 0 or e % interval == 0]


def bt_probability(s_pos: float, s_neg: float) -> float:
    """Pairwise preference probability sigmoid(s_pos - s_neg), overflow-safe."""
    gap = float(s_pos) - float(s_neg)
    if gap >= 0:
        return 1.0 / (1.0 + math.exp(-gap))
    e = math.exp(gap)
    return e / (1.0 + e)


def nll_loss(s_pos: float, s_neg: float) -> float:
    """Negative log preference probability, as a stable softplus of the gap.

    Never computed as -log(bt_probability(...)): the fused form stays finite
    for arbitrarily large gaps.
    """
    return float(np.logaddexp(0.0, -(float(s_pos) - float(s_neg))))


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _norm_rows(u: np.ndarray, what: str) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(u, axis=1)
    bad = np.flatnonzero(norms < 1e-12)
    if bad.size:
        raise DegenerateQueryError(f"{what}: example {int(bad[0])} projects to norm 0")
    return u / norms[:, None], norms


def loss_and_gradients(
    params: AdapterParams, batch
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean pairwise NLL over a batch of (x_img, x_txt, pos, neg) tuples.

    Returns the loss and analytic partials for every parameter block,
    including the temperature.  All math runs in float64.
    """
    if len(batch) == 0:
        raise ValueError("batch must be nonempty")
    x_img = np.stack([np.asarray(b[0], dtype=np.float64) for b in batch])
    x_txt = np.stack([np.asarray(b[1], dtype=np.float64) for b in batch])
    pos = np.stack([np.asarray(b[2], dtype=np.float64) for b in batch])
    neg = np.stack([np.asarray(b[3], dtype=np.float64) for b in batch])
    return loss_and_gradients_arrays(params, x_img, x_txt, pos, neg)


def loss_and_gradients_arrays(
    params: AdapterParams,
    x_img: np.ndarray,
    x_txt: np.ndarray,
    pos: np.ndarray,
    neg: np.ndarray,
) -> tuple[float, dict[str, np.ndarray]]:
    n = x_img.shape[0]
    z = np.concatenate([x_img, x_txt], axis=1)

    u_q = z @ params.w_fuse.T + params.b_fuse
    q, nq = _norm_rows(u_q, "fuse_query")
    u_p = pos @ params.w_img.T + params.b_img
    p_hat, npos = _norm_rows(u_p, "embed_image(pos)")
    u_n = neg @ params.w_img.T + params.b_img
    n_hat, nneg = _norm_rows(u_n, "embed_image(neg)")

    e = math.exp(params.log_inv_tau)
    gaps = e * (np.einsum("ij,ij->i", q, p_hat) - np.einsum("ij,ij->i", q, n_hat))
    loss = float(np.mean(np.logaddexp(0.0, -gaps)))

    # d(mean loss)/d(gap_i) = (sigmoid(gap_i) - 1) / n
    d_gap = (_stable_sigmoid(gaps) - 1.0) / n

    g_tau = float(np.dot(d_gap, gaps))  # d gap / d log_inv_tau == gap
    g_q = d_gap[:, None] * e * (p_hat - n_hat)
    g_p = d_gap[:, None] * e * q
    g_n = -d_gap[:, None] * e * q

    def back_norm(g, y, norms):
        # y = u / |u|  =>  dL/du = (g - (g.y) y) / |u|
        return (g - np.einsum("ij,ij->i", g, y)[:, None] * y) / norms[:, None]

    g_uq = back_norm(g_q, q, nq)
    g_up = back_norm(g_p, p_hat, npos)
    g_un = back_norm(g_n, n_hat, nneg)

    grads = {
        "w_fuse": g_uq.T @ z,
        "b_fuse": g_uq.sum(axis=0),
        "w_img": g_up.T @ pos + g_un.T @ neg,
        "b_img": (g_up + g_un).sum(axis=0),
        "log_inv_tau": np.asarray(g_tau),
    }
    return loss, grads


def _param_array(params: AdapterParams, name: str) -> np.ndarray:
    if name == "log_inv_tau":
        return np.asarray(params.log_inv_tau)
    return getattr(params, name)


def _set_param_array(params: AdapterParams, name: str, value: np.ndarray) -> None:
    if name == "log_inv_tau":
        params.log_inv_tau = float(value)
    else:
        setattr(params, name, value)


def adamw_step(
    params: AdapterParams,
    grads: dict[str, np.ndarray],
    opt_state: OptimizerState,
    config: TrainingConfig,
) -> tuple[AdapterParams, OptimizerState]:
    """One decoupled-weight-decay Adam update, then the temperature clamp.

    Decay touches every block except log_inv_tau.
    """
    for name in PARAM_NAMES:
        if not np.isfinite(grads[name]).all():
            raise NonFiniteGradError(f"non-finite gradient in block {name!r}")

    t = opt_state.step + 1
    b1, b2 = config.adam_beta1, config.adam_beta2
    bias1 = 1.0 - b1**t
    bias2 = 1.0 - b2**t
    for name in PARAM_NAMES:
        g = np.asarray(grads[name], dtype=np.float64)
        opt_state.m[name] = b1 * opt_state.m[name] + (1.0 - b1) * g
        opt_state.v[name] = b2 * opt_state.v[name] + (1.0 - b2) * g * g
        m_hat = opt_state.m[name] / bias1
        v_hat = opt_state.v[name] / bias2
        value = _param_array(params, name) - config.learning_rate * m_hat / (
            np.sqrt(v_hat) + config.adam_eps
        )
        if config.weight_decay > 0.0 and name != "log_inv_tau":
            value = value - config.learning_rate * config.weight_decay * value
        _set_param_array(params, name, value)
    opt_state.step = t
    params.clamp_temperature()
    return params, opt_state


@dataclass
class Checkpoint:
    params: AdapterParams
    opt_state: OptimizerState
    epoch: int  # last completed epoch
    config_hash: str
    rng_state: dict

    def to_payload(self) -> bytes:
        def pack(arr: np.ndarray) -> dict:
            arr = np.asarray(arr, dtype=np.float64)
            return {
                "shape": list(arr.shape),
                "data": base64.b64encode(arr.astype("<f8").tobytes()).decode("ascii"),
            }

        doc = {
            "kind": "checkpoint",
            "epoch": self.epoch,
            "config_hash": self.config_hash,
            "rng_state": self.rng_state,
            "params": {
                **{name: pack(arr) for name, arr in self.params.named_arrays()},
                "log_inv_tau": pack(np.asarray(self.params.log_inv_tau)),
            },
            "opt_m": {name: pack(self.opt_state.m[name]) for name in PARAM_NAMES},
            "opt_v": {name: pack(self.opt_state.v[name]) for name in PARAM_NAMES},
            "opt_step": self.opt_state.step,
        }
        return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")

    @staticmethod
    def from_payload(payload: bytes) -> "Checkpoint":
        doc = json.loads(payload.decode("utf-8"))
        if doc.get("kind") != "checkpoint":
            raise FormatError("checkpoint payload has wrong kind")

        def unpack(entry: dict) -> np.ndarray:
            data = base64.b64decode(entry["data"])
            return np.frombuffer(data, dtype="<f8").reshape(entry["shape"]).copy()

        p = doc["params"]
        params = AdapterParams(
            w_fuse=unpack(p["w_fuse"]),
            b_fuse=unpack(p["b_fuse"]),
            w_img=unpack(p["w_img"]),
            b_img=unpack(p["b_img"]),
            log_inv_tau=float(unpack(p["log_inv_tau"])),
        )
        opt = OptimizerState(
            m={name: unpack(doc["opt_m"][name]) for name in PARAM_NAMES},
            v={name: unpack(doc["opt_v"][name]) for name in PARAM_NAMES},
            step=int(doc["opt_step"]),
        )
        return Checkpoint(
            params=params,
            opt_state=opt,
            epoch=int(doc["epoch"]),
            config_hash=str(doc["config_hash"]),
            rng_state=dict(doc["rng_state"]),
        )


def save_checkpoint(checkpoint: Checkpoint, destination) -> None:
    import struct

    payload = checkpoint.to_payload()
    with open(Path(destination), "wb") as fh:
        fh.write(struct.pack("<4sBBHIQ", MAGIC, VERSION, DTYPE_CHECKPOINT, 0, 0, len(payload)))
        fh.write(payload)


def load_checkpoint(source) -> Checkpoint:
    with open(Path(source), "rb") as fh:
        dtype_code, _dim, count = read_header(fh)
        if dtype_code != DTYPE_CHECKPOINT:
            raise FormatError(f"not a checkpoint file (dtype code {dtype_code})")
        payload = fh.read(count)
        if len(payload) < count:
            from .store import CorruptionError

            raise CorruptionError("checkpoint payload truncated")
    return Checkpoint.from_payload(payload)


@dataclass
class TrainingLog:
    entries: list[dict] = field(default_factory=list)

    def append(self, entry: dict) -> None:
        self.entries.append(entry)

    def to_jsonl(self) -> str:
        return "".join(
            json.dumps(e, sort_keys=True, separators=(",", ":")) + "\n" for e in self.entries
        )

    def write(self, destination) -> None:
        Path(destination).write_text(self.to_jsonl(), encoding="utf-8")


def train(
    config: TrainingConfig,
    manifest: DatasetManifest,
    corpus: EmbeddingMatrix,
    queries_img: EmbeddingMatrix,
    queries_txt: EmbeddingMatrix,
    init: Checkpoint | None = None,
    threads: int = 1,
) -> tuple[Checkpoint, TrainingLog]:
    """Run the full training loop and return the final checkpoint and log.

    Epoch 0 warms up with the whole corpus minus the target as every query's
    negative pool; the pools are redefined under the configured strategy at
    every epoch divisible by n_epoch // n_def.  One negative is sampled per
    query per epoch.  Runs are bit-reproducible given (config, seed),
    independent of the thread count.

    Resuming restarts at init.epoch + 1 and re-mines immediately from the
    restored parameters; when that epoch is a mining boundary this matches
    the uninterrupted run exactly.
    """
    config.validate()
    report = validate_manifest(manifest, corpus, queries_img, queries_txt)
    if not report.ok:
        raise TrainError(
            f"manifest failed validation with {len(report.issues)} issue(s); "
            f"first: {report.issues[0]}"
        )
    if not manifest.queries:
        raise TrainError("manifest has no queries")

    if init is not None:
        if init.config_hash != config.config_hash():
            raise ConfigError("checkpoint config hash does not match this config")
        params = init.params.copy()
        opt_state = init.opt_state.copy()
        start_epoch = init.epoch + 1
    else:
        params = init_params(
            corpus.dim,
            config.d_out or corpus.dim,
            inv_tau_init=config.inv_tau_init,
            seed=config.seed,
        )
        opt_state = OptimizerState.zeros_like(params)
        start_epoch = 0

    interval = config.mining_interval
    sets: dict[str, HardNegativeSet] | None = None
    stats: MinerStats | None = None
    log = TrainingLog()
    queries = manifest.queries
    n_queries = len(queries)
    truth_by_query = {
        q.query_id: GroundTruth(q.query_id, frozenset({q.target_id})) for q in queries
    }

    for epoch in range(start_epoch, config.n_epoch):
        try:
            mined_this_epoch = False
            if epoch == 0 or (epoch % interval == 0) or sets is None:
                snapshot = params.copy()
                sets, stats = mine_all(
                    snapshot,
                    manifest,
                    corpus,
                    queries_img,
                    queries_txt,
                    strategy=config.strategy,
                    k=config.k,
                    epoch=epoch,
                    threads=threads,
                )
                mined_this_epoch = True
                logger.info(
                    "epoch %d: mined %s sets (mean size %.1f, %d fallbacks)",
                    epoch, stats.strategy.value, stats.mean_size, stats.fallback_count,
                )

            negatives = sample_epoch_negatives(sets, config.seed, epoch)
            order = derive_rng(config.seed, STREAM_SHUFFLE, epoch).permutation(n_queries)

            loss_sum = 0.0
            for batch_no, start in enumerate(range(0, n_queries, config.batch_size)):
                idx = order[start : start + config.batch_size]
                batch_queries = [queries[i] for i in idx]
                try:
                    x_img = np.stack([queries_img.row(q.ref_image_id) for q in batch_queries])
                    x_txt = np.stack([queries_txt.row(q.text_embed_id) for q in batch_queries])
                    pos = np.stack([corpus.row(q.target_id) for q in batch_queries])
                    neg = np.stack(
                        [corpus.row(negatives[q.query_id]) for q in batch_queries]
                    )
                    loss, grads = loss_and_gradients_arrays(
                        params,
                        x_img.astype(np.float64),
                        x_txt.astype(np.float64),
                        pos.astype(np.float64),
                        neg.astype(np.float64),
                    )
                except DegenerateQueryError as exc:
                    first = batch_queries[0].query_id
                    raise TrainError(
                        f"epoch {epoch} batch {batch_no} (first query {first!r}): {exc}"
                    ) from exc
                params, opt_state = adamw_step(params, grads, opt_state, config)
                loss_sum += loss * len(batch_queries)

            entry = {
                "epoch": epoch,
                "mean_loss": loss_sum / n_queries,
                "mining": stats.to_jsonable() if mined_this_epoch else None,
            }
            if config.eval_every > 0 and (
                (epoch + 1) % config.eval_every == 0 or epoch == config.n_epoch - 1
            ):
                rankings = rank_all(params, manifest, corpus, queries_img, queries_txt)
                entry["recall"] = {
                    "k": config.eval_k,
                    "value": recall_at_k(rankings, truth_by_query, config.eval_k),
                }
            logger.info("epoch %d: mean loss %.6f", epoch, entry["mean_loss"])
            log.append(entry)
        except (NonFiniteGradError,) as exc:
            raise TrainError(f"epoch {epoch}: {exc}") from exc

    checkpoint = Checkpoint(
        params=params,
        opt_state=opt_state,
        epoch=config.n_epoch - 1,
        config_hash=config.config_hash(),
        rng_state={"seed": config.seed, "next_epoch": config.n_epoch},
    )
    return checkpoint, log
