"""Command-line entry point.

Subcommands: synth, validate, rank, mine, train, eval, prefrate.
Exit codes: 0 success, 1 validation/input error, 2 runtime error.  Errors go
to stderr as a single JSON object.  Every subcommand prints its effective
configuration to stdout first, so runs are auditable and reproducible.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

from . import evaluator, miner, scorer, store, synthgen, trainer

log = logging.getLogger("cirtrain")

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2

_VALIDATION_ERRORS = (
    store.StoreError,
    trainer.ConfigError,
    synthgen.SynthConfigError,
    scorer.DegenerateQueryError,
    evaluator.MissingTruthError,
    trainer.TrainError,
    KeyError,
    ValueError,
    FileNotFoundError,
)


def _load_config_file(path: Path) -> dict:
    raw = Path(path).read_bytes()
    if path.suffix.lower() == ".toml":
        try:
            import tomllib  # py >= 3.11
        except ModuleNotFoundError:
            import tomli as tomllib
        return tomllib.loads(raw.decode("utf-8"))
    return json.loads(raw.decode("utf-8"))


def _print_effective(command: str, config: dict) -> None:
    print(json.dumps({"command": command, "effective_config": config}, sort_keys=True))


def _load_dataset(args, split: str = "train"):
    corpus = store.load_embeddings(args.corpus)
    queries_img = store.load_embeddings(args.query_img)
    queries_txt = store.load_embeddings(args.query_txt)
    manifest = store.load_manifest(args.manifest, corpus.ids, split=split)
    log.info(
        "loaded dataset: %d corpus images (dim %d), %d queries",
        corpus.count, corpus.dim, manifest.n_data,
    )
    return manifest, corpus, queries_img, queries_txt


def _params_from_checkpoint_or_init(checkpoint_path, corpus_dim: int, seed: int):
    if checkpoint_path:
        return trainer.load_checkpoint(checkpoint_path).params
    return scorer.init_params(corpus_dim, seed=seed)


def _cmd_synth(args) -> int:
    raw = _load_config_file(Path(args.config))
    if args.split is not None:
        raw["split"] = args.split
    if args.seed is not None:
        raw["seed"] = args.seed
    config = synthgen.SynthConfig(**raw)
    _print_effective("synth", dataclasses.asdict(config))
    corpus, queries_img, queries_txt, manifest, truth = synthgen.generate(config)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    store.write_embeddings(corpus, out / "corpus.emb")
    store.write_embeddings(queries_img, out / "query_img.emb")
    store.write_embeddings(queries_txt, out / "query_txt.emb")
    store.write_manifest(manifest.queries, out / "manifest.jsonl")
    evaluator.write_truth(truth, out / "truth.jsonl")
    print(
        json.dumps(
            {
                "out_dir": str(out),
                "n_corpus": corpus.count,
                "n_queries": manifest.n_data,
                "dim": corpus.dim,
            },
            sort_keys=True,
        )
    )
    return EXIT_OK


def _cmd_validate(args) -> int:
    manifest, corpus, queries_img, queries_txt = _load_dataset(args, split=args.split)
    report = store.validate_manifest(manifest, corpus, queries_img, queries_txt)
    _print_effective(
        "validate",
        {"manifest": str(args.manifest), "corpus": str(args.corpus), "split": args.split},
    )
    print(json.dumps({"ok": report.ok, "issues": report.to_jsonable()}, sort_keys=True))
    return EXIT_OK if report.ok else EXIT_VALIDATION


def _cmd_rank(args) -> int:
    manifest, corpus, queries_img, queries_txt = _load_dataset(args)
    params = _params_from_checkpoint_or_init(args.checkpoint, corpus.dim, args.seed or 0)
    _print_effective(
        "rank",
        {
            "checkpoint": str(args.checkpoint) if args.checkpoint else None,
            "k": args.k,
            "out": str(args.out),
        },
    )
    with open(args.out, "w", encoding="utf-8") as fh:
        for query in manifest.queries:
            ranked = scorer.rank_corpus(params, query, corpus, queries_img, queries_txt)
            ids = list(ranked.ids[: args.k])
            scores = list(ranked.scores[: args.k])
            fh.write(
                json.dumps(
                    {
                        "query_id": ranked.query_id,
                        "ids": ids,
                        "scores": scores,
                        "target_rank": ranked.target_rank,
                    },
                    sort_keys=True,
                )
                + "\n"
            )
    return EXIT_OK


def _cmd_mine(args) -> int:
    manifest, corpus, queries_img, queries_txt = _load_dataset(args)
    params = _params_from_checkpoint_or_init(args.checkpoint, corpus.dim, args.seed or 0)
    strategy = miner.Strategy(args.strategy)
    _print_effective(
        "mine",
        {
            "checkpoint": str(args.checkpoint) if args.checkpoint else None,
            "strategy": strategy.value,
            "k": args.k,
            "epoch": args.epoch,
        },
    )
    sets, stats = miner.mine_all(
        params,
        manifest,
        corpus,
        queries_img,
        queries_txt,
        strategy=strategy,
        k=args.k,
        epoch=args.epoch,
        threads=args.threads,
    )
    with open(args.out, "w", encoding="utf-8") as fh:
        for query in manifest.queries:
            s = sets[query.query_id]
            fh.write(
                json.dumps(
                    {
                        "query_id": s.query_id,
                        "negative_ids": list(s.negative_ids),
                        "strategy": s.strategy.value,
                        "epoch": s.epoch_defined,
                    },
                    sort_keys=True,
                )
                + "\n"
            )
        fh.write(json.dumps({"miner_stats": stats.to_jsonable()}, sort_keys=True) + "\n")
    return EXIT_OK


_CONFIG_OVERRIDES = (
    "n_epoch",
    "n_def",
    "batch_size",
    "learning_rate",
    "weight_decay",
    "strategy",
    "k",
    "eval_every",
    "eval_k",
)


def _cmd_train(args) -> int:
    raw = _load_config_file(Path(args.config)) if args.config else {}
    for name in _CONFIG_OVERRIDES:
        value = getattr(args, name, None)
        if value is not None:
            raw[name] = value
    if args.seed is not None:
        raw["seed"] = args.seed
    config = trainer.TrainingConfig.from_dict(raw)
    _print_effective("train", config.to_jsonable())

    manifest, corpus, queries_img, queries_txt = _load_dataset(args)
    init = trainer.load_checkpoint(args.resume) if args.resume else None
    checkpoint, train_log = trainer.train(
        config,
        manifest,
        corpus,
        queries_img,
        queries_txt,
        init=init,
        threads=args.threads,
    )
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    trainer.save_checkpoint(checkpoint, out / "checkpoint.ckpt")
    train_log.write(out / "train_log.jsonl")
    final = train_log.entries[-1] if train_log.entries else {}
    print(
        json.dumps(
            {
                "checkpoint": str(out / "checkpoint.ckpt"),
                "train_log": str(out / "train_log.jsonl"),
                "final_epoch": checkpoint.epoch,
                "final_mean_loss": final.get("mean_loss"),
            },
            sort_keys=True,
        )
    )
    return EXIT_OK


def _parse_metric(name: str) -> tuple[str, int]:
    base, _, k_text = name.partition("@")
    base = base.strip().lower().replace("-", "_")
    if base not in ("recall", "recall_subset", "map"):
        raise ValueError(f"unknown metric {name!r}")
    try:
        k = int(k_text)
    except ValueError:
        raise ValueError(f"metric {name!r} needs an integer k after '@'") from None
    if k < 1:
        raise ValueError(f"metric {name!r}: k must be >= 1")
    return base, k


def _cmd_eval(args) -> int:
    rankings = evaluator.load_rankings(args.rankings)
    truth = evaluator.load_truth(args.truth)
    metric_names = [m for m in args.metrics.split(",") if m.strip()]
    parsed = [_parse_metric(m) for m in metric_names]
    _print_effective(
        "eval",
        {"rankings": str(args.rankings), "truth": str(args.truth), "metrics": metric_names},
    )

    subset_of: dict[str, tuple[str, ...]] = {}
    if any(base == "recall_subset" for base, _ in parsed):
        if not args.subset:
            raise ValueError("recall_subset metrics need --subset MANIFEST")
        corpus_ids = sorted({i for r in rankings for i in r.ids})
        manifest = store.load_manifest(args.subset, corpus_ids)
        for q in manifest.queries:
            if q.subset_ids is not None:
                subset_of[q.query_id] = q.subset_ids

    metrics: dict[str, float] = {}
    for (base, k), name in zip(parsed, metric_names):
        if base == "recall":
            metrics[name] = evaluator.recall_at_k(rankings, truth, k)
        elif base == "map":
            metrics[name] = evaluator.map_at_k(rankings, truth, k)
        else:
            restricted = []
            for ranking in rankings:
                if ranking.query_id not in subset_of:
                    raise ValueError(f"query {ranking.query_id!r} has no subset_ids")
                restricted.append(
                    evaluator.restrict_ranking(ranking, subset_of[ranking.query_id])
                )
            metrics[name] = evaluator.recall_subset_at_k(restricted, truth, k)

    report = evaluator.EvalReport(
        metrics=metrics,
        query_count=len(rankings),
        split=args.split,
        config={"metrics": metric_names, "rankings": str(args.rankings)},
    )
    print(json.dumps(report.to_jsonable(), sort_keys=True))
    return EXIT_OK


def _cmd_prefrate(args) -> int:
    dataset_dir = Path(args.queries)
    corpus = store.load_embeddings(args.corpus)
    queries_img = store.load_embeddings(dataset_dir / "query_img.emb")
    queries_txt = store.load_embeddings(dataset_dir / "query_txt.emb")
    manifest = store.load_manifest(dataset_dir / "manifest.jsonl", corpus.ids)
    records = evaluator.load_preference_records(args.records)
    params = _params_from_checkpoint_or_init(args.checkpoint, corpus.dim, args.seed or 0)
    _print_effective(
        "prefrate",
        {
            "checkpoint": str(args.checkpoint) if args.checkpoint else None,
            "records": str(args.records),
            "n_records": len(records),
        },
    )
    lookup = {q.query_id: q for q in manifest.queries}
    try:
        result = evaluator.preference_rate(
            params, records, corpus, queries_img, queries_txt, lookup
        )
        print(
            json.dumps(
                {
                    "preference_rate": round(result.rate, 2),
                    "evaluated": result.evaluated,
                    "excluded": result.excluded,
                },
                sort_keys=True,
            )
        )
    except evaluator.UndefinedRateError as exc:
        # A valid, reported outcome: the conditioning set was empty.
        print(
            json.dumps(
                {"preference_rate": None, "evaluated": 0, "excluded": exc.excluded},
                sort_keys=True,
            )
        )
    return EXIT_OK


def _add_dataset_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--manifest", required=True, help="query manifest (JSON lines)")
    p.add_argument("--corpus", required=True, help="corpus embedding file")
    p.add_argument("--query-img", dest="query_img", required=True)
    p.add_argument("--query-txt", dest="query_txt", required=True)


def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    # Registered on the root parser and again on every subparser, so the
    # flags work both before and after the subcommand name.
    d = argparse.SUPPRESS if suppress else None
    parser.add_argument(
        "--threads", type=int, default=d if suppress else (os.cpu_count() or 1)
    )
    parser.add_argument(
        "--seed", type=int, default=d, help="override config seed"
    )
    parser.add_argument("--log-level", default=d if suppress else "warning")
    parser.add_argument(
        "--json-errors",
        action="store_true",
        default=d if suppress else True,
        help="emit errors as a single JSON object on stderr (default)",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cirtrain",
        description="Composed-retrieval training and evaluation over precomputed embeddings",
    )
    _global_flags(parser, suppress=False)
    shared = argparse.ArgumentParser(add_help=False)
    _global_flags(shared, suppress=True)
    sub = parser.add_subparsers(dest="command", parser_class=argparse.ArgumentParser)

    p = sub.add_parser("synth", parents=[shared], help="generate a synthetic planted dataset")
    p.add_argument("--config", required=True, help="SynthConfig as JSON or TOML")
    p.add_argument("--out-dir", dest="out_dir", required=True)
    p.add_argument("--split", default=None)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("validate", parents=[shared], help="check manifest/embedding consistency")
    _add_dataset_flags(p)
    p.add_argument("--split", default="train")
    p.set_defaults(func=_cmd_validate)

    p = sub.add_parser("rank", parents=[shared], help="write ranked lists for every query")
    _add_dataset_flags(p)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--k", type=int, default=None, help="truncate lists to top-k")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_rank)

    p = sub.add_parser("mine", parents=[shared], help="mine hard-negative sets")
    _add_dataset_flags(p)
    p.add_argument("--checkpoint", default=None)
    p.add_argument(
        "--strategy",
        choices=[s.value for s in miner.Strategy],
        default=miner.Strategy.TWO_DROPS.value,
    )
    p.add_argument("--k", type=int, default=100)
    p.add_argument("--epoch", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_mine)

    p = sub.add_parser("train", parents=[shared], help="run preference training")
    _add_dataset_flags(p)
    p.add_argument("--config", default=None, help="TrainingConfig as JSON or TOML")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.add_argument("--out-dir", dest="out_dir", required=True)
    p.add_argument("--n-epoch", dest="n_epoch", type=int, default=None)
    p.add_argument("--n-def", dest="n_def", type=int, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--learning-rate", dest="learning_rate", type=float, default=None)
    p.add_argument("--weight-decay", dest="weight_decay", type=float, default=None)
    p.add_argument(
        "--strategy", choices=[s.value for s in miner.Strategy], default=None
    )
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--eval-every", dest="eval_every", type=int, default=None)
    p.add_argument("--eval-k", dest="eval_k", type=int, default=None)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", parents=[shared], help="compute retrieval metrics from ranked lists")
    p.add_argument("--rankings", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--metrics", required=True, help="e.g. recall@10,recall_subset@1,map@5")
    p.add_argument("--subset", default=None, help="manifest providing subset_ids")
    p.add_argument("--split", default="val")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("prefrate", parents=[shared], help="human preference alignment rate")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--records", required=True, help="preference records (JSON lines)")
    p.add_argument("--corpus", required=True)
    p.add_argument(
        "--queries",
        required=True,
        help="dataset dir holding manifest.jsonl, query_img.emb, query_txt.emb",
    )
    p.set_defaults(func=_cmd_prefrate)

    return parser


def _emit_error(kind: str, exc: Exception) -> None:
    print(
        json.dumps(
            {"error": kind, "type": type(exc).__name__, "message": str(exc)},
            sort_keys=True,
        ),
        file=sys.stderr,
    )


def dispatch(argv) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level.upper(), logging.WARNING))
    if not getattr(args, "command", None):
        parser.print_usage(sys.stderr)
        return EXIT_VALIDATION
    if args.threads < 1:
        _emit_error("validation", ValueError("--threads must be >= 1"))
        return EXIT_VALIDATION
    try:
        return args.func(args)
    except _VALIDATION_ERRORS as exc:
        _emit_error("validation", exc)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001 - boundary of the process
        _emit_error("runtime", exc)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
