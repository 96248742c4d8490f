"""Command-line surface: ingest, augment, train, eval, explain, sweep.

Exit codes: 0 success, 2 config error, 3 data error, 4 backend error.
All artifacts land under ``--out`` and embed the config hash; writes are
atomic (temp file + rename) and contain no timestamps, so a command rerun
with the same config and seed reproduces its outputs byte for byte.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile

from . import explanation
from .augmenter import AugmentationPools, run_augmentation
from .config import RunConfig, config_hash, load_config
from .encoder import load_params, save_params
from .errors import BackendError, ConfigError, DataError
from .kg import DatasetSplit, TripartiteKG, load_dataset, split_interactions
from .llm import make_backend
from .training import evaluate_model, prepare_data, train_model

log = logging.getLogger(__name__)


def _atomic_write_text(path: str, payload: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _load_kg(cfg: RunConfig) -> TripartiteKG:
    for name, path in (("interactions", cfg.interactions), ("kg_ia", cfg.kg_ia)):
        if path and not os.path.exists(path):
            raise DataError(f"{name} file not found: {path}")
    if not cfg.interactions:
        raise ConfigError("config must set 'interactions'")
    if cfg.kg_ii and not os.path.exists(cfg.kg_ii):
        raise DataError(f"kg_ii file not found: {cfg.kg_ii}")
    return load_dataset(
        cfg.interactions,
        cfg.kg_ia or None,
        cfg.kg_ii or None,
        cap_per_attribute=cfg.cap_per_attribute,
        seed=cfg.seed,
    )


def _split(kg: TripartiteKG, cfg: RunConfig) -> DatasetSplit:
    return split_interactions(
        kg.interactions,
        (cfg.train_ratio, cfg.val_ratio, cfg.test_ratio),
        seed=cfg.seed,
    )


def _pool_path(cfg: RunConfig, out_dir: str) -> str:
    return cfg.pools or os.path.join(out_dir, "pools.jsonl")


def _make_backend(cfg: RunConfig, name: str | None = None):
    return make_backend(
        name or cfg.backend,
        seed=cfg.seed,
        budget=cfg.request_budget or None,
        replay_path=cfg.replay_path or None,
        record_path=cfg.record_path or None,
    )


def cmd_ingest(cfg: RunConfig, args: argparse.Namespace) -> int:
    kg = _load_kg(cfg)
    n_users, n_items = kg.vocab.num_users, kg.vocab.num_items
    n_inter = kg.interactions.num_pairs
    density = n_inter / (n_users * n_items) if n_users and n_items else 0.0
    stats = {
        "users": n_users,
        "items": n_items,
        "interactions": n_inter,
        "density": density,
        "attributes": kg.vocab.num_attributes,
        "relations": kg.vocab.num_relations,
        "ia_triplets": kg.num_ia,
        "ii_triplets": kg.num_ii,
        "config_hash": config_hash(cfg),
    }
    for key, value in stats.items():
        if key == "density":
            print(f"{key:>14}: {value:.3e}")
        else:
            print(f"{key:>14}: {value}")
    _atomic_write_text(os.path.join(args.out, "ingest.json"),
                       json.dumps(stats, indent=2, sort_keys=True) + "\n")
    return 0


def cmd_augment(cfg: RunConfig, args: argparse.Namespace) -> int:
    kg = _load_kg(cfg)
    split = _split(kg, cfg)
    backend = _make_backend(cfg, args.backend)
    pool_path = _pool_path(cfg, args.out)
    os.makedirs(os.path.dirname(os.path.abspath(pool_path)), exist_ok=True)
    pools = run_augmentation(
        kg, split.train, backend, cfg.subgraph_size, seed=cfg.seed,
        pool_path=pool_path, max_in_flight=cfg.max_in_flight,
        resume=not args.fresh,
    )
    sizes = pools.sizes()
    summary = {
        "pool_file": pool_path,
        "sizes": sizes,
        "skipped_existing": pools.skipped_existing,
        "skipped_missing": pools.skipped_missing,
        "conflicts": pools.conflicts,
        "config_hash": config_hash(cfg),
    }
    _atomic_write_text(os.path.join(args.out, "augment.json"),
                       json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"pools written to {pool_path}")
    for name, size in sizes.items():
        print(f"{name:>14}: {size}")
    return 0


def _history_csv(history: list[dict], hash_line: str) -> str:
    lines = [f"# config_hash={hash_line}",
             "epoch,bpr,con,joint,val_recall,val_ndcg"]
    for row in history:
        lines.append(
            f"{row['epoch']},{row['bpr']:.10f},{row['con']:.10f},"
            f"{row['joint']:.10f},{row['val_recall']:.10f},{row['val_ndcg']:.10f}"
        )
    return "\n".join(lines) + "\n"


def cmd_train(cfg: RunConfig, args: argparse.Namespace) -> int:
    kg = _load_kg(cfg)
    split = _split(kg, cfg)
    pool_path = _pool_path(cfg, args.out)
    if args.no_llm:
        pools = AugmentationPools()
    elif os.path.exists(pool_path):
        pools = AugmentationPools.load(pool_path, kg.vocab)
    else:
        raise DataError(
            f"no pool file at {pool_path}; run the augment command first "
            "or pass --no-llm to train with empty pools"
        )
    result = train_model(
        kg, split, pools, cfg.to_train_config(), eval_k=cfg.top_k,
        dump_views_dir=args.dump_views, diagnostics_dir=args.out,
    )
    digest = config_hash(cfg)
    save_params(result.params, os.path.join(args.out, "checkpoint.pt"),
                extra_meta={"config_hash": digest, "best_epoch": result.best_epoch})
    _atomic_write_text(os.path.join(args.out, "metrics.csv"),
                       _history_csv(result.history, digest))
    print(f"trained {len(result.history)} epoch(s); best epoch {result.best_epoch}")
    print(f"checkpoint: {os.path.join(args.out, 'checkpoint.pt')}")
    return 0


def _load_checkpoint(path: str, cfg: RunConfig):
    if not os.path.exists(path):
        raise DataError(f"checkpoint not found: {path}")
    params, meta = load_params(path)
    trained_under = meta.get("config_hash")
    if trained_under and trained_under != config_hash(cfg):
        log.warning("checkpoint %s was trained under config %s, current is %s",
                    path, trained_under, config_hash(cfg))
    return params


def cmd_eval(cfg: RunConfig, args: argparse.Namespace) -> int:
    kg = _load_kg(cfg)
    split = _split(kg, cfg)
    checkpoint = args.checkpoint or os.path.join(args.out, "checkpoint.pt")
    params = _load_checkpoint(checkpoint, cfg)
    prep = prepare_data(kg, split)
    ranking = evaluate_model(params, prep, cfg.to_train_config(),
                             k=cfg.top_k, target=args.split)
    report = {
        f"recall@{cfg.top_k}": ranking.recall,
        f"ndcg@{cfg.top_k}": ranking.ndcg,
        "users_evaluated": ranking.users_evaluated,
        "config_hash": config_hash(cfg),
    }
    payload = json.dumps(report, indent=2, sort_keys=True) + "\n"
    _atomic_write_text(os.path.join(args.out, f"eval_{args.split}.json"), payload)
    print(payload, end="")
    return 0


def cmd_explain(cfg: RunConfig, args: argparse.Namespace) -> int:
    kg = _load_kg(cfg)
    split = _split(kg, cfg)
    checkpoint = args.checkpoint or os.path.join(args.out, "checkpoint.pt")
    params = _load_checkpoint(checkpoint, cfg)
    pool_path = _pool_path(cfg, args.out)
    pools = AugmentationPools.load(pool_path, kg.vocab) if os.path.exists(pool_path) \
        else AugmentationPools()
    user = kg.vocab.users.get(args.user)
    item = kg.vocab.items.get(args.item)
    if user is None:
        raise DataError(f"unknown user {args.user!r}")
    if item is None:
        raise DataError(f"unknown item {args.item!r}")
    backend = _make_backend(cfg, args.backend)
    mu = cfg.explain_mu if args.mu is None else args.mu
    result = explanation.explain(
        kg, split, params, pools, backend, user, item,
        threshold=mu, context_size=cfg.context_size, seed=cfg.seed,
    )
    v = kg.vocab
    report = {
        "user": args.user,
        "item": args.item,
        "explainable": result.explainable,
        "paths": [
            {
                "bridge": v.items.name(p.bridge),
                "link_relation": v.relations.name(p.link_relation),
                "witness_attribute": v.attributes.name(p.witness_attribute),
                "witness_relation": v.relations.name(p.witness_relation),
            }
            for p in result.paths
        ],
        "confidences": [
            [p.confidence_bridge, p.confidence_target] for p in result.paths
        ],
        "selected": result.selected_index,
        "explanation": result.explanation,
        "fallback_used": result.fallback_used,
        "config_hash": config_hash(cfg),
    }
    payload = json.dumps(report, indent=2, sort_keys=True) + "\n"
    _atomic_write_text(os.path.join(args.out, "explanation.json"), payload)
    print(payload, end="")
    return 0


def _sweep_point(cfg: RunConfig, out_dir: str, param: str, value: float,
                 ) -> tuple[float, float, float]:
    kg = _load_kg(cfg)
    split = _split(kg, cfg)
    pool_path = _pool_path(cfg, out_dir)
    pools = AugmentationPools.load(pool_path, kg.vocab) if os.path.exists(pool_path) \
        else AugmentationPools()
    train_cfg = cfg.to_train_config()
    setattr(train_cfg, param, value)
    train_cfg.validate()
    result = train_model(kg, split, pools, train_cfg, eval_k=cfg.top_k)
    prep = prepare_data(kg, split)
    ranking = evaluate_model(result.params, prep, train_cfg,
                             k=cfg.top_k, target="test")
    return value, ranking.recall, ranking.ndcg


def cmd_sweep(cfg: RunConfig, args: argparse.Namespace) -> int:
    if args.param not in ("add_ratio", "del_ratio"):
        raise ConfigError(f"sweep parameter must be add_ratio or del_ratio, got {args.param!r}")
    try:
        grid = [float(v) for v in args.grid.split(",") if v.strip() != ""]
    except ValueError:
        raise ConfigError(f"bad grid {args.grid!r}; expected comma-separated floats") from None
    if not grid:
        raise ConfigError("empty sweep grid")
    if args.workers < 1:
        raise ConfigError("--workers must be >= 1")
    _load_kg(cfg)  # fail fast on data problems before spawning workers
    if args.workers == 1:
        rows = [_sweep_point(cfg, args.out, args.param, value) for value in grid]
    else:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            futures = [pool.submit(_sweep_point, cfg, args.out, args.param, value)
                       for value in grid]
            rows = [f.result() for f in futures]
    for value, recall, ndcg in rows:
        log.info("sweep %s=%.3f -> recall=%.4f ndcg=%.4f",
                 args.param, value, recall, ndcg)
    lines = [f"# config_hash={config_hash(cfg)}",
             f"param,value,recall@{cfg.top_k},ndcg@{cfg.top_k},seed"]
    for value, recall, ndcg in rows:
        lines.append(f"{args.param},{value},{recall:.10f},{ndcg:.10f},{cfg.seed}")
    _atomic_write_text(os.path.join(args.out, "sweep.csv"), "\n".join(lines) + "\n")
    print("\n".join(lines))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ckgrec",
        description="Confidence-aware knowledge-graph recommender pipeline",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="flat key=value config file")
        p.add_argument("--out", default="out", help="artifact directory")

    common(sub.add_parser("ingest", help="load the dataset and print statistics"))

    p = sub.add_parser("augment", help="run the LLM augmentation pipeline")
    common(p)
    p.add_argument("--backend", choices=("stub", "replay", "http"))
    p.add_argument("--fresh", action="store_true", help="ignore existing pool progress")

    p = sub.add_parser("train", help="train the recommender")
    common(p)
    p.add_argument("--no-llm", action="store_true", help="train with empty pools")
    p.add_argument("--dump-views", metavar="DIR", help="write per-epoch view graphs and masks")

    p = sub.add_parser("eval", help="full-ranking evaluation of a checkpoint")
    common(p)
    p.add_argument("--split", choices=("test", "validation"), default="test")
    p.add_argument("--checkpoint")

    p = sub.add_parser("explain", help="generate an explanation for one pair")
    common(p)
    p.add_argument("--user", required=True)
    p.add_argument("--item", required=True)
    p.add_argument("--mu", type=float, default=None, help="confidence admission threshold")
    p.add_argument("--backend", choices=("stub", "replay", "http"))
    p.add_argument("--checkpoint")

    p = sub.add_parser("sweep", help="grid sweep over an augmentation ratio")
    common(p)
    p.add_argument("--param", required=True)
    p.add_argument("--grid", required=True, help="comma-separated values")
    p.add_argument("--workers", type=int, default=1,
                   help="grid points trained in parallel processes")
    return parser


_COMMANDS = {
    "ingest": cmd_ingest,
    "augment": cmd_augment,
    "train": cmd_train,
    "eval": cmd_eval,
    "explain": cmd_explain,
    "sweep": cmd_sweep,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        cfg = load_config(args.config)
        os.makedirs(args.out, exist_ok=True)
        return _COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except BackendError as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
