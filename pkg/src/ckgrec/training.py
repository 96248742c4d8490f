"""Joint training: dual-view augmentation -> knowledge encoding -> interaction
masking -> propagation -> contrastive + ranking losses -> Adam updates.

Every stochastic component draws from its own stream derived from
(config seed, component tag, epoch), so two runs with the same config produce
bit-identical loss trajectories and disabling one component never shifts the
draws of another.
"""

from __future__ import annotations

import copy
import json
import logging
import math
import os
import random
from dataclasses import dataclass, field

import torch
from torch import Tensor

from .augmenter import AugmentationPools
from .encoder import (
    ModelParams,
    attention_aggregate,
    confidence_aggregate,
    triplet_confidence,
)
from .errors import ConfigError, DataError, NonFiniteLossError
from .evaluation import RankingResult, full_rank
from .kg import DatasetSplit, TripartiteKG
from .lightgcn import final_embeddings, propagate
from .rng import derive_seed
from .views import (
    DecisionMask,
    SampledPools,
    TripletArrays,
    ViewGraph,
    apply_decisions,
    build_view_graphs,
    cross_view_stability,
    deleted_pair_mask,
    draw_gumbel_noise,
    gumbel_decisions,
    item_keep_probability,
    keep_probability,
    mask_interactions,
    sample_pools,
    threshold_decisions,
)

log = logging.getLogger(__name__)

VIEW_USER = "user"
VIEW_ITEM = "item"


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    embed_dim: int = 64
    num_layers: int = 3
    num_experts: int = 8
    conf_scale: float = 5.0
    gumbel_tau: float = 0.9
    contrastive_tau: float = 0.2
    add_ratio: float = 0.60
    del_ratio: float = 0.08
    drop_prob: float = 0.01
    contrastive_weight: float = 1e-3
    reg_weight: float = 1e-4
    batch_size: int = 2048
    epochs: int = 100
    seed: int = 0
    patience: int = 10
    sample_base: str = "ia"
    bpr_source: str = "mean_views"
    include_layer0: bool = False
    use_confidence: bool = True
    decision_mode: str = "hard_st"

    def validate(self) -> None:
        positive = [
            ("learning_rate", self.learning_rate),
            ("embed_dim", self.embed_dim),
            ("num_layers", self.num_layers),
            ("num_experts", self.num_experts),
            ("conf_scale", self.conf_scale),
            ("gumbel_tau", self.gumbel_tau),
            ("contrastive_tau", self.contrastive_tau),
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
        ]
        for name, value in positive:
            if value <= 0:
                raise ConfigError(f"{name} must be positive, got {value}")
        for name, value in [("add_ratio", self.add_ratio), ("del_ratio", self.del_ratio)]:
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {value}")
        if not 0.0 <= self.drop_prob < 1.0:
            raise ConfigError(f"drop_prob must lie in [0, 1), got {self.drop_prob}")
        if self.contrastive_weight < 0 or self.reg_weight < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.sample_base not in ("ia", "full"):
            raise ConfigError(f"unknown sample_base {self.sample_base!r}")
        if self.bpr_source not in ("mean_views", "user_view", "item_view"):
            raise ConfigError(f"unknown bpr_source {self.bpr_source!r}")
        if self.decision_mode not in ("hard_st", "soft", "hard"):
            raise ConfigError(f"unknown decision_mode {self.decision_mode!r}")

    @property
    def contrastive_enabled(self) -> bool:
        return self.contrastive_weight > 0


def contrastive_loss(z1: Tensor, z2: Tensor, tau: float) -> Tensor:
    """Cross-view InfoNCE over one node role.

    Row n of each view is the positive pair; every other row of the opposite
    view is a negative. Both anchor directions are computed and averaged.
    """
    if z1.shape[0] != z2.shape[0]:
        raise ValueError("views must embed the same node set")
    if z1.shape[0] < 2:
        raise ValueError("contrastive batch needs at least 2 nodes")
    z1n = torch.nn.functional.normalize(z1, dim=1)
    z2n = torch.nn.functional.normalize(z2, dim=1)
    sims = (z1n @ z2n.T) / tau
    diag = sims.diagonal()
    forward = (torch.logsumexp(sims, dim=1) - diag).mean()
    backward = (torch.logsumexp(sims, dim=0) - diag).mean()
    return 0.5 * (forward + backward)


def bpr_loss(scores_pos: Tensor, scores_neg: Tensor) -> Tensor:
    """Mean of -log sigmoid(pos - neg) over the batch."""
    return torch.nn.functional.softplus(scores_neg - scores_pos).mean()


def l2_penalty(params: ModelParams) -> Tensor:
    total = None
    for p in params.parameters():
        sq = p.square().sum()
        total = sq if total is None else total + sq
    return total


def joint_loss(
    bpr: Tensor, con: Tensor | float, params: ModelParams,
    contrastive_weight: float, reg_weight: float,
) -> Tensor:
    total = bpr
    if contrastive_weight:
        total = total + contrastive_weight * con
    if reg_weight:
        total = total + reg_weight * l2_penalty(params)
    return total


def sample_negatives(
    user_items_full: dict[int, set[int]],
    users: list[int],
    num_items: int,
    rng: random.Random,
) -> list[int]:
    """One uniform negative item per user, rejecting observed interactions."""
    negatives = []
    for u in users:
        seen = user_items_full.get(u, set())
        if len(seen) >= num_items:
            raise DataError(f"user {u} has interacted with every item; cannot sample a negative")
        while True:
            j = rng.randrange(num_items)
            if j not in seen:
                negatives.append(j)
                break
    return negatives


@dataclass
class PreparedData:
    kg: TripartiteKG
    split: DatasetSplit
    num_users: int
    num_items: int
    pair_users: Tensor
    pair_items: Tensor
    base_arrays: TripletArrays
    user_items_full: dict[int, set[int]]


def prepare_data(kg: TripartiteKG, split: DatasetSplit) -> PreparedData:
    pairs = split.train.pairs
    return PreparedData(
        kg=kg,
        split=split,
        num_users=kg.vocab.num_users,
        num_items=kg.vocab.num_items,
        pair_users=torch.tensor([u for u, _ in pairs], dtype=torch.int64),
        pair_items=torch.tensor([i for _, i in pairs], dtype=torch.int64),
        base_arrays=TripletArrays.from_triplets(kg.ia),
        user_items_full={u: set(items) for u, items in kg.interactions.user_items.items()},
    )


@dataclass
class EpochContext:
    """Per-epoch sampled structure and frozen noise; pure given (seed, epoch)."""

    sampled: SampledPools
    view_user: ViewGraph | None
    view_item: ViewGraph | None
    gumbel_user: tuple[Tensor, Tensor] | None
    gumbel_item: tuple[Tensor, Tensor] | None
    mask_uniform_user: Tensor | None
    mask_uniform_item: Tensor | None
    deleted_pairs: Tensor | None
    base_view: ViewGraph | None = None
    gumbel_base: tuple[Tensor, Tensor] | None = None


def _gen(seed: int, *tags) -> torch.Generator:
    return torch.Generator().manual_seed(derive_seed(seed, *tags))


def build_epoch_context(
    prep: PreparedData,
    pools: AugmentationPools,
    cfg: TrainConfig,
    epoch: int,
    dtype: torch.dtype = torch.float64,
) -> EpochContext:
    if cfg.contrastive_enabled and cfg.use_confidence:
        sampled = sample_pools(
            pools, prep.kg, cfg.add_ratio, cfg.del_ratio,
            seed=derive_seed(cfg.seed, "pools", epoch), base=cfg.sample_base,
        )
        view_user, view_item = build_view_graphs(prep.kg, sampled)
        gumbel_user = draw_gumbel_noise(len(view_user), _gen(cfg.seed, "gumbel", VIEW_USER, epoch), dtype)
        gumbel_item = draw_gumbel_noise(len(view_item), _gen(cfg.seed, "gumbel", VIEW_ITEM, epoch), dtype)
    else:
        sampled = SampledPools.empty()
        view_user = view_item = None
        gumbel_user = gumbel_item = None

    if cfg.contrastive_enabled:
        mask_uniform_user = torch.rand(prep.num_items, dtype=dtype,
                                       generator=_gen(cfg.seed, "mask", VIEW_USER, epoch))
        mask_uniform_item = torch.rand(prep.num_items, dtype=dtype,
                                       generator=_gen(cfg.seed, "mask", VIEW_ITEM, epoch))
        deleted = deleted_pair_mask(prep.split.train, prep.pair_users, prep.pair_items, sampled)
    else:
        mask_uniform_user = mask_uniform_item = None
        deleted = None

    base_view = None
    gumbel_base = None
    if cfg.use_confidence and not cfg.contrastive_enabled:
        base_view = ViewGraph.from_set("base", prep.kg.ia)
        gumbel_base = draw_gumbel_noise(len(base_view), _gen(cfg.seed, "gumbel", "base", epoch), dtype)

    return EpochContext(
        sampled, view_user, view_item, gumbel_user, gumbel_item,
        mask_uniform_user, mask_uniform_item, deleted, base_view, gumbel_base,
    )


def encode_view(
    params: ModelParams,
    arrays: TripletArrays,
    cfg: TrainConfig,
    noise: tuple[Tensor, Tensor] | None = None,
    mask: DecisionMask | None = None,
) -> tuple[Tensor, Tensor, DecisionMask]:
    """Full knowledge pass over one view: attention pass, confidence, keep
    decisions, confidence-weighted aggregation over the survivors.

    Returns (final item matrix, per-fact confidence, decision mask).
    """
    x1 = attention_aggregate(params, arrays.items, arrays.attrs)
    phi = triplet_confidence(params, x1, arrays.items, arrays.rels, arrays.attrs)
    if mask is None:
        probs = keep_probability(phi, cfg.conf_scale)
        mask = gumbel_decisions(probs, cfg.gumbel_tau, noise=noise)
    renewed = apply_decisions(arrays, phi, mask, cfg.decision_mode)
    x2 = confidence_aggregate(
        params, x1, renewed.arrays.items, renewed.arrays.attrs, renewed.phi, renewed.scale
    )
    return x2, phi, mask


def encode_for_eval(params: ModelParams, arrays: TripletArrays, cfg: TrainConfig) -> Tensor:
    """Deterministic eval-time encoding: keep a fact iff its keep probability
    is at least 0.5; no noise, no straight-through scaling."""
    if not cfg.use_confidence:
        return params.item_emb
    with torch.no_grad():
        x1 = attention_aggregate(params, arrays.items, arrays.attrs)
        phi = triplet_confidence(params, x1, arrays.items, arrays.rels, arrays.attrs)
        mask = threshold_decisions(keep_probability(phi, cfg.conf_scale))
        renewed = apply_decisions(arrays, phi, mask, "hard")
        return confidence_aggregate(
            params, x1, renewed.arrays.items, renewed.arrays.attrs, renewed.phi, None
        )


def compute_batch_loss(
    params: ModelParams,
    prep: PreparedData,
    cfg: TrainConfig,
    ctx: EpochContext,
    batch_users: Tensor,
    batch_pos: Tensor,
    batch_neg: Tensor,
) -> tuple[Tensor, dict]:
    """The joint objective for one batch, deterministic given the context.

    Pipeline: encode both fact views, derive stability and interaction masks,
    propagate each masked view for the contrastive term, then propagate the
    unmasked train graph (items seeded per ``bpr_source``) for the ranking
    term; the regularizer covers every parameter tensor.
    """
    con_term: Tensor | float = 0.0
    x2_user = x2_item = None

    if cfg.contrastive_enabled:
        if cfg.use_confidence:
            x2_user, _, _ = encode_view(params, ctx.view_user.arrays, cfg, noise=ctx.gumbel_user)
            x2_item, _, _ = encode_view(params, ctx.view_item.arrays, cfg, noise=ctx.gumbel_item)
        else:
            x2_user = x2_item = params.item_emb
        stability = cross_view_stability(x2_user, x2_item)
        keep_p = item_keep_probability(stability, cfg.drop_prob)
        masked_user, masked_item = mask_interactions(
            prep.pair_users, prep.pair_items, keep_p,
            ctx.mask_uniform_user, ctx.mask_uniform_item, ctx.deleted_pairs,
        )
        state_u = propagate(masked_user.users, masked_user.items,
                            params.user_emb, x2_user, cfg.num_layers)
        state_i = propagate(masked_item.users, masked_item.items,
                            params.user_emb, x2_item, cfg.num_layers)
        fu_u, fi_u = final_embeddings(state_u, cfg.include_layer0)
        fu_i, fi_i = final_embeddings(state_i, cfg.include_layer0)
        con_users = torch.unique(batch_users)
        con_items = torch.unique(batch_pos)
        if con_users.numel() >= 2 and con_items.numel() >= 2:
            con_term = contrastive_loss(fu_u[con_users], fu_i[con_users], cfg.contrastive_tau) \
                + contrastive_loss(fi_u[con_items], fi_i[con_items], cfg.contrastive_tau)
        else:
            log.debug("batch too small for contrastive term; skipping")

    if cfg.use_confidence:
        if cfg.contrastive_enabled:
            if cfg.bpr_source == "mean_views":
                items0 = 0.5 * (x2_user + x2_item)
            elif cfg.bpr_source == "user_view":
                items0 = x2_user
            else:
                items0 = x2_item
        else:
            items0, _, _ = encode_view(params, ctx.base_view.arrays, cfg, noise=ctx.gumbel_base)
    else:
        items0 = params.item_emb

    state = propagate(prep.pair_users, prep.pair_items, params.user_emb, items0, cfg.num_layers)
    fu, fi = final_embeddings(state, cfg.include_layer0)
    scores_pos = (fu[batch_users] * fi[batch_pos]).sum(1)
    scores_neg = (fu[batch_users] * fi[batch_neg]).sum(1)
    bpr = bpr_loss(scores_pos, scores_neg)
    joint = joint_loss(bpr, con_term, params, cfg.contrastive_weight, cfg.reg_weight)
    parts = {
        "bpr": float(bpr.detach()),
        "con": float(con_term.detach()) if isinstance(con_term, Tensor) else 0.0,
        "joint": float(joint.detach()),
    }
    return joint, parts


def evaluate_model(
    params: ModelParams,
    prep: PreparedData,
    cfg: TrainConfig,
    k: int = 10,
    target: str = "validation",
) -> RankingResult:
    """Full ranking with deterministic eval-mode encoding, propagated over the
    unmasked train graph."""
    with torch.no_grad():
        items0 = encode_for_eval(params, prep.base_arrays, cfg)
        state = propagate(prep.pair_users, prep.pair_items,
                          params.user_emb, items0, cfg.num_layers)
        fu, fi = final_embeddings(state, cfg.include_layer0)
    return full_rank(fu, fi, prep.split, k=k, target=target)


@dataclass
class TrainResult:
    params: ModelParams
    history: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_recall: float = float("nan")
    stopped_early: bool = False


def _dump_diagnostics(directory: str, payload: dict) -> None:
    os.makedirs(directory, exist_ok=True)
    path = os.path.join(directory, "nonfinite_loss.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
    log.error("non-finite loss diagnostics written to %s", path)


def _dump_views(directory: str, prep: PreparedData, ctx: EpochContext,
                params: ModelParams, cfg: TrainConfig) -> None:
    os.makedirs(directory, exist_ok=True)
    vocab = prep.kg.vocab
    for view in (ctx.view_user, ctx.view_item, ctx.base_view):
        if view is None:
            continue
        with open(os.path.join(directory, f"view_{view.view}.tsv"), "w", encoding="utf-8") as fh:
            for t in view.triplets:
                fh.write(f"{vocab.items.name(t.head)}\t{vocab.relations.name(t.relation)}\t"
                         f"{vocab.attributes.name(t.tail)}\n")
    if not (cfg.contrastive_enabled and cfg.use_confidence):
        return
    with torch.no_grad():
        x2u, _, mask_u = encode_view(params, ctx.view_user.arrays, cfg, noise=ctx.gumbel_user)
        x2i, _, mask_i = encode_view(params, ctx.view_item.arrays, cfg, noise=ctx.gumbel_item)
        keep_p = item_keep_probability(cross_view_stability(x2u, x2i), cfg.drop_prob)
        bit_u = (ctx.mask_uniform_user < keep_p).long()
        bit_i = (ctx.mask_uniform_item < keep_p).long()
    for name, view, mask in (("user", ctx.view_user, mask_u), ("item", ctx.view_item, mask_i)):
        with open(os.path.join(directory, f"decisions_{name}.tsv"), "w", encoding="utf-8") as fh:
            for t, h in zip(view.triplets, mask.hard.tolist()):
                fh.write(f"{vocab.items.name(t.head)}\t{vocab.relations.name(t.relation)}\t"
                         f"{vocab.attributes.name(t.tail)}\t{int(h)}\n")
    for name, bits in (("user", bit_u), ("item", bit_i)):
        with open(os.path.join(directory, f"mask_{name}.tsv"), "w", encoding="utf-8") as fh:
            for item_id, bit in enumerate(bits.tolist()):
                fh.write(f"{vocab.items.name(item_id)}\t{bit}\n")


def train_model(
    kg: TripartiteKG,
    split: DatasetSplit,
    pools: AugmentationPools | None,
    cfg: TrainConfig,
    eval_k: int = 10,
    dump_views_dir: str | None = None,
    diagnostics_dir: str | None = None,
) -> TrainResult:
    """Run the full training loop with early stopping on validation recall."""
    cfg.validate()
    if pools is None:
        pools = AugmentationPools()
    prep = prepare_data(kg, split)
    params = ModelParams(
        prep.num_users, prep.num_items, kg.vocab.num_attributes,
        kg.vocab.num_relations, dim=cfg.embed_dim, num_experts=cfg.num_experts,
        dtype=torch.float64, seed=cfg.seed,
    )
    optimizer = torch.optim.Adam(params.parameters(), lr=cfg.learning_rate)
    pairs_sorted = sorted(split.train.pairs)
    has_validation = split.validation.num_pairs > 0

    result = TrainResult(params=params)
    best_state = None
    bad_epochs = 0
    for epoch in range(1, cfg.epochs + 1):
        ctx = build_epoch_context(prep, pools, cfg, epoch)
        if dump_views_dir:
            _dump_views(dump_views_dir, prep, ctx, params, cfg)
        order = list(pairs_sorted)
        random.Random(derive_seed(cfg.seed, "batch", epoch)).shuffle(order)
        sums = {"bpr": 0.0, "con": 0.0, "joint": 0.0}
        num_batches = 0
        for b in range(0, len(order), cfg.batch_size):
            chunk = order[b:b + cfg.batch_size]
            users = [u for u, _ in chunk]
            rng_neg = random.Random(derive_seed(cfg.seed, "neg", epoch, num_batches))
            negs = sample_negatives(prep.user_items_full, users, prep.num_items, rng_neg)
            batch_users = torch.tensor(users, dtype=torch.int64)
            batch_pos = torch.tensor([i for _, i in chunk], dtype=torch.int64)
            batch_neg = torch.tensor(negs, dtype=torch.int64)
            loss, parts = compute_batch_loss(params, prep, cfg, ctx,
                                             batch_users, batch_pos, batch_neg)
            if not math.isfinite(parts["joint"]):
                payload = {
                    "epoch": epoch, "batch": num_batches, "parts": parts,
                    "param_norms": {n: float(p.detach().norm())
                                    for n, p in params.named_parameters()},
                }
                if diagnostics_dir:
                    _dump_diagnostics(diagnostics_dir, payload)
                raise NonFiniteLossError(f"non-finite loss at epoch {epoch}: {parts}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            for key in sums:
                sums[key] += parts[key]
            num_batches += 1

        row = {
            "epoch": epoch,
            "bpr": sums["bpr"] / num_batches,
            "con": sums["con"] / num_batches,
            "joint": sums["joint"] / num_batches,
            "val_recall": float("nan"),
            "val_ndcg": float("nan"),
        }
        if has_validation:
            ranking = evaluate_model(params, prep, cfg, k=eval_k, target="validation")
            row["val_recall"] = ranking.recall
            row["val_ndcg"] = ranking.ndcg
            improved = result.best_epoch < 0 or \
                ranking.recall > result.best_recall + 1e-12
            if improved:
                result.best_recall = ranking.recall
                result.best_epoch = epoch
                best_state = copy.deepcopy(params.state_dict())
                bad_epochs = 0
            else:
                bad_epochs += 1
        result.history.append(row)
        log.info(
            "epoch %d: joint=%.6f bpr=%.6f con=%.6f val_recall=%s",
            epoch, row["joint"], row["bpr"], row["con"],
            f"{row['val_recall']:.4f}" if has_validation else "n/a",
        )
        if has_validation and bad_epochs >= cfg.patience:
            result.stopped_early = True
            log.info("early stop at epoch %d (patience %d)", epoch, cfg.patience)
            break

    if best_state is not None:
        params.load_state_dict(best_state)
    else:
        result.best_epoch = cfg.epochs
    return result
