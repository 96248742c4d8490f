"""Dual-view two-step graph augmentation.

Step 1 edits the fact set: pool samples are merged into two view graphs,
each fact gets a confidence-driven keep probability, and a relaxed
binary-concrete draw decides which facts survive (straight-through gradients
keep the decision differentiable).

Step 2 edits the interaction graph: cross-view stability of item
representations is turned into a per-item keep probability, and two
Bernoulli masks plus the sampled interaction-delete set produce the two
contrastive interaction views.
"""

from __future__ import annotations

import logging
import random
from dataclasses import dataclass

import torch
from torch import Tensor

from .augmenter import AugmentationPools
from .kg import KIND_IA, InteractionGraph, TripartiteKG, Triplet
from .rng import derive_seed

log = logging.getLogger(__name__)

VIEW_USER = "user"
VIEW_ITEM = "item"


@dataclass
class TripletArrays:
    """Index-tensor form of a fact list, canonically sorted by (item, rel, attr)."""

    items: Tensor
    rels: Tensor
    attrs: Tensor

    @classmethod
    def from_triplets(cls, triplets) -> "TripletArrays":
        ordered = sorted(triplets)
        items = torch.tensor([t.head for t in ordered], dtype=torch.int64)
        rels = torch.tensor([t.relation for t in ordered], dtype=torch.int64)
        attrs = torch.tensor([t.tail for t in ordered], dtype=torch.int64)
        return cls(items, rels, attrs)

    def __len__(self) -> int:
        return int(self.items.numel())

    def select(self, index: Tensor) -> "TripletArrays":
        return TripletArrays(self.items[index], self.rels[index], self.attrs[index])

    def triplets(self) -> list[Triplet]:
        return [
            Triplet(int(i), int(r), int(a), KIND_IA)
            for i, r, a in zip(self.items, self.rels, self.attrs)
        ]


@dataclass
class ViewGraph:
    view: str
    triplets: tuple[Triplet, ...]
    arrays: TripletArrays

    @classmethod
    def from_set(cls, view: str, triplets) -> "ViewGraph":
        ordered = tuple(sorted(set(triplets)))
        return cls(view, ordered, TripletArrays.from_triplets(ordered))

    def __len__(self) -> int:
        return len(self.triplets)


@dataclass
class SampledPools:
    add_user: frozenset
    del_user_ia: frozenset
    del_user_ui: frozenset
    add_item: frozenset
    del_item: frozenset
    n_add: int
    n_del: int

    @classmethod
    def empty(cls) -> "SampledPools":
        e = frozenset()
        return cls(e, e, e, e, e, 0, 0)


def _sample(pool_keys, n: int, rng: random.Random) -> frozenset:
    keys = sorted(pool_keys)
    take = min(n, len(keys))
    if take < n:
        log.debug("pool smaller than request: %d < %d", len(keys), n)
    if take == 0:
        return frozenset()
    return frozenset(rng.sample(keys, take))


def sample_pools(
    pools: AugmentationPools,
    kg: TripartiteKG,
    add_ratio: float,
    del_ratio: float,
    seed: int = 0,
    base: str = "ia",
) -> SampledPools:
    """Uniform without-replacement samples from each pool.

    Target counts are ``round(ratio * base_size)`` capped at the pool size,
    where the base is the fact count (or the whole graph with ``base="full"``).
    The user-side delete sample is drawn from the combined fact/interaction
    delete pool and then split by kind.
    """
    if not (0.0 <= add_ratio <= 1.0 and 0.0 <= del_ratio <= 1.0):
        raise ValueError("ratios must lie in [0, 1]")
    if base == "ia":
        base_size = kg.num_ia
    elif base == "full":
        base_size = kg.num_ia + kg.num_ii + kg.interactions.num_pairs
    else:
        raise ValueError(f"unknown sampling base {base!r}")
    n_add = round(add_ratio * base_size)
    n_del = round(del_ratio * base_size)

    add_user = _sample(pools.add_user, n_add, random.Random(derive_seed(seed, "pool", "add_user")))
    add_item = _sample(pools.add_item, n_add, random.Random(derive_seed(seed, "pool", "add_item")))
    del_item = _sample(pools.del_item, n_del, random.Random(derive_seed(seed, "pool", "del_item")))
    combined = list(pools.del_user_ia) + list(pools.del_user_ui)
    del_user = _sample(combined, n_del, random.Random(derive_seed(seed, "pool", "del_user")))
    del_user_ia = frozenset(t for t in del_user if t.kind == KIND_IA)
    del_user_ui = del_user - del_user_ia
    return SampledPools(add_user, del_user_ia, del_user_ui, add_item, del_item, n_add, n_del)


def build_view_graphs(kg: TripartiteKG, sampled: SampledPools) -> tuple[ViewGraph, ViewGraph]:
    """Set algebra of the two fact views.

    User view: facts plus user-view adds minus the fact part of the user-view
    deletes. Item view: facts plus item-view adds minus item-view deletes.
    """
    base = kg.ia_set
    user = (base | sampled.add_user) - sampled.del_user_ia
    item = (base | sampled.add_item) - sampled.del_item
    return ViewGraph.from_set(VIEW_USER, user), ViewGraph.from_set(VIEW_ITEM, item)


def keep_probability(phi: Tensor, scale: float) -> Tensor:
    """Map confidence to a keep probability: sigmoid(phi * scale)."""
    if scale <= 0:
        raise ValueError("scale must be positive")
    return torch.sigmoid(phi * scale)


@dataclass
class DecisionMask:
    """Per-fact relaxed keep decision: soft value in [0,1], hard value in {0,1}."""

    soft: Tensor
    hard: Tensor

    @property
    def keep(self) -> Tensor:
        return self.hard > 0.5

    def __len__(self) -> int:
        return int(self.soft.numel())


def draw_gumbel_noise(n: int, generator: torch.Generator,
                      dtype: torch.dtype = torch.float64) -> tuple[Tensor, Tensor]:
    eps = 1e-12
    u1 = torch.rand(n, dtype=dtype, generator=generator)
    u2 = torch.rand(n, dtype=dtype, generator=generator)
    g1 = -torch.log(-torch.log(u1 + eps) + eps)
    g2 = -torch.log(-torch.log(u2 + eps) + eps)
    return g1, g2


def gumbel_decisions(
    probs: Tensor,
    temperature: float,
    generator: torch.Generator | None = None,
    noise: tuple[Tensor, Tensor] | None = None,
) -> DecisionMask:
    """Binary-concrete relaxation of Bernoulli(probs).

    soft = sigmoid((logit(p) + g1 - g2) / temperature) with two independent
    standard Gumbel draws; hard keeps iff soft > 0.5, which happens with
    probability exactly p for any temperature.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if noise is None:
        if generator is None:
            raise ValueError("pass either a generator or pre-drawn noise")
        noise = draw_gumbel_noise(int(probs.numel()), generator, probs.dtype)
    g1, g2 = noise
    eps = 1e-12
    p = probs.clamp(eps, 1.0 - eps)
    logit = torch.log(p) - torch.log1p(-p)
    soft = torch.sigmoid((logit + g1 - g2) / temperature)
    hard = (soft > 0.5).to(probs.dtype)
    return DecisionMask(soft=soft, hard=hard)


def threshold_decisions(probs: Tensor) -> DecisionMask:
    """Deterministic eval-time decisions: keep iff p >= 0.5, no noise."""
    hard = (probs >= 0.5).to(probs.dtype)
    return DecisionMask(soft=probs, hard=hard)


@dataclass
class RenewedView:
    """Survivors of a decision pass, with the multiplier carrying gradients."""

    arrays: TripletArrays
    phi: Tensor
    scale: Tensor | None
    kept_index: Tensor


def apply_decisions(
    arrays: TripletArrays,
    phi: Tensor,
    mask: DecisionMask,
    mode: str = "hard_st",
) -> RenewedView:
    """Renew a view graph according to the decision mask.

    hard_st: dropped facts are excluded outright; kept facts carry a
    straight-through multiplier whose forward value is exactly 1 and whose
    gradient is that of the soft decision.
    soft: nothing is excluded; contributions are scaled by the soft value.
    hard: dropped facts are excluded, no gradient tie (evaluation).
    """
    if len(mask) != len(arrays) or phi.numel() != len(arrays):
        raise ValueError(
            f"decision mask covers {len(mask)} facts, view has {len(arrays)}"
        )
    if mode == "soft":
        index = torch.arange(len(arrays))
        return RenewedView(arrays, phi, mask.soft, index)
    if mode not in ("hard_st", "hard"):
        raise ValueError(f"unknown decision mode {mode!r}")
    index = mask.keep.nonzero(as_tuple=True)[0]
    kept = arrays.select(index)
    kept_phi = phi[index]
    if mode == "hard":
        scale = None
    else:
        soft = mask.soft[index]
        scale = mask.hard[index] + (soft - soft.detach())
    return RenewedView(kept, kept_phi, scale, index)


def cross_view_stability(x_user_view: Tensor, x_item_view: Tensor) -> Tensor:
    """Row-wise cosine similarity between the two views' item representations.

    Zero-norm rows get stability 0 (logged).
    """
    nu = torch.linalg.norm(x_user_view, dim=1)
    ni = torch.linalg.norm(x_item_view, dim=1)
    denom = nu * ni
    zero = denom == 0
    if bool(zero.any()):
        log.debug("stability: %d zero-norm row(s) set to 0", int(zero.sum()))
    safe = torch.where(zero, torch.ones_like(denom), denom)
    s = (x_user_view * x_item_view).sum(1) / safe
    return torch.where(zero, torch.zeros_like(s), s)


def item_keep_probability(stability: Tensor, drop_prob: float) -> Tensor:
    """Turn stability into a per-item keep probability.

    Min-max normalized exp(stability), scaled by (1 - drop_prob)/mean, then
    clamped to [0, 1]; when all stabilities coincide every item keeps with
    probability 1 - drop_prob.
    """
    if not (0.0 <= drop_prob < 1.0):
        raise ValueError("drop_prob must lie in [0, 1)")
    e = torch.exp(stability.detach())
    lo, hi = e.min(), e.max()
    if float(hi - lo) < 1e-12:
        return torch.full_like(e, 1.0 - drop_prob)
    p = (1.0 - drop_prob) / e.mean() * (e - lo) / (hi - lo)
    return p.clamp(0.0, 1.0)


@dataclass
class MaskedInteractions:
    """One interaction view: surviving pairs plus the item mask that made them."""

    users: Tensor
    items: Tensor
    item_mask: Tensor

    @property
    def num_pairs(self) -> int:
        return int(self.users.numel())


def mask_interactions(
    pair_users: Tensor,
    pair_items: Tensor,
    keep_prob: Tensor,
    uniforms_user_view: Tensor,
    uniforms_item_view: Tensor,
    deleted_pairs: Tensor | None = None,
) -> tuple[MaskedInteractions, MaskedInteractions]:
    """Apply the two item masks (and the sampled interaction deletes) to the
    training pairs.

    Masks are Bernoulli(keep_prob) realized as ``uniform < p`` so callers can
    freeze the uniforms; an interaction survives a view iff its item's mask
    bit is 1, and the user view additionally removes ``deleted_pairs``.
    """
    mask_u = (uniforms_user_view < keep_prob).to(keep_prob.dtype)
    mask_i = (uniforms_item_view < keep_prob).to(keep_prob.dtype)
    keep_u = mask_u[pair_items] > 0.5
    if deleted_pairs is not None:
        keep_u = keep_u & ~deleted_pairs
    keep_i = mask_i[pair_items] > 0.5
    user_view = MaskedInteractions(pair_users[keep_u], pair_items[keep_u], mask_u)
    item_view = MaskedInteractions(pair_users[keep_i], pair_items[keep_i], mask_i)
    return user_view, item_view


def deleted_pair_mask(train: InteractionGraph, pair_users: Tensor,
                      pair_items: Tensor, sampled: SampledPools) -> Tensor:
    """Boolean per-pair tensor marking interactions named by the user-view
    delete sample."""
    deleted = {(t.head, t.tail) for t in sampled.del_user_ui}
    flags = [
        (int(u), int(i)) in deleted
        for u, i in zip(pair_users.tolist(), pair_items.tolist())
    ]
    return torch.tensor(flags, dtype=torch.bool)
