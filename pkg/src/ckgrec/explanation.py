"""Confidence-guided explanation generation.

After training, the two add pools are filtered by confidence into an
augmented graph; reason paths ``user -> bridge item -> target item`` are
extracted where an item-item link is witnessed by a shared attribute, and a
chain-of-thought prompt asks the backend to pick the most plausible path and
phrase a review-style explanation.
"""

from __future__ import annotations

import logging
import random
import re
from dataclasses import dataclass, field

import torch

from .augmenter import AugmentationPools
from .encoder import ModelParams, attention_aggregate, triplet_confidence
from .errors import BackendError
from .kg import DatasetSplit, TripartiteKG, Triplet, shared_relation_name
from .llm import LLMBackend
from .rng import derive_seed
from .views import TripletArrays

log = logging.getLogger(__name__)


def confidence_table(
    params: ModelParams,
    kg: TripartiteKG,
    extra: list[Triplet] | None = None,
) -> dict[tuple[int, int, int], float]:
    """Confidence of every base fact plus any extra candidate facts.

    Item embeddings are aggregated over the base graph; the scorer itself
    works for any (item, relation, attribute) triple.
    """
    triplets = sorted(set(kg.ia) | set(extra or ()))
    if not triplets:
        return {}
    base = TripletArrays.from_triplets(kg.ia)
    arrays = TripletArrays.from_triplets(triplets)
    with torch.no_grad():
        x1 = attention_aggregate(params, base.items, base.attrs)
        phi = triplet_confidence(params, x1, arrays.items, arrays.rels, arrays.attrs)
    return {
        (t.head, t.relation, t.tail): float(v)
        for t, v in zip(triplets, phi.tolist())
    }


@dataclass
class AugmentedKG:
    """Base graph united with the confidence-filtered pool additions."""

    kg: TripartiteKG
    added: frozenset
    threshold: float
    admitted: int
    rejected: int
    item_attrs: dict[int, list[tuple[int, int]]] = field(init=False)
    ia_set: set = field(init=False)

    def __post_init__(self) -> None:
        self.ia_set = set(self.kg.ia_set) | set(self.added)
        self.item_attrs = {
            i: list(pairs) for i, pairs in self.kg.item_attrs.items()
        }
        for t in sorted(self.added):
            self.item_attrs.setdefault(t.head, []).append((t.relation, t.tail))


def build_augmented_kg(
    kg: TripartiteKG,
    pools: AugmentationPools,
    confidences: dict[tuple[int, int, int], float],
    threshold: float,
) -> AugmentedKG:
    """Admit pool additions whose confidence reaches the threshold."""
    candidates = sorted(set(pools.add_user) | set(pools.add_item))
    admitted = [
        t for t in candidates
        if confidences.get((t.head, t.relation, t.tail), float("-inf")) >= threshold
    ]
    rejected = len(candidates) - len(admitted)
    log.info("augmented graph: admitted %d / rejected %d pool additions",
             len(admitted), rejected)
    return AugmentedKG(kg, frozenset(admitted), threshold, len(admitted), rejected)


@dataclass(frozen=True)
class ReasonPath:
    """user -> bridge -> target via an item link witnessed by a shared attribute."""

    user: int
    bridge: int
    target: int
    link_relation: int
    witness_relation: int
    witness_attribute: int
    confidence_bridge: float
    confidence_target: float

    @property
    def min_confidence(self) -> float:
        return min(self.confidence_bridge, self.confidence_target)


def extract_reason_paths(
    aug: AugmentedKG,
    split: DatasetSplit,
    confidences: dict[tuple[int, int, int], float],
    user: int,
    target: int,
) -> list[ReasonPath]:
    """All bridges: training items of the user that share an item link with the
    target, each backed by the best shared attribute.

    Witness candidates must appear on both sides in the augmented graph;
    those matching the link relation are preferred, and ties resolve to the
    highest min-confidence pair. Bridges with no witness are dropped. An
    empty result means the pair is not explainable, not an error.
    """
    kg = aug.kg
    interacted = split.train.items_of(user)
    if not interacted:
        return []
    link_rel_names = {
        rel_id: kg.vocab.relations.name(rel_id)
        for rel_id in range(kg.vocab.num_relations)
    }

    def witness_conf(item: int, rel: int, attr: int) -> float:
        return confidences.get((item, rel, attr), float("-inf"))

    paths: list[ReasonPath] = []
    for bridge in sorted(set(interacted)):
        if bridge == target:
            continue
        links = sorted({
            t.relation
            for t in kg.item_links.get(bridge, [])
            if {t.head, t.tail} == {bridge, target}
        })
        if not links:
            continue
        shared = sorted(
            set(aug.item_attrs.get(bridge, [])) & set(aug.item_attrs.get(target, []))
        )
        if not shared:
            continue
        for link_rel in links:
            matching = [
                (r, a) for r, a in shared
                if shared_relation_name(link_rel_names[r]) == link_rel_names[link_rel]
            ]
            candidates = matching if matching else shared
            best = max(
                candidates,
                key=lambda ra: (
                    min(witness_conf(bridge, *ra), witness_conf(target, *ra)),
                    -ra[0], -ra[1],
                ),
            )
            cb = witness_conf(bridge, *best)
            ct = witness_conf(target, *best)
            if cb == float("-inf") or ct == float("-inf"):
                continue
            paths.append(ReasonPath(
                user, bridge, target, link_rel, best[0], best[1], cb, ct,
            ))
    return paths


def select_context_items(
    split: DatasetSplit,
    user: int,
    paths: list[ReasonPath],
    size: int,
    seed: int,
) -> list[int]:
    """Extra interacted items shown to the backend, never overlapping the
    bridge items."""
    exclude = {p.bridge for p in paths} | {p.target for p in paths}
    pool = sorted(set(split.train.items_of(user)) - exclude)
    rng = random.Random(derive_seed(seed, "context", user))
    if len(pool) <= size:
        return pool
    return sorted(rng.sample(pool, size))


_PROMPT = """You are writing a short, natural explanation of why an item suits
a particular user, based on a knowledge graph.

The user previously interacted with (context): {context}

The recommended item is: {target}

Candidate reasoning paths (each one: the user chose the bridge item, the
bridge item is linked to the recommendation, and both share an attribute;
the two bracketed numbers are the learned reliability scores of the shared
attribute on the bridge side and on the recommendation side):
{paths}

Work through these steps:
1. Look at the user's past interactions and summarize what they tend to pick.
2. Check how each candidate path ties an earlier choice to the recommended item.
3. Judge which shared attribute would genuinely matter to this user.
4. Weigh the reliability scores: prefer paths whose scores are high on both sides.
5. Write one short, colloquial, review-style explanation that never recites
   the raw triples or the scores.

End your reply with two things: the line
SELECTED_PATH: <index of the most convincing path>
followed by the explanation text."""


def _render_path(p: ReasonPath, kg: TripartiteKG) -> str:
    v = kg.vocab
    return (
        f"chose {v.items.name(p.bridge)} ; "
        f"{v.items.name(p.bridge)} --{v.relations.name(p.link_relation)}--> "
        f"{v.items.name(p.target)} ; "
        f"shared attribute {v.attributes.name(p.witness_attribute)} "
        f"via {v.relations.name(p.witness_relation)} -> "
        f"[{p.confidence_bridge:.3f}, {p.confidence_target:.3f}]"
    )


@dataclass
class ExplanationRequest:
    user: int
    target: int
    paths: list[ReasonPath]
    context_items: list[int]
    prompt: str


def build_explanation_prompt(
    paths: list[ReasonPath],
    context_items: list[int],
    kg: TripartiteKG,
) -> str:
    if not paths:
        raise ValueError("need at least one reason path")
    v = kg.vocab
    rendered = "\n".join(
        f"  {idx}. {_render_path(p, kg)}" for idx, p in enumerate(paths)
    )
    context = ", ".join(v.items.name(i) for i in context_items) or "(none)"
    return _PROMPT.format(
        context=context,
        target=v.items.name(paths[0].target),
        paths=rendered,
    )


class ExplanationBackendError(BackendError):
    """Backend failure with the request preserved for retry."""

    def __init__(self, message: str, request: ExplanationRequest) -> None:
        super().__init__(message)
        self.request = request


@dataclass
class ExplanationResult:
    explainable: bool
    selected_index: int | None = None
    selected_path: ReasonPath | None = None
    explanation: str | None = None
    fallback_used: bool = False
    raw_response: str | None = None
    paths: list[ReasonPath] = field(default_factory=list)
    context_items: list[int] = field(default_factory=list)


_SELECTED = re.compile(r"SELECTED_PATH\s*:\s*(-?\d+)")


def generate_explanation(
    request: ExplanationRequest, backend: LLMBackend
) -> ExplanationResult:
    """Query the backend and parse its path choice.

    A missing or out-of-range index falls back to the path with the highest
    min-confidence, flagged as such.
    """
    try:
        response = backend.send(request.prompt)
    except BackendError as exc:
        raise ExplanationBackendError(str(exc), request) from exc
    match = _SELECTED.search(response)
    fallback = False
    if match and 0 <= int(match.group(1)) < len(request.paths):
        index = int(match.group(1))
        text = _SELECTED.sub("", response).strip()
    else:
        fallback = True
        index = max(range(len(request.paths)),
                    key=lambda k: (request.paths[k].min_confidence, -k))
        text = response.strip()
        log.warning("backend response had no usable SELECTED_PATH; "
                    "falling back to highest min-confidence path %d", index)
    return ExplanationResult(
        explainable=True,
        selected_index=index,
        selected_path=request.paths[index],
        explanation=text,
        fallback_used=fallback,
        raw_response=response,
        paths=request.paths,
        context_items=request.context_items,
    )


def explain(
    kg: TripartiteKG,
    split: DatasetSplit,
    params: ModelParams,
    pools: AugmentationPools,
    backend: LLMBackend,
    user: int,
    target: int,
    threshold: float = 0.0,
    context_size: int = 5,
    seed: int = 0,
) -> ExplanationResult:
    """End-to-end explanation for one (user, item) pair."""
    extra = sorted(set(pools.add_user) | set(pools.add_item))
    conf = confidence_table(params, kg, extra=extra)
    aug = build_augmented_kg(kg, pools, conf, threshold)
    paths = extract_reason_paths(aug, split, conf, user, target)
    if not paths:
        return ExplanationResult(explainable=False)
    context = select_context_items(split, user, paths, context_size, seed)
    prompt = build_explanation_prompt(paths, context, kg)
    request = ExplanationRequest(user, target, paths, context, prompt)
    return generate_explanation(request, backend)
