"""Synthetic attribute-driven datasets.

Items draw their facts from topical attribute groups and users prefer one or
two topics, so interactions are genuinely driven by the true facts; a
configurable fraction of noise facts is injected on top. The true/noise
labels are returned so experiments can measure whether the learned
confidence separates them.
"""

from __future__ import annotations

import os
import random
from dataclasses import dataclass

from .kg import (
    KIND_IA,
    InteractionGraph,
    TripartiteKG,
    Triplet,
    Vocab,
    derive_ii_triplets,
)
from .rng import derive_seed

IA_RELATIONS = ("has_tag", "has_group")


@dataclass
class SyntheticDataset:
    kg: TripartiteKG
    true_facts: frozenset
    noise_facts: frozenset


def _weighted_sample(population, weights, k, rng: random.Random):
    # Efraimidis-Spirakis keys: weighted sampling without replacement
    keyed = sorted(
        population,
        key=lambda idx: -(rng.random() ** (1.0 / weights[idx])),
    )
    return keyed[:k]


def generate_dataset(
    num_users: int = 200,
    num_items: int = 300,
    num_attributes: int = 40,
    num_topics: int = 8,
    facts_per_item: int = 3,
    interactions_per_user: tuple[int, int] = (12, 24),
    noise_fraction: float = 0.30,
    cap_per_attribute: int = 200,
    seed: int = 0,
) -> SyntheticDataset:
    rng = random.Random(derive_seed(seed, "synthetic"))
    vocab = Vocab()
    for u in range(num_users):
        vocab.users.add(f"u{u:04d}")
    for i in range(num_items):
        vocab.items.add(f"i{i:04d}")
    for a in range(num_attributes):
        vocab.attributes.add(f"a{a:04d}")
    rel_ids = [vocab.add_relation(r, KIND_IA) for r in IA_RELATIONS]

    # Attributes are partitioned into topics; each item draws its facts from
    # one topic, so shared attributes mean shared topic.
    topic_attrs = [[] for _ in range(num_topics)]
    for a in range(num_attributes):
        topic_attrs[a % num_topics].append(a)
    item_topic = [rng.randrange(num_topics) for _ in range(num_items)]
    true_facts: set[Triplet] = set()
    item_attr_sets: list[set[int]] = []
    for i in range(num_items):
        pool = topic_attrs[item_topic[i]]
        chosen = rng.sample(pool, min(facts_per_item, len(pool)))
        item_attr_sets.append(set(chosen))
        for k, a in enumerate(chosen):
            true_facts.add(Triplet(i, rel_ids[k % len(rel_ids)], a, KIND_IA))

    # Noise facts: random triples outside the true set.
    noise_facts: set[Triplet] = set()
    target = round(noise_fraction * len(true_facts))
    while len(noise_facts) < target:
        t = Triplet(
            rng.randrange(num_items),
            rel_ids[rng.randrange(len(rel_ids))],
            rng.randrange(num_attributes),
            KIND_IA,
        )
        if t not in true_facts:
            noise_facts.add(t)

    # Interactions: users prefer one or two topics and mostly pick items
    # whose true attributes overlap their preferred attribute set.
    pairs: list[tuple[int, int]] = []
    all_items = list(range(num_items))
    for u in range(num_users):
        topics = rng.sample(range(num_topics), rng.choice((1, 2)))
        prefs = {a for t in topics for a in topic_attrs[t]}
        weights = [
            0.05 + len(item_attr_sets[i] & prefs) for i in all_items
        ]
        # keep at least one uninteracted item per user so ranking losses
        # can always draw a negative
        count = min(rng.randint(*interactions_per_user), num_items - 1)
        for i in _weighted_sample(all_items, weights, count, rng):
            pairs.append((u, i))

    ia = sorted(true_facts | noise_facts)
    ii = derive_ii_triplets(ia, vocab, cap_per_attribute=cap_per_attribute, seed=seed)
    kg = TripartiteKG(vocab, InteractionGraph.from_pairs(pairs), ia, ii)
    return SyntheticDataset(kg, frozenset(true_facts), frozenset(noise_facts))


def write_tsv_dataset(kg: TripartiteKG, directory: str) -> dict[str, str]:
    """Write interactions.tsv and kg_ia.tsv for the CLI; returns the paths."""
    os.makedirs(directory, exist_ok=True)
    v = kg.vocab
    inter = os.path.join(directory, "interactions.tsv")
    with open(inter, "w", encoding="utf-8") as fh:
        for u, i in kg.interactions.pairs:
            fh.write(f"{v.users.name(u)}\t{v.items.name(i)}\n")
    facts = os.path.join(directory, "kg_ia.tsv")
    with open(facts, "w", encoding="utf-8") as fh:
        for t in kg.ia:
            fh.write(f"{v.items.name(t.head)}\t{v.relations.name(t.relation)}\t"
                     f"{v.attributes.name(t.tail)}\n")
    return {"interactions": inter, "kg_ia": facts}
