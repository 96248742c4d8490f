import pytest

from ckgrec.augmenter import AugmentationPools, PoolEntry
from ckgrec.kg import (
    KIND_IA,
    KIND_UI,
    InteractionGraph,
    Triplet,
    TripartiteKG,
    Vocab,
    derive_ii_triplets,
    split_interactions,
)
from ckgrec.training import TrainConfig


def build_kg(user_items: dict[str, list[str]], facts: list[tuple[str, str, str]],
             extra_items: list[str] = (), derive: bool = True) -> TripartiteKG:
    """Assemble a TripartiteKG from name-level interactions and facts."""
    vocab = Vocab()
    pairs = []
    for user, items in user_items.items():
        u = vocab.users.add(user)
        for item in items:
            pairs.append((u, vocab.items.add(item)))
    for item in extra_items:
        vocab.items.add(item)
    ia = []
    seen = set()
    for item, rel, attr in facts:
        t = Triplet(vocab.items.id(item), vocab.add_relation(rel, KIND_IA),
                    vocab.attributes.add(attr), KIND_IA)
        if t not in seen:
            seen.add(t)
            ia.append(t)
    ii = derive_ii_triplets(ia, vocab, cap_per_attribute=500, seed=0) if derive else []
    return TripartiteKG(vocab, InteractionGraph.from_pairs(pairs), ia, ii)


@pytest.fixture
def fruit_kg() -> TripartiteKG:
    """Small named dataset used by augmenter and explanation tests."""
    return build_kg(
        user_items={
            "alice": ["apple", "banana", "cherry"],
            "bob": ["banana", "durian"],
            "carol": ["apple", "durian", "cherry"],
        },
        facts=[
            ("apple", "has_category", "fruit"),
            ("banana", "has_category", "fruit"),
            ("cherry", "has_category", "fruit"),
            ("durian", "has_category", "fruit"),
            ("apple", "has_color", "red"),
            ("cherry", "has_color", "red"),
            ("banana", "has_color", "yellow"),
        ],
    )


# The desk-scale instance used by the gradient and exclusion suites:
# 5 users, 8 items, 6 attributes, 2 fact relations.
_GRAD_USER_ITEMS = {
    "u0": ["i0", "i1", "i2", "i3"],
    "u1": ["i1", "i2", "i4"],
    "u2": ["i0", "i3", "i5", "i6"],
    "u3": ["i2", "i4", "i6", "i7"],
    "u4": ["i0", "i5", "i7"],
}
_GRAD_FACTS = [
    ("i0", "has_tag", "a0"),
    ("i1", "has_tag", "a0"),
    ("i1", "has_group", "a1"),
    ("i2", "has_tag", "a2"),
    ("i2", "has_group", "a1"),
    ("i3", "has_tag", "a2"),
    ("i3", "has_group", "a3"),
    ("i4", "has_tag", "a4"),
    ("i5", "has_group", "a5"),
    ("i5", "has_tag", "a4"),
    ("i6", "has_tag", "a5"),
]


@pytest.fixture
def grad_kg() -> TripartiteKG:
    return build_kg(_GRAD_USER_ITEMS, _GRAD_FACTS)


@pytest.fixture
def grad_split(grad_kg):
    # every user has <10 interactions, so the 8:1:1 floors keep all in train
    return split_interactions(grad_kg.interactions, seed=0)


@pytest.fixture
def grad_cfg() -> TrainConfig:
    return TrainConfig(
        learning_rate=1e-3,
        embed_dim=8,
        num_layers=2,
        num_experts=2,
        contrastive_weight=1e-3,
        reg_weight=1e-4,
        add_ratio=0.5,
        del_ratio=0.2,
        drop_prob=0.05,
        batch_size=1024,
        epochs=1,
        seed=7,
    )


def make_pools(kg: TripartiteKG) -> AugmentationPools:
    """Hand-built pools honoring the pool invariants for the gradient fixture."""
    v = kg.vocab
    pools = AugmentationPools()

    def fact(item, rel, attr):
        return Triplet(v.items.id(item), v.relations.id(rel), v.attributes.id(attr), KIND_IA)

    entry = PoolEntry(0, "test")
    # adds: facts absent from the base graph
    pools.add_user[fact("i0", "has_group", "a1")] = entry
    pools.add_user[fact("i7", "has_tag", "a3")] = entry
    pools.add_item[fact("i4", "has_group", "a3")] = entry
    pools.add_item[fact("i6", "has_group", "a0")] = entry
    # deletes: facts present in the base graph
    pools.del_user_ia[fact("i1", "has_tag", "a0")] = entry
    pools.del_item[fact("i5", "has_tag", "a4")] = entry
    # one interaction delete
    pools.del_user_ui[Triplet(v.users.id("u0"), v.interact_id, v.items.id("i1"), KIND_UI)] = entry
    return pools
