"""Interaction graph and tripartite knowledge graph: vocabulary management,
TSV ingestion, item-item derivation from shared attributes, and per-user
train/validation/test splitting.

File formats (UTF-8, tab separated, ``#`` comment lines skipped):
  interactions.tsv   user<TAB>item
  kg_ia.tsv          item<TAB>relation<TAB>attribute
  kg_ii.tsv          item<TAB>relation<TAB>item     (optional, overrides derivation)
"""

from __future__ import annotations

import itertools
import logging
import random
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

from .errors import DataError
from .rng import derive_seed

log = logging.getLogger(__name__)

KIND_UI = "UI"
KIND_IA = "IA"
KIND_II = "II"
REL_INTERACT = "interact"


class Triplet(NamedTuple):
    head: int
    relation: int
    tail: int
    kind: str


class NameIndex:
    """Bidirectional map between external string names and dense local IDs."""

    def __init__(self) -> None:
        self._ids: dict[str, int] = {}
        self._names: list[str] = []

    def add(self, name: str) -> int:
        existing = self._ids.get(name)
        if existing is not None:
            return existing
        new_id = len(self._names)
        self._ids[name] = new_id
        self._names.append(name)
        return new_id

    def id(self, name: str) -> int:
        try:
            return self._ids[name]
        except KeyError:
            raise KeyError(f"unknown name: {name!r}") from None

    def get(self, name: str) -> int | None:
        return self._ids.get(name)

    def name(self, local_id: int) -> str:
        return self._names[local_id]

    def __contains__(self, name: str) -> bool:
        return name in self._ids

    def __len__(self) -> int:
        return len(self._names)

    def names(self) -> list[str]:
        return list(self._names)


@dataclass
class Vocab:
    """Role-local dense ID spaces for users, items, attributes and relations.

    Relations carry a kind tag (``interact`` | ``IA`` | ``II``); the unique
    ``interact`` relation is registered at construction.
    """

    users: NameIndex = field(default_factory=NameIndex)
    items: NameIndex = field(default_factory=NameIndex)
    attributes: NameIndex = field(default_factory=NameIndex)
    relations: NameIndex = field(default_factory=NameIndex)
    relation_kinds: list[str] = field(default_factory=list)
    interact_id: int = -1

    def __post_init__(self) -> None:
        if self.interact_id < 0:
            self.interact_id = self.add_relation(REL_INTERACT, "interact")

    def add_relation(self, name: str, kind: str) -> int:
        existing = self.relations.get(name)
        if existing is not None:
            if self.relation_kinds[existing] != kind:
                raise DataError(
                    f"relation {name!r} already registered with kind "
                    f"{self.relation_kinds[existing]!r}, not {kind!r}"
                )
            return existing
        rel_id = self.relations.add(name)
        self.relation_kinds.append(kind)
        return rel_id

    def relation_kind(self, rel_id: int) -> str:
        return self.relation_kinds[rel_id]

    @property
    def num_users(self) -> int:
        return len(self.users)

    @property
    def num_items(self) -> int:
        return len(self.items)

    @property
    def num_attributes(self) -> int:
        return len(self.attributes)

    @property
    def num_relations(self) -> int:
        return len(self.relations)


@dataclass
class InteractionGraph:
    """Observed positive (user, item) pairs with adjacency in both directions."""

    pairs: list[tuple[int, int]]
    user_items: dict[int, list[int]]
    item_users: dict[int, list[int]]
    pair_set: set[tuple[int, int]]

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[int, int]]) -> "InteractionGraph":
        seen: set[tuple[int, int]] = set()
        ordered: list[tuple[int, int]] = []
        user_items: dict[int, list[int]] = {}
        item_users: dict[int, list[int]] = {}
        for u, i in pairs:
            if (u, i) in seen:
                continue
            seen.add((u, i))
            ordered.append((u, i))
            user_items.setdefault(u, []).append(i)
            item_users.setdefault(i, []).append(u)
        return cls(ordered, user_items, item_users, seen)

    @property
    def num_pairs(self) -> int:
        return len(self.pairs)

    def items_of(self, user: int) -> list[int]:
        return self.user_items.get(user, [])

    def users_of(self, item: int) -> list[int]:
        return self.item_users.get(item, [])


@dataclass
class DatasetSplit:
    train: InteractionGraph
    validation: InteractionGraph
    test: InteractionGraph


@dataclass
class TripartiteKG:
    """The unified graph: interactions plus item-attribute and item-item facts."""

    vocab: Vocab
    interactions: InteractionGraph
    ia: list[Triplet]
    ii: list[Triplet]
    ia_set: set[Triplet] = field(init=False)
    ii_set: set[Triplet] = field(init=False)
    item_attrs: dict[int, list[tuple[int, int]]] = field(init=False)
    item_links: dict[int, list[Triplet]] = field(init=False)

    def __post_init__(self) -> None:
        self.ia_set = set(self.ia)
        self.ii_set = set(self.ii)
        self.item_attrs = {}
        for t in self.ia:
            self.item_attrs.setdefault(t.head, []).append((t.relation, t.tail))
        self.item_links = {}
        for t in self.ii:
            self.item_links.setdefault(t.head, []).append(t)
            self.item_links.setdefault(t.tail, []).append(t)

    @property
    def num_ia(self) -> int:
        return len(self.ia)

    @property
    def num_ii(self) -> int:
        return len(self.ii)

    def has_triplet(self, t: Triplet) -> bool:
        if t.kind == KIND_IA:
            return t in self.ia_set
        if t.kind == KIND_II:
            return t in self.ii_set or Triplet(t.tail, t.relation, t.head, KIND_II) in self.ii_set
        if t.kind == KIND_UI:
            return (t.head, t.tail) in self.interactions.pair_set
        return False


def _read_rows(path: str, n_cols: int) -> list[tuple[int, list[str]]]:
    rows: list[tuple[int, list[str]]] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n").rstrip("\r")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            cols = line.split("\t")
            if len(cols) != n_cols or any(not c for c in cols):
                raise DataError(
                    f"{path}:{lineno}: expected {n_cols} non-empty tab-separated "
                    f"fields, got {line!r}"
                )
            rows.append((lineno, cols))
    return rows


def load_interactions(path: str, vocab: Vocab) -> InteractionGraph:
    """Read ``user<TAB>item`` pairs, registering unseen users and items.

    Duplicate pairs are collapsed (count logged); an empty file is an error.
    """
    rows = _read_rows(path, 2)
    if not rows:
        raise DataError(f"{path}: no interaction pairs found")
    pairs: list[tuple[int, int]] = []
    for _, (user_name, item_name) in rows:
        pairs.append((vocab.users.add(user_name), vocab.items.add(item_name)))
    graph = InteractionGraph.from_pairs(pairs)
    dupes = len(pairs) - graph.num_pairs
    if dupes:
        log.info("%s: collapsed %d duplicate interaction(s)", path, dupes)
    return graph


def load_ia_triplets(path: str, vocab: Vocab) -> list[Triplet]:
    """Read ``item<TAB>relation<TAB>attribute`` facts.

    Items must already exist in the vocabulary; new attributes and relations
    are registered. Lines naming unknown items fail the whole load.
    """
    rows = _read_rows(path, 3)
    bad = [lineno for lineno, (item, _, _) in rows if item not in vocab.items]
    if bad:
        raise DataError(
            f"{path}: unknown item name on line(s) {', '.join(map(str, bad))}"
        )
    triplets: list[Triplet] = []
    seen: set[Triplet] = set()
    for _, (item, rel, attr) in rows:
        t = Triplet(
            vocab.items.id(item),
            vocab.add_relation(rel, KIND_IA),
            vocab.attributes.add(attr),
            KIND_IA,
        )
        if t in seen:
            continue
        seen.add(t)
        triplets.append(t)
    dupes = len(rows) - len(triplets)
    if dupes:
        log.info("%s: collapsed %d duplicate fact(s)", path, dupes)
    return triplets


def load_ii_triplets(path: str, vocab: Vocab) -> list[Triplet]:
    """Read ``item<TAB>relation<TAB>item`` links; both items must exist."""
    rows = _read_rows(path, 3)
    bad = [
        lineno
        for lineno, (a, _, b) in rows
        if a not in vocab.items or b not in vocab.items or a == b
    ]
    if bad:
        raise DataError(
            f"{path}: unknown item or self-link on line(s) {', '.join(map(str, bad))}"
        )
    triplets: list[Triplet] = []
    seen: set[Triplet] = set()
    for _, (a, rel, b) in rows:
        ia, ib = vocab.items.id(a), vocab.items.id(b)
        head, tail = (ia, ib) if ia < ib else (ib, ia)
        t = Triplet(head, vocab.add_relation(rel, KIND_II), tail, KIND_II)
        if t not in seen:
            seen.add(t)
            triplets.append(t)
    return triplets


def shared_relation_name(ia_relation_name: str) -> str:
    if ia_relation_name.startswith("has_"):
        return "same_" + ia_relation_name[len("has_"):]
    return "same_" + ia_relation_name


def derive_ii_triplets(
    ia: Sequence[Triplet],
    vocab: Vocab,
    cap_per_attribute: int = 500,
    seed: int = 0,
) -> list[Triplet]:
    """Emit (i, same-r, j) for item pairs sharing an attribute under relation r.

    Pairs are stored once with head < tail. Each (relation, attribute) group
    contributes at most ``cap_per_attribute`` pairs, chosen by seeded uniform
    sampling, bounding the quadratic blowup of popular attributes.
    """
    if cap_per_attribute < 1:
        raise ValueError("cap_per_attribute must be >= 1")
    groups: dict[tuple[int, int], list[int]] = {}
    for t in ia:
        groups.setdefault((t.relation, t.tail), []).append(t.head)

    out: set[Triplet] = set()
    for (rel, attr), items in sorted(groups.items()):
        uniq = sorted(set(items))
        if len(uniq) < 2:
            continue
        shared_rel = vocab.add_relation(
            shared_relation_name(vocab.relations.name(rel)), KIND_II
        )
        pairs = list(itertools.combinations(uniq, 2))
        if len(pairs) > cap_per_attribute:
            rng = random.Random(derive_seed(seed, "ii", rel, attr))
            pairs = sorted(rng.sample(pairs, cap_per_attribute))
        for a, b in pairs:
            out.add(Triplet(a, shared_rel, b, KIND_II))
    return sorted(out)


def split_interactions(
    graph: InteractionGraph,
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1),
    seed: int = 0,
) -> DatasetSplit:
    """Per-user split of interacted items by seeded shuffle.

    Validation and test sizes are floored; the remainder goes to train, so a
    user with 10 items splits 8/1/1. Users with fewer than 3 interactions
    keep everything in train (count logged).
    """
    if abs(sum(ratios) - 1.0) > 1e-9 or any(r < 0 for r in ratios):
        raise ValueError(f"ratios must be non-negative and sum to 1, got {ratios}")
    rng = random.Random(derive_seed(seed, "split"))
    train: list[tuple[int, int]] = []
    validation: list[tuple[int, int]] = []
    test: list[tuple[int, int]] = []
    tiny_users = 0
    for user in sorted(graph.user_items):
        items = list(graph.user_items[user])
        rng.shuffle(items)
        n = len(items)
        if n < 3:
            tiny_users += 1
            train.extend((user, i) for i in items)
            continue
        n_val = int(n * ratios[1])
        n_test = int(n * ratios[2])
        n_train = n - n_val - n_test
        train.extend((user, i) for i in items[:n_train])
        validation.extend((user, i) for i in items[n_train:n_train + n_val])
        test.extend((user, i) for i in items[n_train + n_val:])
    if tiny_users:
        log.info("split: %d user(s) with <3 interactions kept entirely in train", tiny_users)
    return DatasetSplit(
        InteractionGraph.from_pairs(train),
        InteractionGraph.from_pairs(validation),
        InteractionGraph.from_pairs(test),
    )


def load_dataset(
    interactions_path: str,
    kg_ia_path: str | None = None,
    kg_ii_path: str | None = None,
    cap_per_attribute: int = 500,
    seed: int = 0,
) -> TripartiteKG:
    """Load interactions plus knowledge files into a TripartiteKG.

    When no explicit item-item file is given, links are derived from shared
    attributes.
    """
    vocab = Vocab()
    graph = load_interactions(interactions_path, vocab)
    ia = load_ia_triplets(kg_ia_path, vocab) if kg_ia_path else []
    if kg_ii_path:
        ii = load_ii_triplets(kg_ii_path, vocab)
    else:
        ii = derive_ii_triplets(ia, vocab, cap_per_attribute=cap_per_attribute, seed=seed)
    return TripartiteKG(vocab, graph, ia, ii)
