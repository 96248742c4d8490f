"""LLM-assisted knowledge-graph refinement.

Batches of collaborative signals are turned into two-view subgraphs, rendered
as prompts, sent to a pluggable backend, and the parsed advice is accumulated
into four persistent pools: user-view adds/deletes (the delete side covers
both facts and interactions) and item-view adds/deletes.

Pool file: JSONL, one record per triplet,
``{"view","action","kind","h","r","t","batch","backend"}``. A small sidecar
``<pool>.progress.json`` tracks completed batches so runs are resumable.
"""

from __future__ import annotations

import json
import logging
import os
import random
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from .errors import BackendError, BudgetExceededError, DataError
from .kg import (
    KIND_IA,
    KIND_UI,
    InteractionGraph,
    TripartiteKG,
    Triplet,
    Vocab,
)
from .llm import LLMBackend
from .rng import derive_seed

log = logging.getLogger(__name__)

VIEW_USER = "user"
VIEW_ITEM = "item"


@dataclass(frozen=True)
class Subgraph:
    view: str
    signals: tuple[tuple[int, int], ...]
    ui: tuple[Triplet, ...]
    ia: tuple[Triplet, ...]
    ii: tuple[Triplet, ...]


def extract_subgraph(
    kg: TripartiteKG,
    signals: list[tuple[int, int]],
    view: str,
    interactions: InteractionGraph | None = None,
) -> Subgraph:
    """Collect the triplets around a batch of (user, item) signals.

    User view: all interactions of the signal users plus the facts of every
    item those users touched. Item view: facts and item-item links incident
    to the signal items.
    """
    if not signals:
        raise ValueError("signals must be non-empty")
    graph = interactions if interactions is not None else kg.interactions
    for u, i in signals:
        if (u, i) not in graph.pair_set:
            raise DataError(f"signal ({u}, {i}) is not an observed interaction")

    interact = kg.vocab.interact_id
    if view == VIEW_USER:
        users = sorted({u for u, _ in signals})
        ui: list[Triplet] = []
        touched: set[int] = set()
        for u in users:
            for item in graph.items_of(u):
                ui.append(Triplet(u, interact, item, KIND_UI))
                touched.add(item)
        ia = [
            Triplet(i, r, a, KIND_IA)
            for i in sorted(touched)
            for r, a in kg.item_attrs.get(i, [])
        ]
        return Subgraph(view, tuple(signals), tuple(ui), tuple(sorted(set(ia))), ())
    if view == VIEW_ITEM:
        items = sorted({i for _, i in signals})
        ia = [
            Triplet(i, r, a, KIND_IA)
            for i in items
            for r, a in kg.item_attrs.get(i, [])
        ]
        ii = sorted({t for i in items for t in kg.item_links.get(i, [])})
        return Subgraph(view, tuple(signals), (), tuple(sorted(set(ia))), tuple(ii))
    raise ValueError(f"unknown view {view!r}")


def _render(t: Triplet, vocab: Vocab) -> str:
    rel = vocab.relations.name(t.relation)
    if t.kind == KIND_UI:
        return f"({vocab.users.name(t.head)}, {rel}, {vocab.items.name(t.tail)})"
    if t.kind == KIND_IA:
        return f"({vocab.items.name(t.head)}, {rel}, {vocab.attributes.name(t.tail)})"
    return f"({vocab.items.name(t.head)}, {rel}, {vocab.items.name(t.tail)})"


_USER_TEMPLATE = """You are auditing the knowledge base behind a recommender system.

Known interactions (user, interact, item):
{ui}

Item facts (item, relation, attribute):
{ia}

Tasks:
1. Verify the item facts. Propose facts to add (true but missing) and facts
   to delete (wrong or irrelevant).
2. Reason about the interactions and flag pairs that look inconsistent with
   that user's other choices. Interactions can only be deleted, never added.

Reply with a single JSON object and nothing else:
{{"add_ia": [["item", "relation", "attribute"], ...],
 "del_ia": [["item", "relation", "attribute"], ...],
 "del_ui": [["user", "item"], ...]}}
Every name must match one that appears above exactly."""

_ITEM_TEMPLATE = """You are auditing the item catalog of a knowledge base.

Item facts (item, relation, attribute):
{ia}

Item links (item, relation, item):
{ii}

Task: verify the item facts, treating the item links as supporting context
for which items should share attributes. Propose facts to add (true but
missing) and facts to delete (wrong or irrelevant).

Reply with a single JSON object and nothing else:
{{"add_ia": [["item", "relation", "attribute"], ...],
 "del_ia": [["item", "relation", "attribute"], ...]}}
Every name must match one that appears above exactly."""


def build_prompt(sub: Subgraph, vocab: Vocab) -> str:
    """Render a subgraph into the view-specific instruction prompt.

    Deterministic: triplet lines are sorted, so identical subgraphs yield
    byte-identical prompts.
    """
    if not (sub.ui or sub.ia or sub.ii):
        raise ValueError("subgraph is empty")

    def block(triplets: tuple[Triplet, ...]) -> str:
        if not triplets:
            return "(none)"
        return "\n".join(sorted(_render(t, vocab) for t in triplets))

    if sub.view == VIEW_USER:
        return _USER_TEMPLATE.format(ui=block(sub.ui), ia=block(sub.ia))
    return _ITEM_TEMPLATE.format(ia=block(sub.ia), ii=block(sub.ii))


@dataclass
class PoolDelta:
    """Vocabulary-resolved advice parsed from one backend response."""

    add_ia: set[Triplet] = field(default_factory=set)
    del_ia: set[Triplet] = field(default_factory=set)
    del_ui: set[Triplet] = field(default_factory=set)
    rejected: int = 0
    parse_failed: bool = False


def _extract_json(text: str) -> dict | None:
    for candidate in (text, text.strip().strip("`")):
        try:
            obj = json.loads(candidate)
            return obj if isinstance(obj, dict) else None
        except (json.JSONDecodeError, TypeError):
            pass
    start, end = text.find("{"), text.rfind("}")
    if 0 <= start < end:
        try:
            obj = json.loads(text[start:end + 1])
            return obj if isinstance(obj, dict) else None
        except json.JSONDecodeError:
            return None
    return None


def parse_response(text: str, vocab: Vocab, view: str) -> PoolDelta:
    """Parse backend advice into pool deltas, never raising.

    Anti-hallucination guard: every proposed entity is resolved against the
    vocabulary by exact name with the right role; anything unresolvable,
    mis-shaped, or outside the view's schema is dropped and counted.
    """
    delta = PoolDelta()
    obj = _extract_json(text) if isinstance(text, str) else None
    if obj is None:
        delta.parse_failed = True
        return delta
    delta.rejected += sum(1 for key in obj if key not in ("add_ia", "del_ia", "del_ui"))

    def resolve_ia(entry) -> Triplet | None:
        if not isinstance(entry, (list, tuple)) or len(entry) != 3:
            return None
        h, r, t = entry
        if not all(isinstance(x, str) for x in (h, r, t)):
            return None
        item = vocab.items.get(h)
        rel = vocab.relations.get(r)
        attr = vocab.attributes.get(t)
        if item is None or attr is None or rel is None:
            return None
        if vocab.relation_kind(rel) != KIND_IA:
            return None
        return Triplet(item, rel, attr, KIND_IA)

    def resolve_ui(entry) -> Triplet | None:
        if not isinstance(entry, (list, tuple)) or len(entry) != 2:
            return None
        u, i = entry
        if not (isinstance(u, str) and isinstance(i, str)):
            return None
        user = vocab.users.get(u)
        item = vocab.items.get(i)
        if user is None or item is None:
            return None
        return Triplet(user, vocab.interact_id, item, KIND_UI)

    for key, target, resolver in (
        ("add_ia", delta.add_ia, resolve_ia),
        ("del_ia", delta.del_ia, resolve_ia),
        ("del_ui", delta.del_ui, resolve_ui),
    ):
        entries = obj.get(key)
        if entries is None:
            continue
        if not isinstance(entries, list):
            delta.rejected += 1
            continue
        if key == "del_ui" and view != VIEW_USER:
            delta.rejected += len(entries)
            continue
        for entry in entries:
            resolved = resolver(entry)
            if resolved is None:
                delta.rejected += 1
            else:
                target.add(resolved)
    return delta


@dataclass(frozen=True)
class PoolEntry:
    batch: int
    backend: str


_POOL_KEYS = ("add_user", "del_user_ia", "del_user_ui", "add_item", "del_item")


class AugmentationPools:
    """The four advice pools with per-entry provenance.

    Insertion enforces the pool invariants: adds must be new facts, deletes
    must name triplets present in the graph, and a triplet proposed for both
    sides resolves to the delete (the add is evicted, conflict counted).
    """

    def __init__(self) -> None:
        self.add_user: dict[Triplet, PoolEntry] = {}
        self.del_user_ia: dict[Triplet, PoolEntry] = {}
        self.del_user_ui: dict[Triplet, PoolEntry] = {}
        self.add_item: dict[Triplet, PoolEntry] = {}
        self.del_item: dict[Triplet, PoolEntry] = {}
        self.skipped_existing = 0
        self.skipped_missing = 0
        self.conflicts = 0

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, AugmentationPools):
            return NotImplemented
        return all(getattr(self, k) == getattr(other, k) for k in _POOL_KEYS)

    def sizes(self) -> dict[str, int]:
        return {k: len(getattr(self, k)) for k in _POOL_KEYS}

    def _insert(self, pool: dict[Triplet, PoolEntry], t: Triplet, entry: PoolEntry) -> None:
        old = pool.get(t)
        if old is None or entry.batch < old.batch:
            pool[t] = entry

    def _apply_add(self, pool_name: str, del_name: str, t: Triplet,
                   kg: TripartiteKG, entry: PoolEntry) -> None:
        if t in kg.ia_set:
            self.skipped_existing += 1
            return
        if t in getattr(self, del_name):
            self.conflicts += 1
            log.debug("add/delete conflict, delete wins: %s", (t,))
            return
        self._insert(getattr(self, pool_name), t, entry)

    def _apply_del(self, pool_name: str, add_name: str | None, t: Triplet,
                   present: bool, entry: PoolEntry) -> None:
        if not present:
            self.skipped_missing += 1
            return
        if add_name is not None and t in getattr(self, add_name):
            del getattr(self, add_name)[t]
            self.conflicts += 1
            log.debug("add/delete conflict, delete wins: %s", (t,))
        self._insert(getattr(self, pool_name), t, entry)

    def apply_delta(
        self,
        delta: PoolDelta,
        view: str,
        kg: TripartiteKG,
        interactions: InteractionGraph,
        batch: int,
        backend_id: str,
    ) -> None:
        entry = PoolEntry(batch, backend_id)
        if view == VIEW_USER:
            for t in sorted(delta.del_ia):
                self._apply_del("del_user_ia", "add_user", t, t in kg.ia_set, entry)
            for t in sorted(delta.del_ui):
                self._apply_del(
                    "del_user_ui", None, t,
                    (t.head, t.tail) in interactions.pair_set, entry,
                )
            for t in sorted(delta.add_ia):
                self._apply_add("add_user", "del_user_ia", t, kg, entry)
        elif view == VIEW_ITEM:
            for t in sorted(delta.del_ia):
                self._apply_del("del_item", "add_item", t, t in kg.ia_set, entry)
            for t in sorted(delta.add_ia):
                self._apply_add("add_item", "del_item", t, kg, entry)
        else:
            raise ValueError(f"unknown view {view!r}")

    def _records(self, vocab: Vocab) -> list[dict]:
        spec = [
            ("add_user", VIEW_USER, "add", KIND_IA),
            ("del_user_ia", VIEW_USER, "del", KIND_IA),
            ("del_user_ui", VIEW_USER, "del", KIND_UI),
            ("add_item", VIEW_ITEM, "add", KIND_IA),
            ("del_item", VIEW_ITEM, "del", KIND_IA),
        ]
        records = []
        for pool_name, view, action, kind in spec:
            for t, entry in getattr(self, pool_name).items():
                if kind == KIND_UI:
                    h = vocab.users.name(t.head)
                    tail = vocab.items.name(t.tail)
                else:
                    h = vocab.items.name(t.head)
                    tail = vocab.attributes.name(t.tail)
                records.append({
                    "view": view,
                    "action": action,
                    "kind": kind,
                    "h": h,
                    "r": vocab.relations.name(t.relation),
                    "t": tail,
                    "batch": entry.batch,
                    "backend": entry.backend,
                })
        records.sort(key=lambda r: (r["view"], r["action"], r["kind"], r["h"], r["r"], r["t"]))
        return records

    def save(self, path: str, vocab: Vocab) -> None:
        payload = "".join(json.dumps(r) + "\n" for r in self._records(vocab))
        _atomic_write(path, payload)

    @classmethod
    def load(cls, path: str, vocab: Vocab) -> "AugmentationPools":
        pools = cls()
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                    view, action, kind = rec["view"], rec["action"], rec["kind"]
                    entry = PoolEntry(int(rec["batch"]), str(rec.get("backend", "")))
                    if kind == KIND_UI:
                        t = Triplet(
                            vocab.users.id(rec["h"]), vocab.relations.id(rec["r"]),
                            vocab.items.id(rec["t"]), KIND_UI,
                        )
                    else:
                        t = Triplet(
                            vocab.items.id(rec["h"]), vocab.relations.id(rec["r"]),
                            vocab.attributes.id(rec["t"]), KIND_IA,
                        )
                except (json.JSONDecodeError, KeyError, ValueError) as exc:
                    raise DataError(f"{path}:{lineno}: bad pool record") from exc
                if view == VIEW_USER and action == "add" and kind == KIND_IA:
                    pools.add_user[t] = entry
                elif view == VIEW_USER and action == "del" and kind == KIND_IA:
                    pools.del_user_ia[t] = entry
                elif view == VIEW_USER and action == "del" and kind == KIND_UI:
                    pools.del_user_ui[t] = entry
                elif view == VIEW_ITEM and action == "add" and kind == KIND_IA:
                    pools.add_item[t] = entry
                elif view == VIEW_ITEM and action == "del" and kind == KIND_IA:
                    pools.del_item[t] = entry
                else:
                    raise DataError(f"{path}:{lineno}: bad pool record {view}/{action}/{kind}")
        return pools


def _atomic_write(path: str, payload: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _progress_path(pool_path: str) -> str:
    return pool_path + ".progress.json"


def run_augmentation(
    kg: TripartiteKG,
    train: InteractionGraph,
    backend: LLMBackend,
    batch_size: int,
    seed: int = 0,
    pool_path: str | None = None,
    max_in_flight: int = 1,
    resume: bool = True,
) -> AugmentationPools:
    """Run the full two-view augmentation pipeline over the training signals.

    Signals are shuffled (seeded) and chunked into batches of ``batch_size``;
    each batch produces one user-view and one item-view request. Up to
    ``max_in_flight`` requests run concurrently; parsing and accumulation are
    serialized in the caller thread, so completion order never changes the
    final pools. Pools are persisted after every completed batch and a failed
    batch is skipped (logged) without stopping the pipeline.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    signals = sorted(train.pairs)
    random.Random(derive_seed(seed, "augment")).shuffle(signals)
    batches = [signals[i:i + batch_size] for i in range(0, len(signals), batch_size)]

    pools = AugmentationPools()
    completed: set[int] = set()
    if pool_path and resume and os.path.exists(pool_path):
        pools = AugmentationPools.load(pool_path, kg.vocab)
        progress = _progress_path(pool_path)
        if os.path.exists(progress):
            with open(progress, "r", encoding="utf-8") as fh:
                completed = set(json.load(fh)["completed"])
        log.info("resuming augmentation: %d/%d batches already done", len(completed), len(batches))

    pending = [b for b in range(len(batches)) if b not in completed]
    stop = False

    def persist() -> None:
        if pool_path:
            pools.save(pool_path, kg.vocab)
            _atomic_write(
                _progress_path(pool_path),
                json.dumps({"completed": sorted(completed)}) + "\n",
            )

    with ThreadPoolExecutor(max_workers=max(1, max_in_flight)) as pool:
        window: list[tuple[int, dict]] = []
        cursor = 0
        while (cursor < len(pending) or window) and not stop:
            while cursor < len(pending) and len(window) < max(1, max_in_flight):
                batch_id = pending[cursor]
                cursor += 1
                futures = {}
                for view in (VIEW_USER, VIEW_ITEM):
                    sub = extract_subgraph(kg, batches[batch_id], view, interactions=train)
                    prompt = build_prompt(sub, kg.vocab)
                    futures[view] = pool.submit(backend.send, prompt)
                window.append((batch_id, futures))
            batch_id, futures = window.pop(0)
            try:
                responses = {view: fut.result() for view, fut in futures.items()}
            except BudgetExceededError as exc:
                log.warning("batch %d: %s; stopping submission", batch_id, exc)
                stop = True
                continue
            except BackendError as exc:
                log.warning("batch %d skipped: %s", batch_id, exc)
                continue
            for view, text in responses.items():
                delta = parse_response(text, kg.vocab, view)
                if delta.parse_failed:
                    log.warning("batch %d (%s view): unparseable response", batch_id, view)
                if delta.rejected:
                    log.info("batch %d (%s view): dropped %d invalid entries",
                             batch_id, view, delta.rejected)
                pools.apply_delta(delta, view, kg, train, batch_id, backend.identifier)
            completed.add(batch_id)
            persist()
    return pools
