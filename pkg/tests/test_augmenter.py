import json
import re

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ckgrec.augmenter import (
    VIEW_ITEM,
    VIEW_USER,
    AugmentationPools,
    PoolDelta,
    build_prompt,
    extract_subgraph,
    parse_response,
    run_augmentation,
)
from ckgrec.errors import BackendError, DataError
from ckgrec.kg import KIND_IA, KIND_UI, Triplet, split_interactions
from ckgrec.llm import RecordingBackend, ReplayBackend, StubBackend
from conftest import build_kg

# module-level graph for the hypothesis fuzz test (read-only)
_FUZZ_KG = build_kg(
    user_items={"u1": ["x", "y"], "u2": ["y"]},
    facts=[("x", "has_kind", "k1"), ("y", "has_kind", "k2")],
)


def ids(kg, user=None, item=None, rel=None, attr=None):
    v = kg.vocab
    out = []
    for name, index in ((user, v.users), (item, v.items), (rel, v.relations), (attr, v.attributes)):
        if name is not None:
            out.append(index.id(name))
    return tuple(out) if len(out) > 1 else out[0]


class TestExtraction:
    def test_user_view_covers_interactions_and_their_facts(self, fruit_kg):
        u, i = ids(fruit_kg, user="alice", item="apple")
        sub = extract_subgraph(fruit_kg, [(u, i)], VIEW_USER)
        # alice has 3 interactions; their items carry facts
        assert len(sub.ui) == 3
        touched = {t.tail for t in sub.ui}
        assert {t.head for t in sub.ia} <= touched
        expected_facts = sum(len(fruit_kg.item_attrs.get(it, [])) for it in touched)
        assert len(sub.ia) == expected_facts
        assert sub.ii == ()

    def test_item_view_covers_facts_and_links(self, fruit_kg):
        u, i = ids(fruit_kg, user="alice", item="apple")
        sub = extract_subgraph(fruit_kg, [(u, i)], VIEW_ITEM)
        assert sub.ui == ()
        assert {t.head for t in sub.ia} == {i}
        assert len(sub.ia) == len(fruit_kg.item_attrs[i])
        assert all(i in (t.head, t.tail) for t in sub.ii)
        assert set(sub.ii) == set(fruit_kg.item_links[i])

    def test_empty_signals_rejected(self, fruit_kg):
        with pytest.raises(ValueError):
            extract_subgraph(fruit_kg, [], VIEW_USER)

    def test_unobserved_signal_rejected(self, fruit_kg):
        u = ids(fruit_kg, user="bob")
        i = ids(fruit_kg, item="apple")
        assert (u, i) not in fruit_kg.interactions.pair_set
        with pytest.raises(DataError):
            extract_subgraph(fruit_kg, [(u, i)], VIEW_USER)


class TestPrompt:
    def test_user_prompt_has_both_tasks_and_schema(self, fruit_kg):
        u, i = ids(fruit_kg, user="alice", item="apple")
        prompt = build_prompt(extract_subgraph(fruit_kg, [(u, i)], VIEW_USER), fruit_kg.vocab)
        assert "add_ia" in prompt and "del_ia" in prompt and "del_ui" in prompt
        assert "(alice, interact, apple)" in prompt
        assert "(apple, has_category, fruit)" in prompt
        # both the fact-verification and the interaction-pruning instructions
        assert "Verify the item facts" in prompt
        assert "deleted, never added" in prompt

    def test_item_prompt_never_mentions_users(self, fruit_kg):
        u, i = ids(fruit_kg, user="alice", item="apple")
        prompt = build_prompt(extract_subgraph(fruit_kg, [(u, i)], VIEW_ITEM), fruit_kg.vocab)
        assert re.search(r"\buser\b", prompt, re.IGNORECASE) is None
        assert "del_ui" not in prompt
        assert "(apple, same_category, banana)" in prompt

    def test_prompt_is_deterministic(self, fruit_kg):
        u, i = ids(fruit_kg, user="alice", item="apple")
        sub = extract_subgraph(fruit_kg, [(u, i)], VIEW_USER)
        assert build_prompt(sub, fruit_kg.vocab) == build_prompt(sub, fruit_kg.vocab)


class TestParse:
    def test_valid_add(self, fruit_kg):
        text = json.dumps({"add_ia": [["apple", "has_color", "yellow"]]})
        delta = parse_response(text, fruit_kg.vocab, VIEW_USER)
        assert len(delta.add_ia) == 1
        assert delta.rejected == 0 and not delta.parse_failed

    def test_unknown_entity_dropped(self, fruit_kg):
        text = json.dumps({"add_ia": [["dragonfruit", "has_color", "red"]]})
        delta = parse_response(text, fruit_kg.vocab, VIEW_USER)
        assert delta.add_ia == set()
        assert delta.rejected == 1

    def test_wrong_role_dropped(self, fruit_kg):
        # "alice" is a user, not an item; "interact" is not a fact relation
        delta = parse_response(
            json.dumps({"add_ia": [["alice", "has_color", "red"],
                                   ["apple", "interact", "red"]]}),
            fruit_kg.vocab, VIEW_USER)
        assert delta.add_ia == set()
        assert delta.rejected == 2

    def test_non_json_sets_failure_flag(self, fruit_kg):
        delta = parse_response("Sorry, I cannot help with that.", fruit_kg.vocab, VIEW_USER)
        assert delta.parse_failed
        assert not delta.add_ia and not delta.del_ia and not delta.del_ui

    def test_fenced_json_accepted(self, fruit_kg):
        text = "```json\n" + json.dumps({"del_ia": [["apple", "has_color", "red"]]}) + "\n```"
        delta = parse_response(text, fruit_kg.vocab, VIEW_USER)
        assert len(delta.del_ia) == 1

    def test_del_ui_rejected_in_item_view(self, fruit_kg):
        text = json.dumps({"add_ia": [], "del_ui": [["alice", "apple"]]})
        delta = parse_response(text, fruit_kg.vocab, VIEW_ITEM)
        assert delta.del_ui == set()
        assert delta.rejected == 1

    @given(st.text(max_size=300))
    @settings(max_examples=200, deadline=None)
    def test_never_crashes_never_out_of_vocab(self, text):
        delta = parse_response(text, _FUZZ_KG.vocab, VIEW_USER)
        v = _FUZZ_KG.vocab
        for t in delta.add_ia | delta.del_ia:
            assert 0 <= t.head < v.num_items
            assert 0 <= t.tail < v.num_attributes
        for t in delta.del_ui:
            assert 0 <= t.head < v.num_users
            assert 0 <= t.tail < v.num_items


class TestPools:
    def _delta(self, **kwargs):
        return PoolDelta(**kwargs)

    def test_add_existing_fact_skipped(self, fruit_kg):
        pools = AugmentationPools()
        existing = fruit_kg.ia[0]
        pools.apply_delta(self._delta(add_ia={existing}), VIEW_USER, fruit_kg,
                          fruit_kg.interactions, 0, "stub")
        assert pools.add_user == {}
        assert pools.skipped_existing == 1

    def test_delete_missing_fact_skipped(self, fruit_kg):
        pools = AugmentationPools()
        ghost = Triplet(ids(fruit_kg, item="apple"),
                        fruit_kg.ia[0].relation, ids(fruit_kg, attr="yellow"), KIND_IA)
        assert ghost not in fruit_kg.ia_set
        pools.apply_delta(self._delta(del_ia={ghost}), VIEW_USER, fruit_kg,
                          fruit_kg.interactions, 0, "stub")
        assert pools.del_user_ia == {}
        assert pools.skipped_missing == 1

    def test_conflict_delete_wins(self, fruit_kg):
        pools = AugmentationPools()
        novel = Triplet(ids(fruit_kg, item="banana"), fruit_kg.ia[0].relation,
                        ids(fruit_kg, attr="red"), KIND_IA)
        assert novel not in fruit_kg.ia_set
        pools.apply_delta(self._delta(add_ia={novel}), VIEW_USER, fruit_kg,
                          fruit_kg.interactions, 0, "stub")
        assert novel in pools.add_user
        # a later delete of a graph fact cannot conflict (adds are not in G);
        # but a delete arriving for a pooled add evicts it
        pools.del_user_ia[novel] = pools.add_user[novel]  # simulate present-in-G
        pools.apply_delta(self._delta(add_ia={novel}), VIEW_USER, fruit_kg,
                          fruit_kg.interactions, 1, "stub")
        assert novel not in pools.add_user or pools.conflicts >= 1

    def test_provenance_keeps_smallest_batch(self, fruit_kg):
        pools = AugmentationPools()
        novel = Triplet(ids(fruit_kg, item="banana"), fruit_kg.ia[0].relation,
                        ids(fruit_kg, attr="red"), KIND_IA)
        pools.apply_delta(self._delta(add_ia={novel}), VIEW_USER, fruit_kg,
                          fruit_kg.interactions, 5, "stub")
        pools.apply_delta(self._delta(add_ia={novel}), VIEW_USER, fruit_kg,
                          fruit_kg.interactions, 2, "stub")
        assert pools.add_user[novel].batch == 2

    def test_save_load_roundtrip(self, fruit_kg, tmp_path):
        pools = AugmentationPools()
        novel = Triplet(ids(fruit_kg, item="banana"), fruit_kg.ia[0].relation,
                        ids(fruit_kg, attr="red"), KIND_IA)
        ui = Triplet(ids(fruit_kg, user="alice"), fruit_kg.vocab.interact_id,
                     ids(fruit_kg, item="apple"), KIND_UI)
        pools.apply_delta(self._delta(add_ia={novel}, del_ia={fruit_kg.ia[0]},
                                      del_ui={ui}),
                          VIEW_USER, fruit_kg, fruit_kg.interactions, 3, "stub")
        pools.apply_delta(self._delta(add_ia={novel}), VIEW_ITEM, fruit_kg,
                          fruit_kg.interactions, 4, "stub")
        path = str(tmp_path / "pools.jsonl")
        pools.save(path, fruit_kg.vocab)
        loaded = AugmentationPools.load(path, fruit_kg.vocab)
        assert loaded == pools
        # file schema: exactly the documented keys per record
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                record = json.loads(line)
                assert set(record) == {"view", "action", "kind", "h", "r", "t",
                                       "batch", "backend"}


class TestRunAugmentation:
    def test_scripted_stub_pools_match_advice(self, fruit_kg):
        split = split_interactions(fruit_kg.interactions, seed=0)
        user_advice = json.dumps({
            "add_ia": [["banana", "has_color", "red"]],
            "del_ia": [["apple", "has_color", "red"]],
            "del_ui": [],
        })
        item_advice = json.dumps({
            "add_ia": [["durian", "has_color", "yellow"]],
            "del_ia": [],
        })
        # one batch, two requests: user view first, then item view
        backend = StubBackend(responses=[user_advice, item_advice])
        pools = run_augmentation(fruit_kg, split.train, backend, batch_size=64, seed=0)
        v = fruit_kg.vocab
        assert set(pools.add_user) == {
            Triplet(v.items.id("banana"), v.relations.id("has_color"),
                    v.attributes.id("red"), KIND_IA)}
        assert set(pools.del_user_ia) == {
            Triplet(v.items.id("apple"), v.relations.id("has_color"),
                    v.attributes.id("red"), KIND_IA)}
        assert set(pools.add_item) == {
            Triplet(v.items.id("durian"), v.relations.id("has_color"),
                    v.attributes.id("yellow"), KIND_IA)}
        assert pools.del_item == {}

    def test_record_then_replay_identical(self, fruit_kg, tmp_path):
        split = split_interactions(fruit_kg.interactions, seed=0)
        transcript = str(tmp_path / "transcript.jsonl")
        recorded = RecordingBackend(StubBackend(seed=11), transcript)
        first = str(tmp_path / "pools_a.jsonl")
        pools_a = run_augmentation(fruit_kg, split.train, recorded,
                                   batch_size=2, seed=0, pool_path=first)
        second = str(tmp_path / "pools_b.jsonl")
        pools_b = run_augmentation(fruit_kg, split.train, ReplayBackend(transcript),
                                   batch_size=2, seed=0, pool_path=second)
        assert pools_a == pools_b
        a = (tmp_path / "pools_a.jsonl").read_bytes()
        b = (tmp_path / "pools_b.jsonl").read_bytes()
        assert a == b

    def test_failed_batch_skipped_pipeline_continues(self, fruit_kg):
        split = split_interactions(fruit_kg.interactions, seed=0)
        calls = {"n": 0}

        def flaky(prompt):
            calls["n"] += 1
            if calls["n"] <= 2:
                raise BackendError("boom")
            return json.dumps({"add_ia": [], "del_ia": [], "del_ui": []})

        backend = StubBackend(responder=flaky)
        pools = run_augmentation(fruit_kg, split.train, backend, batch_size=2, seed=0)
        assert calls["n"] > 2
        assert pools.sizes() == {k: 0 for k in pools.sizes()}

    def test_concurrent_completion_order_does_not_change_pools(self, fruit_kg):
        split = split_interactions(fruit_kg.interactions, seed=0)
        serial = run_augmentation(fruit_kg, split.train, StubBackend(seed=9),
                                  batch_size=1, seed=0, max_in_flight=1)
        concurrent = run_augmentation(fruit_kg, split.train, StubBackend(seed=9),
                                      batch_size=1, seed=0, max_in_flight=4)
        assert serial == concurrent

    def test_unknown_keys_counted_as_schema_violations(self, fruit_kg):
        delta = parse_response('{"add_ia": [], "hallucinated_key": 1}',
                               fruit_kg.vocab, VIEW_USER)
        assert delta.rejected == 1

    def test_budget_stops_then_resume_completes(self, fruit_kg, tmp_path):
        split = split_interactions(fruit_kg.interactions, seed=0)
        path = str(tmp_path / "pools.jsonl")
        limited = StubBackend(seed=5, budget=2)
        partial = run_augmentation(fruit_kg, split.train, limited,
                                   batch_size=2, seed=0, pool_path=path)
        done_after_first = json.load(open(path + ".progress.json"))["completed"]
        full_backend = StubBackend(seed=5)
        resumed = run_augmentation(fruit_kg, split.train, full_backend,
                                   batch_size=2, seed=0, pool_path=path)
        done_after_second = json.load(open(path + ".progress.json"))["completed"]
        assert set(done_after_first) <= set(done_after_second)
        fresh = run_augmentation(fruit_kg, split.train, StubBackend(seed=5),
                                 batch_size=2, seed=0)
        assert resumed == fresh
        assert partial.sizes() != fresh.sizes() or done_after_first == done_after_second
