"""The augmentation pipeline end to end with the offline stub backend:
subgraph extraction, the two view prompts, response parsing with the
anti-hallucination guard, and the persisted advice pools.

Run:  python3 demos/02_llm_augmentation.py
"""

import json
import tempfile
from pathlib import Path

from ckgrec import split_interactions
from ckgrec.augmenter import (
    VIEW_ITEM,
    VIEW_USER,
    build_prompt,
    extract_subgraph,
    parse_response,
    run_augmentation,
)
from ckgrec.llm import StubBackend
from ckgrec.synthetic import generate_dataset

ds = generate_dataset(num_users=15, num_items=20, num_attributes=10,
                      num_topics=4, interactions_per_user=(5, 9), seed=0)
kg = ds.kg
split = split_interactions(kg.interactions, seed=0)

# one batch of collaborative signals -> two prompts
signals = split.train.pairs[:4]
for view in (VIEW_USER, VIEW_ITEM):
    sub = extract_subgraph(kg, signals, view, interactions=split.train)
    prompt = build_prompt(sub, kg.vocab)
    print(f"=== {view}-view prompt (first 12 lines) ===")
    print("\n".join(prompt.splitlines()[:12]))
    print("...\n")

# the parser resolves names against the vocabulary and drops anything else
good = json.dumps({"add_ia": [["i0001", "has_tag", "a0003"]], "del_ia": [], "del_ui": []})
bad = json.dumps({"add_ia": [["atlantis", "has_tag", "a0003"]]})
print("valid advice   ->", parse_response(good, kg.vocab, VIEW_USER))
print("hallucination  ->", parse_response(bad, kg.vocab, VIEW_USER))

# full run: batches, bounded concurrency, per-batch persistence
with tempfile.TemporaryDirectory() as tmp:
    pool_path = str(Path(tmp) / "pools.jsonl")
    pools = run_augmentation(kg, split.train, StubBackend(seed=7),
                             batch_size=8, seed=0, pool_path=pool_path,
                             max_in_flight=2)
    print("\npool sizes:", pools.sizes())
    print("first pool records:")
    for line in Path(pool_path).read_text().splitlines()[:3]:
        print(" ", line)
