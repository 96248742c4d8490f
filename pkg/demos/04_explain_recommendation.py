"""Confidence-guided explanation: build the augmented graph, extract the
user -> bridge -> item reasoning paths with their confidence pairs, and ask
a backend to pick the most plausible one and phrase the explanation.

Run:  python3 demos/04_explain_recommendation.py
"""

from ckgrec import split_interactions
from ckgrec.augmenter import AugmentationPools
from ckgrec.encoder import ModelParams
from ckgrec.explanation import explain
from ckgrec.kg import (
    InteractionGraph,
    TripartiteKG,
    Triplet,
    Vocab,
    derive_ii_triplets,
)
from ckgrec.llm import StubBackend

# A small game catalog where the target shares attributes with two items the
# player already owns, giving two candidate reasoning paths.
vocab = Vocab()
player = vocab.users.add("player_17")
games = {name: vocab.items.add(name) for name in
         ("cave_story", "dust_runner", "night_garden", "star_salvage")}
facts_raw = [
    ("cave_story", "has_genre", "platformer"),
    ("star_salvage", "has_genre", "platformer"),
    ("dust_runner", "has_studio", "redbeam"),
    ("star_salvage", "has_studio", "redbeam"),
    ("night_garden", "has_genre", "puzzle"),
]
ia = [
    Triplet(vocab.items.id(h), vocab.add_relation(r, "IA"),
            vocab.attributes.add(t), "IA")
    for h, r, t in facts_raw
]
ii = derive_ii_triplets(ia, vocab)
pairs = [(player, games[g]) for g in ("cave_story", "dust_runner", "night_garden")]
kg = TripartiteKG(vocab, InteractionGraph.from_pairs(pairs), ia, ii)
split = split_interactions(kg.interactions, seed=0)

# An untrained model still produces confidence scores; after real training
# they reflect which facts actually drive interactions.
params = ModelParams(vocab.num_users, vocab.num_items, vocab.num_attributes,
                     vocab.num_relations, dim=16, num_experts=2, seed=1)

# The stub scripts a choice; swap in make_backend("http") for a live model.
backend = StubBackend(responses=[
    "SELECTED_PATH: 1\n"
    "You clearly enjoy redbeam's games, and this one carries their signature "
    "style - fast, scrappy, and full of secrets."
])

result = explain(kg, split, params, AugmentationPools(), backend,
                 user=player, target=games["star_salvage"])

print(f"explainable: {result.explainable}\n")
print("candidate paths:")
for idx, p in enumerate(result.paths):
    marker = "->" if idx == result.selected_index else "  "
    print(f" {marker} {idx}. chose {vocab.items.name(p.bridge)}; shared "
          f"{vocab.attributes.name(p.witness_attribute)} "
          f"[{p.confidence_bridge:.3f}, {p.confidence_target:.3f}]")
print(f"\nexplanation:\n{result.explanation}")
