"""Train the full model on synthetic attribute-driven data and compare it
against the no-confidence variant under full-ranking evaluation.

The synthetic generator injects noise facts, so the learned per-fact
confidence should score true facts higher than noise.

Run:  python3 demos/03_train_and_evaluate.py   (about half a minute)
"""

import logging

import numpy as np

from ckgrec import split_interactions
from ckgrec.augmenter import AugmentationPools
from ckgrec.explanation import confidence_table
from ckgrec.synthetic import generate_dataset
from ckgrec.training import TrainConfig, evaluate_model, prepare_data, train_model

logging.basicConfig(level=logging.WARNING)

ds = generate_dataset(num_users=150, num_items=200, num_attributes=30,
                      num_topics=6, noise_fraction=0.30, seed=0)
split = split_interactions(ds.kg.interactions, seed=0)
print(f"users={ds.kg.vocab.num_users} items={ds.kg.vocab.num_items} "
      f"facts={ds.kg.num_ia} (noise {len(ds.noise_facts)})")


def run(use_confidence):
    cfg = TrainConfig(epochs=30, batch_size=8192, learning_rate=3e-2,
                      embed_dim=32, num_experts=4, num_layers=2, seed=0,
                      use_confidence=use_confidence,
                      contrastive_weight=1e-3 if use_confidence else 0.0,
                      patience=1000)
    result = train_model(ds.kg, split, AugmentationPools(), cfg)
    prep = prepare_data(ds.kg, split)
    ranking = evaluate_model(result.params, prep, cfg, target="test")
    return result, ranking


full_result, full_ranking = run(use_confidence=True)
_, plain_ranking = run(use_confidence=False)

print(f"\nfull model     recall@10={full_ranking.recall:.4f} "
      f"ndcg@10={full_ranking.ndcg:.4f}")
print(f"no confidence  recall@10={plain_ranking.recall:.4f} "
      f"ndcg@10={plain_ranking.ndcg:.4f}")

conf = confidence_table(full_result.params, ds.kg)
true_scores = [conf[(t.head, t.relation, t.tail)] for t in ds.true_facts]
noise_scores = [conf[(t.head, t.relation, t.tail)] for t in ds.noise_facts]
print(f"\nmean confidence: true facts {np.mean(true_scores):+.3f}  "
      f"noise facts {np.mean(noise_scores):+.3f}")
print("(positive gap = the scorer has learned to tell them apart)")
