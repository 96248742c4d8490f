import math
import random

import pytest
import torch

from ckgrec.augmenter import AugmentationPools
from ckgrec.errors import DataError, NonFiniteLossError
from ckgrec.kg import split_interactions
from ckgrec.rng import derive_seed
from ckgrec.training import (
    TrainConfig,
    bpr_loss,
    build_epoch_context,
    compute_batch_loss,
    contrastive_loss,
    encode_view,
    evaluate_model,
    joint_loss,
    l2_penalty,
    prepare_data,
    sample_negatives,
    train_model,
)
from conftest import make_pools


class TestBpr:
    def test_equal_scores_give_ln2(self):
        s = torch.zeros(4, dtype=torch.float64)
        assert abs(bpr_loss(s, s).item() - math.log(2)) < 1e-12

    def test_large_positive_margin_vanishes(self):
        pos = torch.full((3,), 40.0, dtype=torch.float64)
        neg = torch.zeros(3, dtype=torch.float64)
        assert bpr_loss(pos, neg).item() < 1e-12

    def test_large_negative_margin_blows_up(self):
        pos = torch.zeros(2, dtype=torch.float64)
        neg = torch.full((2,), 50.0, dtype=torch.float64)
        assert bpr_loss(pos, neg).item() > 40.0


class TestContrastive:
    def test_two_node_orthogonal_case(self):
        # hand oracle: positives cos=1, cross cos=0, tau=0.2
        # per-anchor term = logsumexp([5, 0]) - 5 = log(1 + e^-5)
        z = torch.eye(2, dtype=torch.float64)
        loss = contrastive_loss(z, z.clone(), 0.2)
        assert abs(loss.item() - 0.006715348489117967) < 1e-12

    def test_matched_positives_beat_shuffled(self):
        gen = torch.Generator().manual_seed(0)
        z = torch.randn(8, 16, dtype=torch.float64, generator=gen)
        aligned = contrastive_loss(z, z, 0.2)
        shuffled = contrastive_loss(z, z[torch.randperm(8, generator=gen)], 0.2)
        assert aligned.item() < shuffled.item()

    def test_single_node_rejected(self):
        z = torch.ones(1, 4, dtype=torch.float64)
        with pytest.raises(ValueError):
            contrastive_loss(z, z, 0.2)

    def test_permutation_equivariance(self):
        gen = torch.Generator().manual_seed(3)
        z1 = torch.randn(10, 6, dtype=torch.float64, generator=gen)
        z2 = torch.randn(10, 6, dtype=torch.float64, generator=gen)
        base = contrastive_loss(z1, z2, 0.2)
        perm = torch.randperm(10, generator=gen)
        permuted = contrastive_loss(z1[perm], z2[perm], 0.2)
        assert abs(base.item() - permuted.item()) < 1e-10

    def test_nonnegative(self):
        gen = torch.Generator().manual_seed(5)
        for _ in range(5):
            z1 = torch.randn(6, 4, dtype=torch.float64, generator=gen)
            z2 = torch.randn(6, 4, dtype=torch.float64, generator=gen)
            assert contrastive_loss(z1, z2, 0.2).item() >= 0.0


class TestJoint:
    def test_zero_weights_reduce_to_bpr(self, grad_kg):
        from ckgrec.encoder import ModelParams
        params = ModelParams(2, 2, 1, 1, dim=2, num_experts=1, seed=0)
        bpr = torch.tensor(0.75, dtype=torch.float64)
        out = joint_loss(bpr, 3.0, params, 0.0, 0.0)
        assert out.item() == 0.75

    def test_zero_params_zero_regularizer(self):
        from ckgrec.encoder import ModelParams
        params = ModelParams(2, 2, 1, 1, dim=2, num_experts=1, seed=0)
        with torch.no_grad():
            for p in params.parameters():
                p.zero_()
        assert l2_penalty(params).item() == 0.0

    def test_weighted_sum_exact(self):
        from ckgrec.encoder import ModelParams
        params = ModelParams(2, 2, 1, 1, dim=2, num_experts=1, seed=0)
        bpr = torch.tensor(0.5, dtype=torch.float64)
        con = torch.tensor(2.0, dtype=torch.float64)
        expected = 0.5 + 1e-3 * 2.0 + 1e-4 * l2_penalty(params).item()
        assert abs(joint_loss(bpr, con, params, 1e-3, 1e-4).item() - expected) < 1e-15


class TestDefaults:
    def test_published_hyperparameters(self):
        cfg = TrainConfig()
        assert cfg.learning_rate == 1e-4
        assert cfg.embed_dim == 64
        assert cfg.del_ratio == 0.08
        assert cfg.add_ratio == 0.60
        assert cfg.num_experts == 8
        assert cfg.conf_scale == 5.0
        assert cfg.gumbel_tau == 0.9
        assert cfg.drop_prob == 0.01
        assert cfg.num_layers == 3
        assert cfg.contrastive_tau == 0.2
        assert cfg.contrastive_weight == 1e-3
        assert cfg.reg_weight == 1e-4


class TestNegativeSampling:
    def test_single_candidate_always_chosen(self):
        full = {0: {0, 1, 2}}
        rng = random.Random(0)
        for _ in range(20):
            assert sample_negatives(full, [0], 4, rng) == [3]

    def test_deterministic_per_seed(self):
        full = {u: set(range(u + 1)) for u in range(5)}
        a = sample_negatives(full, list(range(5)), 50, random.Random(derive_seed(1, "neg")))
        b = sample_negatives(full, list(range(5)), 50, random.Random(derive_seed(1, "neg")))
        assert a == b

    def test_saturated_user_rejected(self):
        with pytest.raises(DataError, match="user 3"):
            sample_negatives({3: {0, 1}}, [3], 2, random.Random(0))

    def test_uniform_over_candidates(self):
        import scipy.stats
        num_items = 20
        seen = {0: {1, 3, 5}}
        candidates = [i for i in range(num_items) if i not in seen[0]]
        rng = random.Random(derive_seed(42, "chi2"))
        draws = sample_negatives(seen, [0] * 10000, num_items, rng)
        counts = {c: 0 for c in candidates}
        for d in draws:
            assert d in counts
            counts[d] += 1
        expected = 10000 / len(candidates)
        chi2 = sum((n - expected) ** 2 / expected for n in counts.values())
        cutoff = scipy.stats.chi2.ppf(0.999, len(candidates) - 1)
        assert chi2 < cutoff


class TestGradientFlow:
    def test_loss_sensitive_to_confidence_of_kept_facts(self, grad_kg, grad_split, grad_cfg):
        """Finite-difference sensitivity of the loss to a kept fact's
        confidence is nonzero and matches the straight-through gradient at
        soft decisions."""
        cfg = grad_cfg
        cfg.decision_mode = "soft"
        pools = make_pools(grad_kg)
        prep = prepare_data(grad_kg, grad_split)
        from ckgrec.encoder import ModelParams
        params = ModelParams(prep.num_users, prep.num_items,
                             grad_kg.vocab.num_attributes, grad_kg.vocab.num_relations,
                             dim=cfg.embed_dim, num_experts=cfg.num_experts, seed=cfg.seed)
        ctx = build_epoch_context(prep, pools, cfg, epoch=1)

        from ckgrec.views import apply_decisions, gumbel_decisions, keep_probability
        from ckgrec.encoder import attention_aggregate, confidence_aggregate, triplet_confidence
        arrays = ctx.view_user.arrays
        x1 = attention_aggregate(params, arrays.items, arrays.attrs)
        phi0 = triplet_confidence(params, x1, arrays.items, arrays.rels, arrays.attrs)

        def loss_given_phi(phi):
            probs = keep_probability(phi, cfg.conf_scale)
            mask = gumbel_decisions(probs, cfg.gumbel_tau, noise=ctx.gumbel_user)
            renewed = apply_decisions(arrays, phi, mask, "soft")
            x2 = confidence_aggregate(params, x1, renewed.arrays.items,
                                      renewed.arrays.attrs, renewed.phi, renewed.scale)
            return x2.square().sum()

        phi = phi0.detach().clone().requires_grad_(True)
        loss_given_phi(phi).backward()
        step = 1e-6
        nonzero = 0
        for idx in range(phi0.numel()):
            base = phi0.detach().clone()
            base[idx] += step
            up = loss_given_phi(base).item()
            base[idx] -= 2 * step
            down = loss_given_phi(base).item()
            fd = (up - down) / (2 * step)
            grad = phi.grad[idx].item()
            denom = max(abs(fd), abs(grad), 1e-8)
            assert abs(fd - grad) / denom < 1e-4
            if abs(grad) > 1e-12:
                nonzero += 1
        assert nonzero == phi0.numel()


def toy_setup(seed=0):
    from ckgrec import synthetic
    ds = synthetic.generate_dataset(num_users=20, num_items=30, num_attributes=12,
                                    num_topics=4, seed=seed)
    split = split_interactions(ds.kg.interactions, seed=seed)
    return ds, split


class TestTrainLoop:
    def test_two_runs_identical_history(self):
        ds, split = toy_setup()
        cfg = TrainConfig(epochs=4, batch_size=4096, learning_rate=1e-3,
                          embed_dim=8, num_experts=2, num_layers=2, seed=11)
        a = train_model(ds.kg, split, AugmentationPools(), cfg)
        cfg2 = TrainConfig(epochs=4, batch_size=4096, learning_rate=1e-3,
                           embed_dim=8, num_experts=2, num_layers=2, seed=11)
        b = train_model(ds.kg, split, AugmentationPools(), cfg2)
        assert a.history == b.history

    def test_loss_decreases_on_toy_data(self):
        ds, split = toy_setup(seed=2)
        cfg = TrainConfig(epochs=12, batch_size=4096, learning_rate=5e-2,
                          embed_dim=16, num_experts=2, num_layers=2, seed=1,
                          patience=50)
        result = train_model(ds.kg, split, AugmentationPools(), cfg)
        joints = [row["joint"] for row in result.history[:10]]
        # strict decrease within tolerance: allow upticks of at most 5%
        for prev, cur in zip(joints, joints[1:]):
            assert cur <= prev * 1.05
        assert joints[-1] < joints[0]

    def test_reduction_matches_reference_briefly(self):
        import numpy as np
        from reference_cf import run_reference
        from ckgrec.encoder import ModelParams
        ds, split = toy_setup(seed=3)
        cfg = TrainConfig(epochs=5, batch_size=64, learning_rate=1e-3,
                          embed_dim=8, num_experts=2, num_layers=2, seed=4,
                          contrastive_weight=0.0, reg_weight=0.0,
                          use_confidence=False)
        result = train_model(ds.kg, split, AugmentationPools(), cfg)
        init = ModelParams(ds.kg.vocab.num_users, ds.kg.vocab.num_items,
                           ds.kg.vocab.num_attributes, ds.kg.vocab.num_relations,
                           dim=8, num_experts=2, seed=4)
        prep = prepare_data(ds.kg, split)
        ref = run_reference(
            init.user_emb.detach().numpy().copy(),
            init.item_emb.detach().numpy().copy(),
            split.train.pairs, prep.user_items_full,
            num_layers=2, lr=1e-3, epochs=5, batch_size=64, seed=4,
        )
        mine = [row["joint"] for row in result.history]
        assert np.allclose(mine, ref, atol=1e-8, rtol=0)

    def test_early_stopping_respects_patience(self):
        ds, split = toy_setup(seed=5)
        cfg = TrainConfig(epochs=60, batch_size=4096, learning_rate=1e-6,
                          embed_dim=8, num_experts=2, num_layers=2, seed=6,
                          patience=3)
        result = train_model(ds.kg, split, AugmentationPools(), cfg)
        assert result.stopped_early
        assert len(result.history) < 60

    def test_nonfinite_loss_aborts_with_diagnostics(self, tmp_path):
        ds, split = toy_setup(seed=7)
        # Adam steps are lr-sized, so one update at lr=1e200 overflows the
        # squared-parameter regularizer to inf on the next epoch
        cfg = TrainConfig(epochs=3, batch_size=4096, learning_rate=1e200,
                          embed_dim=8, num_experts=2, num_layers=2, seed=8)
        with pytest.raises(NonFiniteLossError):
            train_model(ds.kg, split, AugmentationPools(), cfg,
                        diagnostics_dir=str(tmp_path))
        assert (tmp_path / "nonfinite_loss.json").exists()

    def test_evaluate_model_is_deterministic(self):
        ds, split = toy_setup(seed=9)
        cfg = TrainConfig(epochs=2, batch_size=4096, learning_rate=1e-3,
                          embed_dim=8, num_experts=2, num_layers=2, seed=10)
        result = train_model(ds.kg, split, AugmentationPools(), cfg)
        prep = prepare_data(ds.kg, split)
        a = evaluate_model(result.params, prep, cfg, target="test")
        b = evaluate_model(result.params, prep, cfg, target="test")
        assert a.recall == b.recall and a.ndcg == b.ndcg


class TestBatchLossPipeline:
    def test_full_pipeline_runs_with_pools(self, grad_kg, grad_split, grad_cfg):
        pools = make_pools(grad_kg)
        prep = prepare_data(grad_kg, grad_split)
        from ckgrec.encoder import ModelParams
        params = ModelParams(prep.num_users, prep.num_items,
                             grad_kg.vocab.num_attributes,
                             grad_kg.vocab.num_relations,
                             dim=grad_cfg.embed_dim,
                             num_experts=grad_cfg.num_experts, seed=1)
        ctx = build_epoch_context(prep, pools, grad_cfg, epoch=1)
        users = prep.pair_users
        pos = prep.pair_items
        rng = random.Random(0)
        neg = torch.tensor(sample_negatives(prep.user_items_full, users.tolist(),
                                            prep.num_items, rng))
        loss, parts = compute_batch_loss(params, prep, grad_cfg, ctx, users, pos, neg)
        assert math.isfinite(parts["joint"])
        assert parts["con"] > 0.0
        loss.backward()
        for name, p in params.named_parameters():
            assert p.grad is not None, name
            assert bool(torch.isfinite(p.grad).all()), name

    def test_all_bpr_sources_and_layer0_toggle_run(self, grad_kg, grad_split):
        pools = make_pools(grad_kg)
        prep = prepare_data(grad_kg, grad_split)
        for source in ("mean_views", "user_view", "item_view"):
            for layer0 in (False, True):
                cfg = TrainConfig(embed_dim=8, num_experts=2, num_layers=2,
                                  seed=3, bpr_source=source,
                                  include_layer0=layer0, batch_size=1024,
                                  add_ratio=0.5, del_ratio=0.2)
                from ckgrec.encoder import ModelParams
                params = ModelParams(prep.num_users, prep.num_items,
                                     grad_kg.vocab.num_attributes,
                                     grad_kg.vocab.num_relations,
                                     dim=8, num_experts=2, seed=3)
                ctx = build_epoch_context(prep, pools, cfg, epoch=1)
                rng = random.Random(1)
                neg = torch.tensor(sample_negatives(
                    prep.user_items_full, prep.pair_users.tolist(),
                    prep.num_items, rng))
                loss, parts = compute_batch_loss(params, prep, cfg, ctx,
                                                 prep.pair_users,
                                                 prep.pair_items, neg)
                assert math.isfinite(parts["joint"]), (source, layer0)
                loss.backward()

    def test_full_sampling_base_uses_whole_graph_size(self, grad_kg):
        from ckgrec.views import sample_pools
        pools = make_pools(grad_kg)
        whole = grad_kg.num_ia + grad_kg.num_ii + grad_kg.interactions.num_pairs
        sampled = sample_pools(pools, grad_kg, 0.0, 1.0, seed=0, base="full")
        assert sampled.n_del == whole
        # far larger than any pool, so the samples are the whole pools
        assert sampled.del_item == frozenset(pools.del_item)

    def test_encode_view_decision_modes_agree_on_values(self, grad_kg, grad_cfg):
        from ckgrec.encoder import ModelParams
        from ckgrec.views import TripletArrays, draw_gumbel_noise
        params = ModelParams(5, 8, 6, grad_kg.vocab.num_relations,
                             dim=8, num_experts=2, seed=2)
        arrays = TripletArrays.from_triplets(grad_kg.ia)
        noise = draw_gumbel_noise(len(arrays), torch.Generator().manual_seed(3))
        hard_cfg = TrainConfig(embed_dim=8, num_experts=2, decision_mode="hard_st")
        plain_cfg = TrainConfig(embed_dim=8, num_experts=2, decision_mode="hard")
        x_st, _, mask_st = encode_view(params, arrays, hard_cfg, noise=noise)
        x_plain, _, mask_plain = encode_view(params, arrays, plain_cfg, noise=noise)
        assert torch.equal(mask_st.hard, mask_plain.hard)
        assert torch.equal(x_st, x_plain)
