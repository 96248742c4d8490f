"""Confidence-aware knowledge encoder.

Three differentiable stages over item-attribute facts:

1. ``attention_aggregate`` - additive-attention neighbor pooling that mixes
   attribute embeddings into item embeddings,
2. ``triplet_confidence`` - a gated mixture of expert transforms scoring each
   fact as a bilinear form against its relation embedding,
3. ``confidence_aggregate`` - a second pooling pass whose softmax weights come
   from the confidence scores, restricted to surviving facts.

All functions take aligned index tensors (items, relations, attributes) in
canonical sorted order and are pure given a parameter snapshot.
"""

from __future__ import annotations

import logging
import math
import os
import tempfile

import numpy as np
import torch
from torch import Tensor

log = logging.getLogger(__name__)

LEAKY_SLOPE = 0.2


def _uniform_init(tensor: Tensor, fan_in: int, fan_out: int,
                  generator: torch.Generator) -> None:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    with torch.no_grad():
        tensor.uniform_(-bound, bound, generator=generator)


class ModelParams(torch.nn.Module):
    """Every learnable tensor of the model.

    Embedding tables for users/items/attributes/relations, the attention
    parameters (weight matrix plus scoring vector over the concatenation),
    and the confidence scorer (transition matrix, gate, expert maps).
    """

    def __init__(
        self,
        num_users: int,
        num_items: int,
        num_attributes: int,
        num_relations: int,
        dim: int = 64,
        num_experts: int = 8,
        dtype: torch.dtype = torch.float64,
        seed: int = 0,
    ) -> None:
        super().__init__()
        self.num_users = num_users
        self.num_items = num_items
        self.num_attributes = num_attributes
        self.num_relations = num_relations
        self.dim = dim
        self.num_experts = num_experts
        self.seed = seed

        def p(*shape):
            return torch.nn.Parameter(torch.empty(*shape, dtype=dtype))

        self.user_emb = p(num_users, dim)
        self.item_emb = p(num_items, dim)
        self.attr_emb = p(max(num_attributes, 1), dim)
        self.rel_emb = p(max(num_relations, 1), dim)
        self.attn_w = p(dim, dim)
        self.attn_vec = p(2 * dim)
        self.conf_w = p(dim, 2 * dim)
        self.gate_w = p(num_experts, dim)
        self.gate_b = p(num_experts)
        self.expert_w = p(num_experts, dim, dim)
        self.expert_b = p(num_experts, dim)
        self.reset_parameters(seed)

    def reset_parameters(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed & ((1 << 63) - 1))
        d = self.dim
        _uniform_init(self.user_emb, d, self.num_users, gen)
        _uniform_init(self.item_emb, d, self.num_items, gen)
        _uniform_init(self.attr_emb, d, self.attr_emb.shape[0], gen)
        _uniform_init(self.rel_emb, d, self.rel_emb.shape[0], gen)
        _uniform_init(self.attn_w, d, d, gen)
        _uniform_init(self.attn_vec, 2 * d, 1, gen)
        _uniform_init(self.conf_w, 2 * d, d, gen)
        _uniform_init(self.gate_w, d, self.num_experts, gen)
        _uniform_init(self.expert_w, d, d, gen)
        with torch.no_grad():
            self.gate_b.zero_()
            self.expert_b.zero_()

    @property
    def dtype(self) -> torch.dtype:
        return self.item_emb.dtype


def segment_softmax(logits: Tensor, segments: Tensor) -> Tensor:
    """Softmax within contiguous runs of equal segment ids.

    ``segments`` must be sorted ascending. Numerical stabilization subtracts
    the per-segment max (detached), so weights per segment sum to one.
    """
    if logits.numel() == 0:
        return logits
    present, counts = torch.unique_consecutive(segments, return_counts=True)
    starts = torch.cumsum(counts, 0) - counts
    seg_max = np.maximum.reduceat(logits.detach().numpy(), starts.numpy())
    seg_max_t = torch.from_numpy(seg_max).to(logits.dtype).repeat_interleave(counts)
    shifted = torch.exp(logits - seg_max_t)
    pos = torch.arange(len(present)).repeat_interleave(counts)
    denom = torch.zeros(len(present), dtype=logits.dtype).index_add(0, pos, shifted)
    return shifted / denom[pos]


def attention_aggregate(
    params: ModelParams,
    items: Tensor,
    attrs: Tensor,
    return_weights: bool = False,
):
    """First aggregation pass: x_i' = x_i + sum_k softmax_k(score) * x_{a_k}.

    The score is LeakyReLU of the attention vector applied to the
    concatenation of the projected item and attribute embeddings. Items with
    no facts pass through unchanged.
    """
    x_item = params.item_emb
    if items.numel() == 0:
        return (x_item, None) if return_weights else x_item
    d = params.dim
    proj_item = params.item_emb[items] @ params.attn_w.T
    proj_attr = params.attr_emb[attrs] @ params.attn_w.T
    logits = torch.nn.functional.leaky_relu(
        proj_item @ params.attn_vec[:d] + proj_attr @ params.attn_vec[d:],
        negative_slope=LEAKY_SLOPE,
    )
    weights = segment_softmax(logits, items)
    contrib = weights.unsqueeze(1) * params.attr_emb[attrs]
    out = x_item + torch.zeros_like(x_item).index_add(0, items, contrib)
    return (out, weights) if return_weights else out


def triplet_confidence(
    params: ModelParams,
    x_items: Tensor,
    items: Tensor,
    rels: Tensor,
    attrs: Tensor,
    return_gates: bool = False,
):
    """Mixture-of-experts confidence per fact.

    Features f_t come from the transition matrix applied to the concatenated
    (aggregated item, attribute) embeddings; gates are a softmax over expert
    scores of f_t; the output is the gate-weighted sum of bilinear forms
    between the relation embedding and each expert's transform of f_t.
    """
    feats = torch.cat([x_items[items], params.attr_emb[attrs]], dim=1) @ params.conf_w.T
    gate_logits = feats @ params.gate_w.T + params.gate_b
    gates = torch.softmax(gate_logits, dim=-1)
    expert_out = torch.einsum("eoi,ti->teo", params.expert_w, feats) + params.expert_b
    bilinear = torch.einsum("ted,td->te", expert_out, params.rel_emb[rels])
    phi = (gates * bilinear).sum(-1)
    return (phi, gates) if return_gates else phi


def confidence_aggregate(
    params: ModelParams,
    x_items: Tensor,
    items: Tensor,
    attrs: Tensor,
    phi: Tensor,
    scale: Tensor | None = None,
    return_weights: bool = False,
):
    """Second aggregation pass with confidence-derived softmax weights.

    Only the facts passed in participate (callers drop non-survivors first);
    ``scale`` optionally multiplies each contribution, carrying the
    straight-through gradient tie of relaxed keep decisions. Items with no
    surviving facts pass through unchanged.
    """
    if items.numel() == 0:
        return (x_items, None) if return_weights else x_items
    logits = torch.nn.functional.leaky_relu(phi, negative_slope=LEAKY_SLOPE)
    weights = segment_softmax(logits, items)
    contrib = weights.unsqueeze(1) * params.attr_emb[attrs]
    if scale is not None:
        contrib = scale.unsqueeze(1) * contrib
    out = x_items + torch.zeros_like(x_items).index_add(0, items, contrib)
    return (out, weights) if return_weights else out


def save_params(params: ModelParams, path: str, extra_meta: dict | None = None) -> None:
    meta = {
        "num_users": params.num_users,
        "num_items": params.num_items,
        "num_attributes": params.num_attributes,
        "num_relations": params.num_relations,
        "dim": params.dim,
        "num_experts": params.num_experts,
        "seed": params.seed,
        "dtype": str(params.dtype),
        "shapes": {k: list(v.shape) for k, v in params.state_dict().items()},
    }
    if extra_meta:
        meta.update(extra_meta)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    os.close(fd)
    try:
        torch.save({"meta": meta, "state": params.state_dict()}, tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_params(path: str) -> tuple[ModelParams, dict]:
    """Rebuild ModelParams from a checkpoint; shape mismatches are rejected."""
    payload = torch.load(path, weights_only=True)
    meta, state = payload["meta"], payload["state"]
    dtype = torch.float64 if meta["dtype"] == "torch.float64" else torch.float32
    params = ModelParams(
        meta["num_users"], meta["num_items"], meta["num_attributes"],
        meta["num_relations"], dim=meta["dim"], num_experts=meta["num_experts"],
        dtype=dtype, seed=meta["seed"],
    )
    expected = params.state_dict()
    for name, tensor in state.items():
        if name not in expected:
            raise ValueError(f"checkpoint has unexpected tensor {name!r}")
        if tuple(tensor.shape) != tuple(expected[name].shape):
            raise ValueError(
                f"checkpoint shape mismatch for {name!r}: "
                f"{tuple(tensor.shape)} vs {tuple(expected[name].shape)}"
            )
    params.load_state_dict(state)
    return params, meta
