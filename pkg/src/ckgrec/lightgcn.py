"""Linear collaborative-filtering propagation over a bipartite interaction
graph: symmetric-normalized neighbor sums per layer, no transforms, final
embeddings as the average of layers 1..L.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import torch
from torch import Tensor

log = logging.getLogger(__name__)


@dataclass
class PropagationState:
    user_layers: list[Tensor]
    item_layers: list[Tensor]
    user_degrees: Tensor
    item_degrees: Tensor


def propagate(
    pair_users: Tensor,
    pair_items: Tensor,
    x_user0: Tensor,
    x_item0: Tensor,
    num_layers: int,
) -> PropagationState:
    """L rounds of x_u <- sum_i x_i / sqrt(|N_u||N_i|) and the mirror update.

    Degrees are computed on the supplied (possibly masked) pair list;
    zero-degree nodes receive the empty sum (zero) on every layer.
    """
    if num_layers < 1:
        raise ValueError("num_layers must be >= 1")
    num_users, num_items = x_user0.shape[0], x_item0.shape[0]
    deg_u = torch.bincount(pair_users, minlength=num_users).to(x_user0.dtype)
    deg_i = torch.bincount(pair_items, minlength=num_items).to(x_item0.dtype)
    isolated = int((deg_u == 0).sum() + (deg_i == 0).sum())
    if isolated:
        log.debug("propagate: %d isolated node(s) carry zero messages", isolated)
    norm = 1.0 / torch.sqrt(deg_u[pair_users] * deg_i[pair_items])

    user_layers = [x_user0]
    item_layers = [x_item0]
    for _ in range(num_layers):
        xu, xi = user_layers[-1], item_layers[-1]
        msg_to_u = norm.unsqueeze(1) * xi[pair_items]
        msg_to_i = norm.unsqueeze(1) * xu[pair_users]
        user_layers.append(torch.zeros_like(xu).index_add(0, pair_users, msg_to_u))
        item_layers.append(torch.zeros_like(xi).index_add(0, pair_items, msg_to_i))
    return PropagationState(user_layers, item_layers, deg_u, deg_i)


def final_embeddings(
    state: PropagationState, include_layer0: bool = False
) -> tuple[Tensor, Tensor]:
    """Average the propagated layers (1..L by default, 0..L when toggled)."""
    start = 0 if include_layer0 else 1
    xu = torch.stack(state.user_layers[start:], dim=0).mean(0)
    xi = torch.stack(state.item_layers[start:], dim=0).mean(0)
    return xu, xi
