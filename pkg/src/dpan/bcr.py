"""Bi-dimensional compression of activation grids into four views, then two.

Two compression directions over the (position, attribute) score grids:

* user-interest view: average scores over the K attributes at each position,
  then take the weighted sum of whole-row sequence embeddings (dim K*d);
* item-information view: average scores over the valid positions for each
  attribute, then take the weighted sum of the target's (or crossed
  trigger/target) attribute embeddings (dim d).

Diversity variants weight by target-activated scores, similarity variants by
the dual (trigger*target) scores.  Two separate MLPs aggregate the user+item
pairs into equal-width ``v_sim`` / ``v_div`` vectors for the fusion stage.

Position averages divide by the number of VALID rows, not the padded length:
padded positions carry zero scores, so dividing by the full buffer length
would make outputs depend on how much padding happens to be present.
An empty sequence yields zero vectors by definition.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .aavg import ActivationScores
from .layers import MLP
from .numerics import (
    Tensor,
    broadcast_to,
    concat,
    mul,
    reduce_mean,
    reduce_sum,
    reshape,
)


@dataclass
class BcrOutput:
    v_u_div: Tensor   # (B, K*d)
    v_u_sim: Tensor   # (B, K*d)
    v_i_div: Tensor   # (B, d)
    v_i_sim: Tensor   # (B, d)
    v_sim: Tensor     # (B, agg_dim)
    v_div: Tensor     # (B, agg_dim)


def concat_rows(seq_embs: list[Tensor]) -> Tensor:
    """K tensors (B, T, d) -> whole-row embeddings (B, T, K*d)."""
    return concat(seq_embs, axis=2)


def stack_attrs(embs: list[Tensor]) -> Tensor:
    """K tensors (B, d) -> (B, K, d)."""
    b, d = embs[0].shape
    return concat([reshape(e, (b, 1, d)) for e in embs], axis=1)


def inverse_valid_length(mask: np.ndarray) -> np.ndarray:
    """1/seq_len per row, 0 for empty sequences."""
    lengths = mask.sum(axis=1)
    return np.divide(1.0, lengths, out=np.zeros_like(lengths), where=lengths > 0)


def uiem_compress(w: Tensor, seq_rows: Tensor) -> Tensor:
    """Sum_i (mean_k w[b,i,k]) * row[b,i]: (B,T,K),(B,T,M) -> (B,M)."""
    b, t, _ = w.shape
    m = seq_rows.shape[2]
    pos_w = reduce_mean(w, axis=2)                                   # (B, T)
    spread = broadcast_to(reshape(pos_w, (b, t, 1)), (b, t, m))
    return reduce_sum(mul(seq_rows, spread), axis=1)


def iiem_compress(w: Tensor, attr_stack: Tensor, inv_len: np.ndarray) -> Tensor:
    """Sum_k ((1/len) sum_i w[b,i,k]) * attr[b,k]: -> (B, d)."""
    b, _, k = w.shape
    d = attr_stack.shape[2]
    attr_w = reduce_sum(w, axis=1)                                   # (B, K)
    scale = np.broadcast_to(inv_len.reshape(b, 1), (b, k)).copy()
    attr_w = mul(attr_w, Tensor(scale))
    spread = broadcast_to(reshape(attr_w, (b, k, 1)), (b, k, d))
    return reduce_sum(mul(attr_stack, spread), axis=1)


class Bcr:
    """The four compressions plus the two aggregation MLPs."""

    def __init__(self, k: int, dim: int, agg_dim: int, hidden: int,
                 rng: np.random.Generator, name: str = "bcr") -> None:
        in_dim = k * dim + dim
        self.k = k
        self.dim = dim
        self.agg_dim = agg_dim
        self.mlp_sim = MLP([in_dim, hidden, agg_dim], rng, f"{name}.agg_sim")
        self.mlp_div = MLP([in_dim, hidden, agg_dim], rng, f"{name}.agg_div")

    def compress(self, scores: ActivationScores, seq_embs: list[Tensor],
                 trigger_embs: list[Tensor], target_embs: list[Tensor],
                 zero_user_sim: bool = False,
                 zero_item_sim: bool = False) -> BcrOutput:
        """Full pipeline from score grids to aggregated representations.

        The ``zero_*`` switches blank the corresponding similarity input
        before aggregation (the MLP input arity is preserved), which is how
        the similarity-path ablations are expressed.
        """
        rows = concat_rows(seq_embs)
        inv_len = inverse_valid_length(scores.mask)
        target_stack = stack_attrs(target_embs)
        crossed_stack = stack_attrs(
            [mul(tr, ta) for tr, ta in zip(trigger_embs, target_embs)])

        v_u_div = uiem_compress(scores.w_ta, rows)
        v_u_sim = uiem_compress(scores.w_tt, rows)
        v_i_div = iiem_compress(scores.w_ta, target_stack, inv_len)
        v_i_sim = iiem_compress(scores.w_tt, crossed_stack, inv_len)

        sim_in_user = Tensor(np.zeros(v_u_sim.shape)) if zero_user_sim else v_u_sim
        sim_in_item = Tensor(np.zeros(v_i_sim.shape)) if zero_item_sim else v_i_sim
        v_sim = self.mlp_sim(concat([sim_in_user, sim_in_item], axis=1))
        v_div = self.mlp_div(concat([v_u_div, v_i_div], axis=1))
        return BcrOutput(v_u_div, v_u_sim, v_i_div, v_i_sim, v_sim, v_div)

    def params(self) -> dict[str, Tensor]:
        out = dict(self.mlp_sim.params())
        out.update(self.mlp_div.params())
        return out
