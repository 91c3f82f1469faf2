"""Attribute-aware activation: per-attribute affinity scores and aux heads.

Each attribute k owns one small activation unit.  The same unit (same
parameter tensors) scores every behavior position against the trigger's
attribute k, against the target's attribute k, and produces the per-attribute
auxiliary prediction from (trigger, target) directly.  Scores are raw network
outputs, deliberately not softmax-normalized: the downstream compressions
average them, and normalizing would change what those averages mean.

Masked (padded) positions are forced to exact zero in every score grid, which
also forces exact zero gradients into the unit from those positions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .features import AttributeSchema
from .layers import MLP
from .numerics import (
    Tensor,
    broadcast_to,
    clip,
    concat,
    log,
    mul,
    reduce_mean,
    reshape,
    sigmoid,
    sub,
)

PROB_CLAMP = 1e-7


class ActivationUnit:
    """Affinity net over [x, q, x ⊙ q]: two d-dim inputs to one raw score."""

    def __init__(self, dim: int, hidden: int, rng: np.random.Generator,
                 name: str) -> None:
        self.dim = dim
        self.net = MLP([3 * dim, hidden, 1], rng, name)

    def __call__(self, x: Tensor, q: Tensor) -> Tensor:
        """x, q: (N, d) -> (N, 1)."""
        return self.net(concat([x, q, mul(x, q)], axis=1))

    def params(self) -> dict[str, Tensor]:
        return self.net.params()


@dataclass
class ActivationScores:
    """Score grids over (batch, position, attribute) plus aux logits.

    ``w_tt = w_tr * w_ta`` elementwise; masked positions are zero in all
    three grids.
    """

    w_tr: Tensor          # (B, T, K)
    w_ta: Tensor          # (B, T, K)
    w_tt: Tensor          # (B, T, K)
    aux_logits: Tensor    # (B, K)
    mask: np.ndarray      # (B, T)


class Aavg:
    """One activation unit per attribute, shared across roles."""

    def __init__(self, schema: AttributeSchema, hidden: int,
                 rng: np.random.Generator, name: str = "aavg") -> None:
        self.schema = schema
        self.units = {
            attr: ActivationUnit(schema.dim, hidden, rng, f"{name}.unit.{attr}")
            for attr in schema.names
        }

    def activate_sequence(self, seq_emb: Tensor, query: Tensor,
                          mask: np.ndarray, attr: str) -> Tensor:
        """Score every position of (B, T, d) against a (B, d) query -> (B, T)."""
        b, t, d = seq_emb.shape
        x = reshape(seq_emb, (b * t, d))
        q = reshape(broadcast_to(reshape(query, (b, 1, d)), (b, t, d)), (b * t, d))
        raw = reshape(self.units[attr](x, q), (b, t))
        return mul(raw, Tensor(mask))

    def aux_prediction(self, trigger: Tensor, target: Tensor, attr: str) -> Tensor:
        """ŷ_k = sigmoid(unit_k([a_tr, a_ta, a_tr ⊙ a_ta])), shape (B, 1)."""
        return sigmoid(self.units[attr](trigger, target))

    def scores(self, seq_embs: list[Tensor], trigger_embs: list[Tensor],
               target_embs: list[Tensor], mask: np.ndarray) -> ActivationScores:
        """Build the full (B, T, K) grids and (B, K) aux logits."""
        b, t, _ = seq_embs[0].shape
        tr_cols, ta_cols, aux_cols = [], [], []
        for k, attr in enumerate(self.schema.names):
            tr_cols.append(reshape(
                self.activate_sequence(seq_embs[k], trigger_embs[k], mask, attr),
                (b, t, 1)))
            ta_cols.append(reshape(
                self.activate_sequence(seq_embs[k], target_embs[k], mask, attr),
                (b, t, 1)))
            aux_cols.append(self.units[attr](trigger_embs[k], target_embs[k]))
        w_tr = concat(tr_cols, axis=2)
        w_ta = concat(ta_cols, axis=2)
        return ActivationScores(
            w_tr=w_tr,
            w_ta=w_ta,
            w_tt=mul(w_tr, w_ta),
            aux_logits=concat(aux_cols, axis=1),
            mask=mask,
        )

    def params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for unit in self.units.values():
            out.update(unit.params())
        return out


def dual_scores(w_tr: Tensor, w_ta: Tensor) -> Tensor:
    """Elementwise product of trigger- and target-activated scores."""
    return mul(w_tr, w_ta)


def aux_loss(y_hat: Tensor, labels: np.ndarray) -> Tensor:
    """Mean binary cross-entropy of one attribute's predictions.

    ``y_hat`` holds probabilities; they are clamped to
    [PROB_CLAMP, 1 - PROB_CLAMP] before the logs.
    """
    labels = np.asarray(labels, dtype=np.float64).reshape(-1)
    if labels.size == 0:
        raise ValueError("aux_loss: empty batch")
    flat = reshape(y_hat, (labels.size,))
    p = clip(flat, PROB_CLAMP, 1.0 - PROB_CLAMP)
    y = Tensor(labels)
    ll = mul(y, log(p)) + mul(sub(1.0, y), log(sub(1.0, p)))
    return mul(reduce_mean(ll, axis=0), -1.0)
