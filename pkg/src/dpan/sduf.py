"""Condition-driven fusion of the similarity and diversity representations.

A parameter generation network maps the condition vector (channel embedding,
browsing-time embedding, trigger item embedding; never anything about the
target) to one flat vector that is split into:

* a shallow gate ``W_s`` (width = aggregated dim, sigmoid-squashed), and
* L bias-free weight matrices for the deep union, reshaped row-major with
  input width 2 * aggregated dim.

Shallow union blends coordinatewise: ``v_su = W_s ⊗ v_div + (1-W_s) ⊗ v_sim``.
It is computed in the algebraically identical form
``v_sim + W_s ⊗ (v_div - v_sim)`` because that form provably keeps every
coordinate inside [min, max] of the two inputs in floating point, given a
gate strictly inside (0, 1).  The gate is clamped to
[GATE_CLAMP, 1 - GATE_CLAMP] since a saturated float sigmoid can return
exactly 0.0 or 1.0, which would break both the open-interval invariant and
the containment argument.

Deep union iterates ``h_l = relu(h_{l-1} @ W_l)`` from ``h_0 = [v_sim, v_div]``
with no bias terms and returns the last layer's output.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import MLP
from .numerics import (
    DimensionError,
    Tensor,
    add,
    clip,
    concat,
    mul,
    relu,
    reshape,
    rowwise_matmul,
    sigmoid,
    slice_last,
    sub,
)

GATE_CLAMP = 1e-12


@dataclass
class FusionParams:
    """Per-sample generated parameters: gate (B, agg) and L deep matrices."""

    gate: Tensor
    deep: list[Tensor]


class Sduf:
    """Parameter generation network plus the two unions it feeds."""

    def __init__(self, cond_dim: int, agg_dim: int, deep_widths: tuple[int, ...],
                 hidden: int, rng: np.random.Generator, name: str = "sduf") -> None:
        if agg_dim < 1:
            raise ValueError("aggregated dim must be positive")
        if any(w < 1 for w in deep_widths):
            raise ValueError(f"deep union widths must be positive, got {deep_widths}")
        self.agg_dim = agg_dim
        self.deep_widths = tuple(deep_widths)
        chain = (2 * agg_dim, *deep_widths)
        self.segment_shapes = list(zip(chain[:-1], chain[1:]))
        self.total = agg_dim + sum(a * b for a, b in self.segment_shapes)
        self.net = MLP([cond_dim, hidden, self.total], rng, f"{name}.pg")

    @staticmethod
    def condition(channel_emb: Tensor, time_emb: Tensor,
                  trigger_embs: list[Tensor]) -> Tensor:
        """Assemble h_cond.  Only channel/time/trigger are accepted here;
        target features have no way in, by construction."""
        return concat([channel_emb, time_emb, *trigger_embs], axis=1)

    def generate(self, h_cond: Tensor) -> FusionParams:
        """Emit and partition the full generated parameter vector."""
        flat = self.net(h_cond)
        if flat.shape[1] != self.total:
            raise DimensionError(
                f"generated vector has width {flat.shape[1]}, "
                f"configured layout needs {self.total}"
            )
        b = flat.shape[0]
        gate = clip(sigmoid(slice_last(flat, 0, self.agg_dim)),
                    GATE_CLAMP, 1.0 - GATE_CLAMP)
        deep: list[Tensor] = []
        offset = self.agg_dim
        for rows, cols in self.segment_shapes:
            seg = slice_last(flat, offset, offset + rows * cols)
            deep.append(reshape(seg, (b, rows, cols)))
            offset += rows * cols
        return FusionParams(gate=gate, deep=deep)

    def params(self) -> dict[str, Tensor]:
        return self.net.params()


def shallow_union(v_sim: Tensor, v_div: Tensor, gate: Tensor) -> Tensor:
    """Gate-blend of the two representations (see module docstring)."""
    if v_sim.shape != v_div.shape or v_sim.shape != gate.shape:
        raise DimensionError(
            f"shallow_union: shapes {v_sim.shape}, {v_div.shape}, {gate.shape} differ"
        )
    return add(v_sim, mul(gate, sub(v_div, v_sim)))


def deep_union(v_sim: Tensor, v_div: Tensor, mats: list[Tensor]) -> Tensor:
    """h_0 = [v_sim, v_div]; h_l = relu(h_{l-1} @ W_l); returns h_L."""
    if not mats:
        raise ValueError("deep_union: need at least one generated matrix")
    h = concat([v_sim, v_div], axis=1)
    for w in mats:
        h = relu(rowwise_matmul(h, w))
    return h
