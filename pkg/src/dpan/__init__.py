"""Attribute-aware CTR modeling for trigger-conditioned recommendation.

The package bundles a small float64 autodiff core, the DPAN model built on it
(per-attribute activation, similarity/diversity compression, and a
condition-driven fusion head), a DIN-style baseline, a synthetic data
generator with planted preference signals, and a training/evaluation harness
with a reporting CLI.
"""

from __future__ import annotations

__version__ = "0.1.0"
