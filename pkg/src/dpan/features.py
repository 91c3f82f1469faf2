"""Vocabulary management, sample/batch containers, and the feature embedding layer.

Conventions that the rest of the model leans on:

* ID 0 is reserved for padding/unknown in every vocabulary.  Lookups multiply
  by an ``id != 0`` indicator, so the zero row contributes exact zero vectors
  and receives exact zero gradient; it can never drift away from zero.
* Behavior sequences are stored as their valid rows only; batching right-pads
  with id 0 up to the configured length T and reports a 0/1 mask.  Rows past
  the mask must never influence model output, whatever ids they hold.
* Out-of-vocabulary ids are remapped to 0 and counted, never a crash.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

from .layers import Embedding
from .numerics import Tensor, concat, mul

DEFAULT_ATTRIBUTES = ("item", "brand", "category", "price", "title")

# Context vocabularies travel in the same manifest as item attributes.
USER_FIELD = "user"
CHANNEL_FIELD = "channel"
TIME_FIELD = "time_bucket"

CHANNEL_IDS = {"SRP": 1, "GUL": 2}
CHANNEL_NAMES = {v: k for k, v in CHANNEL_IDS.items()}


@dataclass(frozen=True)
class AttributeSchema:
    """Ordered item attributes with a shared embedding width.

    The order is fixed and identical for trigger, target, and sequence items;
    a single ``dim`` keeps every attribute the same width, which the
    sequence-axis compressions require when they sum vectors across
    attributes.
    """

    names: tuple[str, ...] = DEFAULT_ATTRIBUTES
    dim: int = 16

    def __post_init__(self) -> None:
        if len(self.names) < 1:
            raise ValueError("schema needs at least one attribute")
        if len(set(self.names)) != len(self.names):
            raise ValueError("attribute names must be unique")
        if self.dim < 1:
            raise ValueError("embedding dim must be positive")

    @property
    def k(self) -> int:
        return len(self.names)


@dataclass
class Sample:
    """One impression: a user reached ``trigger`` via ``channel`` and was
    shown ``target``; ``seq`` holds the valid behavior rows (newest last)."""

    user: int
    channel: str
    time_bucket: int
    trigger: tuple[int, ...]
    target: tuple[int, ...]
    seq: tuple[tuple[int, ...], ...]
    label: int
    day: int = 0
    event: int = 0

    @property
    def seq_len(self) -> int:
        return len(self.seq)


@dataclass
class Batch:
    """Dense id arrays for a list of samples, padded to a common T."""

    user: np.ndarray          # (B,) int
    channel: np.ndarray       # (B,) int
    time_bucket: np.ndarray   # (B,) int
    trigger: np.ndarray       # (B, K) int
    target: np.ndarray        # (B, K) int
    seq: np.ndarray           # (B, T, K) int
    mask: np.ndarray          # (B, T) float, 1 on valid rows
    label: np.ndarray         # (B,) float

    @property
    def size(self) -> int:
        return int(self.label.shape[0])

    @property
    def seq_len(self) -> np.ndarray:
        return self.mask.sum(axis=1)


def write_manifest(path, sizes: dict[str, int], header: str | None = None) -> None:
    """One ``name<TAB>vocab_size`` line per vocabulary (row 0 included)."""
    lines = [f"{name}\t{int(size)}" for name, size in sizes.items()]
    if header is not None:
        lines.insert(0, header if header.startswith("#") else f"# {header}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_manifest(path) -> dict[str, int]:
    sizes: dict[str, int] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected 'name<TAB>size', got {raw!r}")
            name, size = parts
            try:
                sizes[name] = int(size)
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: bad vocabulary size {size!r}") from exc
            if sizes[name] < 1:
                raise ValueError(f"{path}:{lineno}: vocabulary size must be >= 1")
    return sizes


def split_sequence(seq, t: int, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Column-wise view of one behavior sequence.

    Returns (columns, mask): ``columns[kk]`` is attribute ``kk``'s id sequence
    padded to length ``t``; ``mask`` is False on positions at or past the
    valid length.  Sequences longer than ``t`` keep their most recent rows.
    """
    rows = list(seq)[-t:] if t else []
    columns = np.zeros((k, t), dtype=np.int64)
    mask = np.zeros(t, dtype=bool)
    for i, row in enumerate(rows):
        if len(row) != k:
            raise ValueError(f"behavior row has {len(row)} ids, expected {k}")
        columns[:, i] = row
        mask[i] = True
    return columns, mask


class FeatureSpace:
    """Embedding tables for item attributes plus user/channel/time context.

    ``oov_count`` tracks how many ids were remapped to the reserved 0 row
    while batching.
    """

    def __init__(self, schema: AttributeSchema, sizes: dict[str, int],
                 rng: np.random.Generator, user_dim: int = 16,
                 ctx_dim: int = 16) -> None:
        missing = [name for name in (*schema.names, USER_FIELD, CHANNEL_FIELD, TIME_FIELD)
                   if name not in sizes]
        if missing:
            raise ValueError(f"manifest is missing vocabularies: {missing}")
        self.schema = schema
        self.sizes = dict(sizes)
        self.user_dim = user_dim
        self.ctx_dim = ctx_dim
        self.oov_count = 0
        self._oov_lock = threading.Lock()
        self.attr_tables = {
            name: Embedding(sizes[name], schema.dim, rng, f"emb.{name}")
            for name in schema.names
        }
        self.user_table = Embedding(sizes[USER_FIELD], user_dim, rng, "emb.user")
        self.channel_table = Embedding(sizes[CHANNEL_FIELD], ctx_dim, rng, "emb.channel")
        self.time_table = Embedding(sizes[TIME_FIELD], ctx_dim, rng, "emb.time_bucket")

    # -- id handling ----------------------------------------------------

    def _fold_oov(self, ids: np.ndarray, field_name: str) -> np.ndarray:
        limit = self.sizes[field_name]
        bad = (ids < 0) | (ids >= limit)
        if np.any(bad):
            with self._oov_lock:  # encode may run on several eval threads
                self.oov_count += int(bad.sum())
            ids = np.where(bad, 0, ids)
        return ids

    def encode(self, samples, t: int) -> Batch:
        """Pack samples into padded arrays, folding OOV ids to 0."""
        if not samples:
            raise ValueError("cannot encode an empty batch")
        k = self.schema.k
        b = len(samples)
        user = np.zeros(b, dtype=np.int64)
        channel = np.zeros(b, dtype=np.int64)
        time_bucket = np.zeros(b, dtype=np.int64)
        trigger = np.zeros((b, k), dtype=np.int64)
        target = np.zeros((b, k), dtype=np.int64)
        seq = np.zeros((b, t, k), dtype=np.int64)
        mask = np.zeros((b, t), dtype=np.float64)
        label = np.zeros(b, dtype=np.float64)
        for i, s in enumerate(samples):
            user[i] = s.user
            channel[i] = CHANNEL_IDS.get(s.channel, 0)
            time_bucket[i] = s.time_bucket
            trigger[i] = s.trigger
            target[i] = s.target
            columns, valid = split_sequence(s.seq, t, k)
            seq[i] = columns.T
            mask[i] = valid
            label[i] = s.label
        user = self._fold_oov(user, USER_FIELD)
        channel = self._fold_oov(channel, CHANNEL_FIELD)
        time_bucket = self._fold_oov(time_bucket, TIME_FIELD)
        for kk, name in enumerate(self.schema.names):
            trigger[:, kk] = self._fold_oov(trigger[:, kk], name)
            target[:, kk] = self._fold_oov(target[:, kk], name)
            seq[:, :, kk] = self._fold_oov(seq[:, :, kk], name)
        return Batch(user, channel, time_bucket, trigger, target, seq, mask, label)

    # -- lookups ----------------------------------------------------------
    # Every lookup multiplies by an id != 0 indicator so the reserved row
    # contributes exact zeros and receives exact zero gradient.

    @staticmethod
    def _lookup(table: Embedding, ids: np.ndarray) -> Tensor:
        out = table(ids)
        gate = np.broadcast_to((ids != 0).astype(np.float64)[..., None],
                               out.shape).copy()
        return mul(out, Tensor(gate))

    def embed_item(self, ids: np.ndarray) -> list[Tensor]:
        """Per-attribute embeddings of item id rows: (B, K) -> K x (B, d)."""
        return [self._lookup(self.attr_tables[name], ids[:, kk])
                for kk, name in enumerate(self.schema.names)]

    def embed_sequence(self, seq: np.ndarray) -> list[Tensor]:
        """(B, T, K) -> K tensors of shape (B, T, d)."""
        return [self._lookup(self.attr_tables[name], seq[:, :, kk])
                for kk, name in enumerate(self.schema.names)]

    def embed_user(self, ids: np.ndarray) -> Tensor:
        return self._lookup(self.user_table, ids)

    def embed_channel(self, ids: np.ndarray) -> Tensor:
        return self._lookup(self.channel_table, ids)

    def embed_time(self, ids: np.ndarray) -> Tensor:
        return self._lookup(self.time_table, ids)

    def embed_context(self, channel: np.ndarray, time_bucket: np.ndarray) -> Tensor:
        """Concatenated channel + browsing-time embeddings, (B, 2*ctx_dim)."""
        return concat([self.embed_channel(channel),
                       self.embed_time(time_bucket)], axis=1)

    def params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for table in self.attr_tables.values():
            out.update(table.params())
        out.update(self.user_table.params())
        out.update(self.channel_table.params())
        out.update(self.time_table.params())
        return out
