"""End-to-end networks: DPAN and the trigger-aware DIN baseline.

DPAN wiring per batch:

1. embed trigger/target/sequence attributes (features),
2. per-attribute activation grids + aux heads (aavg),
3. compress into similarity/diversity representations (bcr),
4. generate fusion parameters from [channel, time, trigger] and apply the
   shallow/deep unions (sduf),
5. score ``[unions..., e_tr, e_ta, e_u, e_c]`` with an MLP + sigmoid.

The DIN baseline embeds whole items (no attribute split), attention-pools the
sequence twice (once activated by the target, once by the trigger), and
scores ``[pool_ta, pool_tr, e_tr, e_ta, e_u, e_c]``.  No compression, no
generated parameters, no auxiliary loss.

Both models clamp the click probability into [1e-7, 1-1e-7]: it keeps the
output in the open interval even when the sigmoid saturates in float64, and
the training loss applies the same clamp anyway.

Checkpoints are a small binary container (see ``save_checkpoint``): magic
``DPANCKPT``, a version, the full config as key=value text, then each named
parameter as (name, shape, raw little-endian float64).  Loading rebuilds the
model from the embedded config and restores every tensor bit-exactly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, fields, replace
from typing import BinaryIO

import numpy as np

from .aavg import PROB_CLAMP, ActivationUnit, Aavg, aux_loss
from .bcr import Bcr
from .features import (
    DEFAULT_ATTRIBUTES,
    AttributeSchema,
    Batch,
    FeatureSpace,
)
from .kvconfig import (
    format_kv,
    parse_bool,
    parse_int_tuple,
    parse_kv,
    parse_str_tuple,
)
from .layers import MLP
from .numerics import (
    Tensor,
    broadcast_to,
    clip,
    concat,
    mul,
    reduce_sum,
    reshape,
    sigmoid,
    slice_last,
)
from .sduf import Sduf, deep_union, shallow_union

ABLATION_FLAGS = (
    "no_aux_loss",
    "item_attr_only",
    "no_user_similarity",
    "no_item_similarity",
    "no_shallow_union",
    "no_deep_union",
)


@dataclass(frozen=True)
class DpanConfig:
    """Model hyperparameters; the dataclass defaults are the full-scale
    values, ``desk()`` gives the reduced profile used for laptop-sized runs."""

    attrs: tuple[str, ...] = DEFAULT_ATTRIBUTES
    attr_dim: int = 16
    user_dim: int = 16
    ctx_dim: int = 16
    t: int = 50
    unit_hidden: int = 32
    agg_dim: int = 128
    agg_hidden: int = 128
    deep_widths: tuple[int, ...] = (256, 128)
    pg_hidden: int = 64
    scoring_widths: tuple[int, ...] = (256, 128)
    alpha: float = 0.1
    no_aux_loss: bool = False
    item_attr_only: bool = False
    no_user_similarity: bool = False
    no_item_similarity: bool = False
    no_shallow_union: bool = False
    no_deep_union: bool = False
    seed: int = 0

    @classmethod
    def desk(cls, **overrides) -> "DpanConfig":
        """Small widths for quick experiments and the test suite."""
        values = dict(
            attr_dim=8, user_dim=8, ctx_dim=8, t=20, unit_hidden=16,
            agg_dim=32, agg_hidden=32, deep_widths=(64, 32), pg_hidden=32,
            scoring_widths=(64, 32),
        )
        values.update(overrides)
        return cls(**values)

    def validate(self) -> None:
        if self.no_shallow_union and self.no_deep_union:
            raise ValueError(
                "no_shallow_union and no_deep_union cannot both be set: "
                "nothing would be left to fuse"
            )
        if not self.attrs:
            raise ValueError("need at least one attribute")
        if self.no_deep_union is False and not self.deep_widths:
            raise ValueError("deep_widths must be non-empty unless no_deep_union")

    @property
    def effective_attrs(self) -> tuple[str, ...]:
        """The first attribute is the item identity; the item-attribute-only
        ablation keeps just that one."""
        return (self.attrs[0],) if self.item_attr_only else self.attrs

    def with_ablation(self, flag: str) -> "DpanConfig":
        if flag not in ABLATION_FLAGS:
            raise ValueError(f"unknown ablation flag {flag!r}; "
                             f"choose from {', '.join(ABLATION_FLAGS)}")
        return replace(self, **{flag: True})


@dataclass
class ModelOutput:
    p: Tensor                          # (B,) clamped click probabilities
    aux: Tensor | None                 # (B, K) per-attribute predictions
    diagnostics: dict[str, object]


class DpanModel:
    kind = "dpan"

    def __init__(self, config: DpanConfig, sizes: dict[str, int]) -> None:
        config.validate()
        rng = np.random.default_rng(config.seed)
        schema = AttributeSchema(config.effective_attrs, config.attr_dim)
        self.config = config
        self.sizes = dict(sizes)
        self.schema = schema
        self.features = FeatureSpace(schema, sizes, rng,
                                     user_dim=config.user_dim,
                                     ctx_dim=config.ctx_dim)
        self.aavg = Aavg(schema, config.unit_hidden, rng)
        self.bcr = Bcr(schema.k, config.attr_dim, config.agg_dim,
                       config.agg_hidden, rng)
        cond_dim = 2 * config.ctx_dim + schema.k * config.attr_dim
        self.sduf = Sduf(cond_dim, config.agg_dim, config.deep_widths,
                         config.pg_hidden, rng)
        fused_dim = (0 if config.no_shallow_union else config.agg_dim) + \
                    (0 if config.no_deep_union else config.deep_widths[-1])
        item_dim = schema.k * config.attr_dim
        score_in = fused_dim + 2 * item_dim + config.user_dim + 2 * config.ctx_dim
        self.scoring = MLP([score_in, *config.scoring_widths, 1], rng, "score")

    def encode(self, samples) -> Batch:
        """Batch samples, projecting item rows down to the attributes this
        model actually uses (the rows still carry the full set on disk)."""
        k = self.schema.k
        if k != len(self.config.attrs):
            samples = [replace(s, trigger=s.trigger[:k], target=s.target[:k],
                               seq=tuple(row[:k] for row in s.seq))
                       for s in samples]
        return self.features.encode(samples, self.config.t)

    def forward(self, batch: Batch) -> ModelOutput:
        c = self.config
        f = self.features
        trig = f.embed_item(batch.trigger)
        targ = f.embed_item(batch.target)
        seq = f.embed_sequence(batch.seq)
        scores = self.aavg.scores(seq, trig, targ, batch.mask)
        bout = self.bcr.compress(scores, seq, trig, targ,
                                 zero_user_sim=c.no_user_similarity,
                                 zero_item_sim=c.no_item_similarity)
        e_ch = f.embed_channel(batch.channel)
        e_tm = f.embed_time(batch.time_bucket)
        fusion = self.sduf.generate(Sduf.condition(e_ch, e_tm, trig))
        unions: list[Tensor] = []
        diagnostics: dict[str, object] = {
            "v_sim": bout.v_sim.data,
            "v_div": bout.v_div.data,
            "gate": fusion.gate.data,
            "gate_mean": float(fusion.gate.data.mean()),
            "gate_min": float(fusion.gate.data.min()),
            "gate_max": float(fusion.gate.data.max()),
        }
        if not c.no_shallow_union:
            v_su = shallow_union(bout.v_sim, bout.v_div, fusion.gate)
            unions.append(v_su)
            diagnostics["v_su"] = v_su.data
        if not c.no_deep_union:
            v_du = deep_union(bout.v_sim, bout.v_div, fusion.deep)
            unions.append(v_du)
            diagnostics["v_du"] = v_du.data
        e_u = f.embed_user(batch.user)
        e_c = concat([e_ch, e_tm], axis=1)
        logit = self.scoring(concat([*unions, *trig, *targ, e_u, e_c], axis=1))
        p = clip(sigmoid(reshape(logit, (batch.size,))),
                 PROB_CLAMP, 1.0 - PROB_CLAMP)
        return ModelOutput(p=p, aux=sigmoid(scores.aux_logits),
                           diagnostics=diagnostics)

    def loss(self, batch: Batch) -> tuple[Tensor, ModelOutput]:
        """Mean clamped logloss, plus alpha * sum of per-attribute aux losses."""
        out = self.forward(batch)
        total = aux_loss(out.p, batch.label)
        if not self.config.no_aux_loss:
            k = self.schema.k
            aux_terms = [aux_loss(slice_last(out.aux, i, i + 1), batch.label)
                         for i in range(k)]
            aux_sum = aux_terms[0]
            for term in aux_terms[1:]:
                aux_sum = aux_sum + term
            total = total + mul(aux_sum, self.config.alpha)
        return total, out

    def params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        out.update(self.features.params())
        out.update(self.aavg.params())
        out.update(self.bcr.params())
        out.update(self.sduf.params())
        out.update(self.scoring.params())
        return out


def _attention_pool(unit: ActivationUnit, rows: Tensor, query: Tensor,
                    mask: np.ndarray) -> Tensor:
    """Masked weighted sum of (B, T, M) rows, weights from the unit."""
    b, t, m = rows.shape
    x = reshape(rows, (b * t, m))
    q = reshape(broadcast_to(reshape(query, (b, 1, m)), (b, t, m)), (b * t, m))
    w = mul(reshape(unit(x, q), (b, t)), Tensor(mask))
    spread = broadcast_to(reshape(w, (b, t, 1)), (b, t, m))
    return reduce_sum(mul(rows, spread), axis=1)


class DinModel:
    """DIN with the trigger folded in: two attention pools over whole-item
    embeddings, one activated by the target and one by the trigger."""

    kind = "din"

    def __init__(self, config: DpanConfig, sizes: dict[str, int]) -> None:
        rng = np.random.default_rng(config.seed)
        schema = AttributeSchema(config.attrs, config.attr_dim)
        self.config = config
        self.sizes = dict(sizes)
        self.schema = schema
        self.features = FeatureSpace(schema, sizes, rng,
                                     user_dim=config.user_dim,
                                     ctx_dim=config.ctx_dim)
        item_dim = schema.k * config.attr_dim
        self.unit = ActivationUnit(item_dim, config.unit_hidden, rng, "din.unit")
        score_in = 4 * item_dim + config.user_dim + 2 * config.ctx_dim
        self.scoring = MLP([score_in, *config.scoring_widths, 1], rng, "score")

    def encode(self, samples) -> Batch:
        return self.features.encode(samples, self.config.t)

    def forward(self, batch: Batch) -> ModelOutput:
        f = self.features
        e_tr = concat(f.embed_item(batch.trigger), axis=1)
        e_ta = concat(f.embed_item(batch.target), axis=1)
        rows = concat(f.embed_sequence(batch.seq), axis=2)
        pool_ta = _attention_pool(self.unit, rows, e_ta, batch.mask)
        pool_tr = _attention_pool(self.unit, rows, e_tr, batch.mask)
        e_u = f.embed_user(batch.user)
        e_c = concat([f.embed_channel(batch.channel),
                      f.embed_time(batch.time_bucket)], axis=1)
        logit = self.scoring(concat([pool_ta, pool_tr, e_tr, e_ta, e_u, e_c],
                                    axis=1))
        p = clip(sigmoid(reshape(logit, (batch.size,))),
                 PROB_CLAMP, 1.0 - PROB_CLAMP)
        return ModelOutput(p=p, aux=None, diagnostics={})

    def loss(self, batch: Batch) -> tuple[Tensor, ModelOutput]:
        out = self.forward(batch)
        return aux_loss(out.p, batch.label), out

    def params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        out.update(self.features.params())
        out.update(self.unit.params())
        out.update(self.scoring.params())
        return out


Model = DpanModel | DinModel


def build_model(kind: str, config: DpanConfig, sizes: dict[str, int]) -> Model:
    if kind == "dpan":
        return DpanModel(config, sizes)
    if kind == "din":
        return DinModel(config, sizes)
    raise ValueError(f"unknown model kind {kind!r}")


def parameter_count(model: Model) -> int:
    return sum(p.data.size for p in model.params().values())


# ---------------------------------------------------------------------------
# checkpoint IO
# ---------------------------------------------------------------------------
# Layout (all integers little-endian):
#   bytes 0..7   magic "DPANCKPT"
#   uint32       format version (currently 1)
#   uint32       config blob length, then that many bytes of UTF-8 key=value
#   uint32       parameter count
#   per parameter, sorted by name:
#     uint16     name length, then the UTF-8 name
#     uint8      rank
#     uint32[r]  dimension sizes
#     float64[n] row-major data, little-endian

CKPT_MAGIC = b"DPANCKPT"
CKPT_VERSION = 1


def config_to_kv(model: Model) -> dict[str, object]:
    out: dict[str, object] = {"model.kind": model.kind}
    for f in fields(DpanConfig):
        out[f"model.{f.name}"] = getattr(model.config, f.name)
    for name, size in sorted(model.sizes.items()):
        out[f"vocab.{name}"] = size
    return out


def config_from_kv(kv: dict[str, str]) -> tuple[str, DpanConfig, dict[str, int]]:
    kind = kv["model.kind"]
    parsers = {
        "attrs": parse_str_tuple,
        "deep_widths": parse_int_tuple,
        "scoring_widths": parse_int_tuple,
        "alpha": float,
    }
    values: dict[str, object] = {}
    for f in fields(DpanConfig):
        raw = kv[f"model.{f.name}"]
        if f.name in parsers:
            values[f.name] = parsers[f.name](raw)
        elif f.name in ABLATION_FLAGS:
            values[f.name] = parse_bool(raw)
        else:
            values[f.name] = int(raw)
    sizes = {key[len("vocab."):]: int(val)
             for key, val in kv.items() if key.startswith("vocab.")}
    return kind, DpanConfig(**values), sizes


def save_checkpoint(path, model: Model) -> None:
    blob = format_kv(config_to_kv(model)).encode("utf-8")
    params = model.params()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", CKPT_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(params)))
        for name in sorted(params):
            arr = np.ascontiguousarray(params[name].data, dtype="<f8")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(arr.tobytes())


def _read_exact(fh: BinaryIO, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise ValueError(f"truncated checkpoint while reading {what}")
    return data


def load_checkpoint(path) -> Model:
    with open(path, "rb") as fh:
        if _read_exact(fh, 8, "magic") != CKPT_MAGIC:
            raise ValueError(f"{path} is not a model checkpoint")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != CKPT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        (blob_len,) = struct.unpack("<I", _read_exact(fh, 4, "config length"))
        kv = parse_kv(_read_exact(fh, blob_len, "config").decode("utf-8"))
        kind, config, sizes = config_from_kv(kv)
        model = build_model(kind, config, sizes)
        params = model.params()
        (count,) = struct.unpack("<I", _read_exact(fh, 4, "parameter count"))
        if count != len(params):
            raise ValueError(
                f"checkpoint has {count} parameters, model expects {len(params)}"
            )
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2, "name length"))
            name = _read_exact(fh, name_len, "name").decode("utf-8")
            if name not in params:
                raise ValueError(f"unexpected parameter {name!r} in checkpoint")
            (rank,) = struct.unpack("<B", _read_exact(fh, 1, "rank"))
            shape = tuple(
                struct.unpack("<I", _read_exact(fh, 4, "dimension"))[0]
                for _ in range(rank)
            )
            tensor = params[name]
            if shape != tensor.data.shape:
                raise ValueError(
                    f"parameter {name!r} has shape {shape} in the checkpoint, "
                    f"model expects {tensor.data.shape}"
                )
            n_items = int(np.prod(shape)) if shape else 1
            raw = _read_exact(fh, 8 * n_items, f"data of {name!r}")
            tensor.data[...] = np.frombuffer(raw, dtype="<f8").reshape(shape)
        if fh.read(1):
            raise ValueError("trailing bytes after the last parameter")
    return model
