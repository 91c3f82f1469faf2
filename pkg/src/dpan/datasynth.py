"""Synthetic recommendation logs with a planted, channel-conditioned
preference mechanism.

The generator builds a small catalog (every item gets a brand, category,
price bucket, and title token), a population of users with latent interest
vectors, then simulates impression events day by day.  Each event picks a
user, a channel, and a trigger item, builds a candidate slate around the
trigger, and draws clicks from

    p(click) = sigmoid(base + interest_match
                       + beta_sim * srp_match(trigger, cand, history)   on SRP
                       + beta_div * FRESHNESS_WEIGHT
                                  * attr_freshness(cand, history)       on GUL)

The pivot of the mechanism is one statistic, ``history_sim``: the
candidate's mean attribute overlap with the user's recent consumption.
Search-page traffic rewards it (people refine toward what they were just
looking at, plus direct overlap with the trigger), general-listing traffic
punishes it (people browse away from what they have already seen).  The
punishment is deliberately milder than the reward: a channel-blind fit
still sees a positive net slope on the statistic, so plain gradient descent
is pulled toward history-match pooling, but that blind compromise is
sign-wrong on general-listing traffic, and only a model that routes the
statistic by channel can be right on both channels at once.  ``base`` is calibrated on a pilot simulation so the
positive rate lands near the configured target.  Clicked candidates enter
the user's behavior history after the event, never before, so recorded
sequences are always causal.

The file format is one JSON object per line (see ``write_dataset``); lines
starting with ``#`` are comments.  A vocabulary manifest and a config echo
travel next to the dataset.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, fields

import numpy as np

from .features import (
    CHANNEL_IDS,
    DEFAULT_ATTRIBUTES,
    Sample,
    write_manifest,
)
from .kvconfig import format_kv

# Emitted behavior sequences keep at most this many most-recent rows.
MAX_HISTORY = 50

# Only this many most-recent history rows drive the history-similarity
# statistic.  Users react to what they consumed lately, not to their whole
# recorded trail, and keeping the window at the length a desk-scale model
# actually attends over means the planted effects are learnable rather than
# half-hidden.
BEHAVIOR_WINDOW = 20

# How strongly latent interests move the click logit.  Interest lifts have a
# wide dynamic range (a concentrated user can see lifts near 10), so these
# weights are kept small: interest supplies background texture while the
# channel-conditioned effects stay the dominant learnable signal at the
# default betas.
INTEREST_CAT_WEIGHT = 0.12
INTEREST_BRAND_WEIGHT = 0.07

# Chance that a slate candidate is drawn from the trigger's category rather
# than uniformly from the catalog.
SIMILAR_CANDIDATE_RATE = 0.5

# Mean attribute overlap against a 20-row window concentrates near 0.04, so
# the raw history similarity is stretched by this gain (capped at 1) before
# the betas act; without it the within-channel effect would drown in label
# noise.
HISTORY_SIM_GAIN = 8.0

# Weights of the direct trigger-candidate overlap and the history-similarity
# component inside the SRP match.  The history part carries more weight: the
# same statistic is rewarded on SRP and punished on GUL, so channel-aware
# routing, not the statistic itself, is what a model must learn.
MATCH_DIRECT_WEIGHT = 0.3
MATCH_HISTORY_WEIGHT = 0.7

# Scale of the freshness reward on GUL relative to beta_div.  Freshness is
# worth less per unit than history similarity earns on SRP (0.8 versus 1.4
# in logits at beta 2), which leaves a channel-blind fit a positive net
# slope to bootstrap from; an exactly balanced flip would give the pooled
# statistic zero marginal signal and nothing, routed or not, would learn it.
FRESHNESS_WEIGHT = 0.4

# 1% critical value of the chi-squared distribution with one degree of
# freedom, for the 2x2 independence check on generated data.
CHI2_CRIT_1DF_01 = 6.634896601

DATASET_FILE = "dataset.jsonl"
MANIFEST_FILE = "manifest.tsv"
WORLD_FILE = "world.txt"


@dataclass(frozen=True)
class WorldConfig:
    users: int = 400
    items: int = 600
    brands: int = 120
    categories: int = 30
    price_buckets: int = 10
    title_tokens: int = 200
    time_buckets: int = 8
    days: int = 6
    events_per_day: int = 1000
    slate_size: int = 10
    behaviors_per_user: int = 10
    srp_fraction: float = 0.5
    beta_sim: float = 2.0
    beta_div: float = 2.0
    positive_rate: float = 0.25
    seed: int = 0

    def __post_init__(self) -> None:
        counts = {
            "users": self.users, "items": self.items, "brands": self.brands,
            "categories": self.categories, "price_buckets": self.price_buckets,
            "title_tokens": self.title_tokens, "time_buckets": self.time_buckets,
            "days": self.days, "events_per_day": self.events_per_day,
            "slate_size": self.slate_size,
        }
        for name, value in counts.items():
            if value < 1:
                raise ValueError(f"{name} must be >= 1, got {value}")
        if self.behaviors_per_user < 0:
            raise ValueError("behaviors_per_user must be >= 0")
        if not 0.0 <= self.srp_fraction <= 1.0:
            raise ValueError(f"srp_fraction must be in [0, 1], got {self.srp_fraction}")
        if not 0.0 < self.positive_rate < 1.0:
            raise ValueError(f"positive_rate must be in (0, 1), got {self.positive_rate}")
        if self.slate_size > self.items:
            raise ValueError(
                f"slate_size {self.slate_size} exceeds the catalog of {self.items} items"
            )
        for name in ("categories", "brands", "price_buckets", "title_tokens"):
            if getattr(self, name) > self.items:
                raise ValueError(f"{name} exceeds items: every attribute value "
                                 f"needs at least one item carrying it")

    @property
    def impressions(self) -> int:
        return self.days * self.events_per_day * self.slate_size

    @classmethod
    def sized(cls, items: int, **overrides) -> "WorldConfig":
        """Defaults with the attribute vocabularies scaled to a catalog of
        ``items``, keeping the default world's ratios."""
        derived: dict[str, object] = dict(
            items=items,
            brands=max(1, items // 5),
            categories=max(1, items // 20),
            price_buckets=max(1, min(10, items)),
            title_tokens=max(1, items // 3),
        )
        derived.update(overrides)
        return cls(**derived)


def vocab_sizes(config: WorldConfig) -> dict[str, int]:
    """Vocabulary sizes for the manifest; +1 everywhere for the reserved 0."""
    return {
        "item": config.items + 1,
        "brand": config.brands + 1,
        "category": config.categories + 1,
        "price": config.price_buckets + 1,
        "title": config.title_tokens + 1,
        "user": config.users + 1,
        "channel": max(CHANNEL_IDS.values()) + 1,
        "time_bucket": config.time_buckets + 1,
    }


@dataclass
class LatentUser:
    """Latent preferences driving trigger choice and the interest term."""

    category_interest: np.ndarray   # index by category id; [0] is 0; sums to 1
    brand_interest: np.ndarray      # likewise over brand ids
    activity: float
    history: list[tuple[int, ...]] = field(default_factory=list)


def attr_overlap(trigger: tuple[int, ...], cand: tuple[int, ...]) -> float:
    """Fraction of shared non-id attributes (positions 1..K-1)."""
    shared = sum(1 for a, b in zip(trigger[1:], cand[1:]) if a == b)
    return shared / (len(trigger) - 1)


def history_sim(cand: tuple[int, ...], history) -> float:
    """Similarity of the candidate to recent consumption: mean attribute
    overlap with the last BEHAVIOR_WINDOW history rows, stretched by
    HISTORY_SIM_GAIN and capped at 1.  0 for an empty history."""
    window = tuple(history)[-BEHAVIOR_WINDOW:]
    if not window:
        return 0.0
    mean = sum(attr_overlap(row, cand) for row in window) / len(window)
    return min(1.0, HISTORY_SIM_GAIN * mean)


def attr_freshness(cand: tuple[int, ...], history) -> float:
    """How far the candidate sits from recent consumption: 1 - history_sim.
    An empty history makes everything maximally fresh."""
    return 1.0 - history_sim(cand, history)


def srp_match(trigger: tuple[int, ...], cand: tuple[int, ...], history) -> float:
    """The planted search-channel preference: direct trigger-candidate
    overlap blended with similarity to recent consumption."""
    return (MATCH_DIRECT_WEIGHT * attr_overlap(trigger, cand)
            + MATCH_HISTORY_WEIGHT * history_sim(cand, history))


class World:
    """Catalog attribute tables plus the user population."""

    def __init__(self, config: WorldConfig, rng: np.random.Generator) -> None:
        self.config = config
        n = config.items
        self.brand = self._assign(rng, n, config.brands)
        self.category = self._assign(rng, n, config.categories)
        self.price = self._assign(rng, n, config.price_buckets)
        self.title = self._assign(rng, n, config.title_tokens)
        self.category_items = {
            c: np.flatnonzero(self.category == c)
            for c in range(1, config.categories + 1)
        }
        self.users = [self._make_user(rng) for _ in range(config.users)]
        activity = np.array([u.activity for u in self.users])
        self._user_p = activity / activity.sum()
        for user in self.users:
            for _ in range(config.behaviors_per_user):
                user.history.append(self.row(self.sample_interest_item(user, rng)))

    @staticmethod
    def _assign(rng, n_items: int, n_values: int) -> np.ndarray:
        """Attribute value per item id (index 0 unused); every value occurs."""
        values = np.zeros(n_items + 1, dtype=np.int64)
        values[1:] = rng.integers(1, n_values + 1, size=n_items)
        present = set(np.unique(values[1:]).tolist())
        missing = [v for v in range(1, n_values + 1) if v not in present]
        if missing:
            slots = rng.choice(np.arange(1, n_items + 1), size=len(missing),
                               replace=False)
            for slot, value in zip(slots, missing):
                values[slot] = value
        return values

    def _make_user(self, rng) -> LatentUser:
        cat = np.zeros(self.config.categories + 1)
        cat[1:] = rng.dirichlet(np.full(self.config.categories, 0.5))
        brand = np.zeros(self.config.brands + 1)
        brand[1:] = rng.dirichlet(np.full(self.config.brands, 0.5))
        return LatentUser(category_interest=cat, brand_interest=brand,
                          activity=float(rng.uniform(0.5, 1.5)))

    def row(self, item: int) -> tuple[int, ...]:
        return (int(item), int(self.brand[item]), int(self.category[item]),
                int(self.price[item]), int(self.title[item]))

    def sample_user(self, rng) -> int:
        return int(rng.choice(len(self.users), p=self._user_p))

    def sample_interest_item(self, user: LatentUser, rng) -> int:
        c = int(rng.choice(self.config.categories + 1, p=user.category_interest))
        return int(rng.choice(self.category_items[c]))

    def sample_candidate(self, trigger: int, rng) -> int:
        if rng.random() < SIMILAR_CANDIDATE_RATE:
            pool = self.category_items[int(self.category[trigger])]
            cand = int(rng.choice(pool))
            if cand == trigger and len(pool) > 1:
                cand = int(rng.choice(pool))
            return cand
        return int(rng.integers(1, self.config.items + 1))

    def interest_term(self, user: LatentUser, item: int) -> float:
        cat_lift = self.config.categories * user.category_interest[self.category[item]]
        brand_lift = self.config.brands * user.brand_interest[self.brand[item]]
        return (INTEREST_CAT_WEIGHT * (cat_lift - 1.0)
                + INTEREST_BRAND_WEIGHT * (brand_lift - 1.0))


def build_world(config: WorldConfig) -> World:
    return World(config, np.random.default_rng([config.seed, 0]))


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    z = math.exp(x)
    return z / (1.0 + z)


def _simulate(world: World, config: WorldConfig, base: float,
              rng: np.random.Generator, emit) -> None:
    """Run the full event loop; ``emit(sample, raw_logit)`` per impression."""
    event_id = 0
    for day in range(1, config.days + 1):
        for _ in range(config.events_per_day):
            event_id += 1
            uid = world.sample_user(rng)
            user = world.users[uid]
            channel = "SRP" if rng.random() < config.srp_fraction else "GUL"
            time_bucket = int(rng.integers(1, config.time_buckets + 1))
            trigger = world.sample_interest_item(user, rng)
            trigger_row = world.row(trigger)
            history = tuple(user.history[-MAX_HISTORY:])
            window = history[-BEHAVIOR_WINDOW:]
            hist_arr = np.array(window, dtype=np.int64) if window else None
            clicked = []
            for _ in range(config.slate_size):
                cand_row = world.row(world.sample_candidate(trigger, rng))
                logit = world.interest_term(user, cand_row[0])
                if hist_arr is None:
                    hsim = 0.0
                else:
                    hsim = min(1.0, HISTORY_SIM_GAIN
                               * float((hist_arr[:, 1:]
                                        == np.array(cand_row[1:])).mean()))
                if channel == "SRP":
                    logit += config.beta_sim * (
                        MATCH_DIRECT_WEIGHT * attr_overlap(trigger_row, cand_row)
                        + MATCH_HISTORY_WEIGHT * hsim)
                else:
                    logit += config.beta_div * FRESHNESS_WEIGHT * (1.0 - hsim)
                label = int(rng.random() < _sigmoid(base + logit))
                emit(Sample(user=uid + 1, channel=channel,
                            time_bucket=time_bucket, trigger=trigger_row,
                            target=cand_row, seq=history, label=label,
                            day=day, event=event_id), logit)
                if label:
                    clicked.append(cand_row)
            user.history.extend(clicked)


def _calibrate_base(config: WorldConfig) -> float:
    """Pick ``base`` so the pilot's mean click probability hits the target."""
    pilot = WorldConfig(**{**_config_dict(config), "days": 1,
                           "events_per_day": min(400, config.events_per_day
                                                 * config.days)})
    world = World(pilot, np.random.default_rng([config.seed, 1]))
    logits: list[float] = []
    _simulate(world, pilot, 0.0, np.random.default_rng([config.seed, 1, 1]),
              lambda sample, logit: logits.append(logit))
    arr = np.array(logits)
    lo, hi = -20.0, 20.0
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        rate = float(np.mean(1.0 / (1.0 + np.exp(-(arr + mid)))))
        if rate < config.positive_rate:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _config_dict(config: WorldConfig) -> dict[str, object]:
    return {f.name: getattr(config, f.name) for f in fields(WorldConfig)}


@dataclass(frozen=True)
class GenerationSummary:
    dataset_path: str
    manifest_path: str
    world_path: str
    impressions: int
    positives: int
    base: float

    @property
    def positive_rate(self) -> float:
        return self.positives / self.impressions


def _record(sample: Sample) -> str:
    return json.dumps({
        "user": sample.user,
        "channel": sample.channel,
        "time_bucket": sample.time_bucket,
        "trigger": list(sample.trigger),
        "target": list(sample.target),
        "seq": [list(row) for row in sample.seq],
        "label": sample.label,
        "day": sample.day,
        "event": sample.event,
    })


def _config_comment(config: WorldConfig, base: float) -> str:
    pairs = " ".join(f"{k}={v}" for k, v in sorted(_config_dict(config).items()))
    return f"# world {pairs} base={base:.6f}"


def generate(config: WorldConfig, out_dir) -> GenerationSummary:
    """Simulate the configured world and write dataset + manifest + echo."""
    os.makedirs(out_dir, exist_ok=True)
    base = _calibrate_base(config)
    world = build_world(config)
    dataset_path = os.path.join(out_dir, DATASET_FILE)
    manifest_path = os.path.join(out_dir, MANIFEST_FILE)
    world_path = os.path.join(out_dir, WORLD_FILE)
    positives = 0
    count = 0
    with open(dataset_path, "w", encoding="utf-8") as fh:
        fh.write(_config_comment(config, base) + "\n")

        def emit(sample: Sample, logit: float) -> None:
            nonlocal positives, count
            positives += sample.label
            count += 1
            fh.write(_record(sample) + "\n")

        _simulate(world, config, base, np.random.default_rng([config.seed, 2]),
                  emit)
    write_manifest(manifest_path, vocab_sizes(config),
                   header=_config_comment(config, base))
    echo = dict(_config_dict(config))
    echo["base"] = f"{base:.6f}"
    echo["impressions"] = count
    echo["positives"] = positives
    with open(world_path, "w", encoding="utf-8") as fh:
        fh.write(format_kv(echo))
    return GenerationSummary(dataset_path, manifest_path, world_path,
                             impressions=count, positives=positives, base=base)


# ---------------------------------------------------------------------------
# dataset file IO
# ---------------------------------------------------------------------------

def write_dataset(path, samples) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for sample in samples:
            fh.write(_record(sample) + "\n")


def _parse_row(value, k: int, where: str) -> tuple[int, ...]:
    if (not isinstance(value, list) or len(value) != k
            or not all(isinstance(v, int) and v >= 0 for v in value)):
        raise ValueError(f"{where}: expected a list of {k} non-negative ids")
    return tuple(value)


def read_dataset(path, sizes: dict[str, int] | None = None,
                 attrs: tuple[str, ...] = DEFAULT_ATTRIBUTES):
    """Yield Samples in file order, validating each record.

    ``sizes`` (a vocabulary manifest) enables id range checks.  Errors carry
    the file path and line number.  A final line without a newline is treated
    as truncated output, not a record.
    """
    k = len(attrs)
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    if text and not text.endswith("\n"):
        lineno = text.count("\n") + 1
        raise ValueError(f"{path}:{lineno}: truncated final line")
    for lineno, line in enumerate(text.splitlines(), start=1):
        where = f"{path}:{lineno}"
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        try:
            record = json.loads(stripped)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{where}: bad record: {exc}") from exc
        if not isinstance(record, dict):
            raise ValueError(f"{where}: expected one object per line")
        try:
            user = record["user"]
            channel = record["channel"]
            time_bucket = record["time_bucket"]
            label = record["label"]
            trigger = _parse_row(record["trigger"], k, where)
            target = _parse_row(record["target"], k, where)
            seq = tuple(_parse_row(row, k, where) for row in record["seq"])
        except KeyError as exc:
            raise ValueError(f"{where}: missing field {exc.args[0]!r}") from exc
        if channel not in CHANNEL_IDS:
            raise ValueError(f"{where}: unknown channel {channel!r}")
        if label not in (0, 1):
            raise ValueError(f"{where}: label must be 0 or 1, got {label!r}")
        if not isinstance(user, int) or user < 0:
            raise ValueError(f"{where}: bad user id {user!r}")
        if not isinstance(time_bucket, int) or time_bucket < 0:
            raise ValueError(f"{where}: bad time bucket {time_bucket!r}")
        if sizes is not None:
            _check_ids(sizes, attrs, user, time_bucket, trigger, target, seq,
                       where)
        yield Sample(user=user, channel=channel, time_bucket=time_bucket,
                     trigger=trigger, target=target, seq=seq, label=label,
                     day=int(record.get("day", 0)),
                     event=int(record.get("event", 0)))


def _check_ids(sizes, attrs, user, time_bucket, trigger, target, seq,
               where: str) -> None:
    if user >= sizes["user"]:
        raise ValueError(f"{where}: user id {user} outside vocabulary "
                         f"of size {sizes['user']}")
    if time_bucket >= sizes["time_bucket"]:
        raise ValueError(f"{where}: time bucket {time_bucket} outside "
                         f"vocabulary of size {sizes['time_bucket']}")
    for row in (trigger, target, *seq):
        for pos, name in enumerate(attrs):
            if row[pos] >= sizes[name]:
                raise ValueError(
                    f"{where}: {name} id {row[pos]} outside vocabulary "
                    f"of size {sizes[name]}"
                )


def load_dataset(data_dir, with_sizes: bool = True):
    """Read a generated directory: (samples, sizes)."""
    from .features import read_manifest

    sizes = read_manifest(os.path.join(data_dir, MANIFEST_FILE))
    samples = list(read_dataset(os.path.join(data_dir, DATASET_FILE),
                                sizes if with_sizes else None))
    return samples, sizes


# ---------------------------------------------------------------------------
# analysis helpers used to audit generated data
# ---------------------------------------------------------------------------

def chi_square_2x2(table) -> float:
    """Pearson chi-squared statistic for a 2x2 contingency table."""
    (a, b), (c, d) = table
    n = a + b + c + d
    margins = (a + b, c + d, a + c, b + d)
    if n == 0 or any(m == 0 for m in margins):
        raise ValueError("chi_square_2x2: degenerate margin")
    num = n * (a * d - b * c) ** 2
    den = margins[0] * margins[1] * margins[2] * margins[3]
    return num / den
