"""Training loop, ranking metrics, ablation runner, and the slate-diversity
case study.

Metric determinism: before any metric arithmetic, (score, label) pairs are
sorted into a canonical order, so shuffling the evaluation set leaves AUC and
logloss bit-identical.  AUC is the rank-sum statistic with tie-averaged
ranks; logloss applies the same probability clamp as training.
"""

from __future__ import annotations

import math
import os
import warnings
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .features import DEFAULT_ATTRIBUTES, Sample
from .model import ABLATION_FLAGS, DpanConfig, DpanModel
from .numerics import Adagrad, NonFiniteGradientError, backward, no_grad

THREADS_ENV = "DPAN_THREADS"
PROB_FLOOR = 1e-7

BRAND_POS = DEFAULT_ATTRIBUTES.index("brand")
CATEGORY_POS = DEFAULT_ATTRIBUTES.index("category")


SPLIT_RULES = ("last-day",)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 1024
    lr: float = 0.01
    epochs: int = 3
    # train on every day but the last; evaluate on the last day
    split_rule: str = "last-day"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.split_rule not in SPLIT_RULES:
            raise ValueError(f"unknown split rule {self.split_rule!r}; "
                             f"expected one of {SPLIT_RULES}")

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        """Sized for a laptop-scale run alongside ``DpanConfig.desk``."""
        base = dict(batch_size=256, epochs=3)
        base.update(overrides)
        return cls(**base)

    def split(self, samples) -> tuple[list, list]:
        return split_by_day(samples)


@dataclass(frozen=True)
class EpochMetrics:
    epoch: int
    train_loss: float | None   # None for the untrained epoch-0 row
    auc: float
    logloss: float


@dataclass
class TrainResult:
    model: object
    epochs: list[EpochMetrics]

    @property
    def final(self) -> EpochMetrics:
        return self.epochs[-1]


@dataclass
class MetricsReport:
    auc: float
    logloss: float
    relaimpr_vs_baseline: float | None = None
    # channel -> (mean, std) over users
    categories_per_user: dict[str, tuple[float, float]] = field(default_factory=dict)
    brands_per_user: dict[str, tuple[float, float]] = field(default_factory=dict)


class TrainingDiverged(RuntimeError):
    """Loss or a gradient went non-finite; training was aborted."""

    def __init__(self, epoch: int, batch_index: int, parameter: str | None,
                 detail: str) -> None:
        self.epoch = epoch
        self.batch_index = batch_index
        self.parameter = parameter
        where = f"epoch {epoch}, batch {batch_index}"
        if parameter is not None:
            where += f", parameter {parameter!r}"
        super().__init__(f"training aborted at {where}: {detail}")


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def _canonical(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if s.shape != y.shape:
        raise ValueError(f"scores and labels disagree: {s.shape} vs {y.shape}")
    if s.size == 0:
        raise ValueError("no samples to evaluate")
    order = np.lexsort((y, s))
    return s[order], y[order]


def auc(scores, labels) -> float:
    """Probability a random positive outranks a random negative (rank-sum,
    ties count half)."""
    s, y = _canonical(scores, labels)
    n = s.size
    n_pos = int(np.sum(y == 1.0))
    n_neg = n - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("auc needs both classes present")
    change = np.empty(n, dtype=bool)
    change[0] = True
    change[1:] = s[1:] != s[:-1]
    group = np.cumsum(change) - 1
    first = np.flatnonzero(change)
    last = np.append(first[1:], n) - 1
    avg_rank = 0.5 * ((first + 1) + (last + 1))
    ranks = avg_rank[group]
    rank_sum_pos = float(ranks[y == 1.0].sum())
    return (rank_sum_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def logloss(scores, labels) -> float:
    s, y = _canonical(scores, labels)
    p = np.clip(s, PROB_FLOOR, 1.0 - PROB_FLOOR)
    ll = y * np.log(p) + (1.0 - y) * np.log(1.0 - p)
    return float(-ll.mean())


def relaimpr(auc_model: float, auc_base: float) -> float:
    """Relative improvement over a baseline, in percent, measured against a
    random ranker's 0.5."""
    if auc_base == 0.5:
        raise ValueError("RelaImpr is undefined for a baseline AUC of exactly 0.5")
    return ((auc_model - 0.5) / (auc_base - 0.5) - 1.0) * 100.0


def labels_of(samples) -> np.ndarray:
    return np.array([s.label for s in samples], dtype=np.float64)


# ---------------------------------------------------------------------------
# scoring and evaluation
# ---------------------------------------------------------------------------

def eval_threads() -> int:
    raw = os.environ.get(THREADS_ENV)
    if raw is None or not raw.strip():
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError as exc:
        raise ValueError(f"{THREADS_ENV} must be an integer, got {raw!r}") from exc
    if n < 1:
        raise ValueError(f"{THREADS_ENV} must be >= 1, got {n}")
    return n


def score_samples(model, samples, batch_size: int = 512,
                  threads: int | None = None) -> np.ndarray:
    """Forward-scores for every sample, in input order.

    Chunks are scored concurrently (the model is read-only during scoring)
    and each worker writes into its own slice, so the result does not depend
    on scheduling.
    """
    n = len(samples)
    scores = np.empty(n, dtype=np.float64)
    if n == 0:
        return scores
    threads = eval_threads() if threads is None else threads
    spans = [(start, min(start + batch_size, n))
             for start in range(0, n, batch_size)]

    def work(span):
        start, stop = span
        batch = model.encode(samples[start:stop])
        with no_grad():
            out = model.forward(batch)
        scores[start:stop] = out.p.data

    if threads == 1 or len(spans) == 1:
        for span in spans:
            work(span)
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(work, spans))
    return scores


def evaluate(model, samples, batch_size: int = 512,
             threads: int | None = None,
             baseline_auc: float | None = None) -> MetricsReport:
    scores = score_samples(model, samples, batch_size, threads)
    y = labels_of(samples)
    a = auc(scores, y)
    report = MetricsReport(auc=a, logloss=logloss(scores, y))
    if baseline_auc is not None:
        report.relaimpr_vs_baseline = relaimpr(a, baseline_auc)
    return report


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def split_by_day(samples) -> tuple[list, list]:
    """Train on all days but the last; test on the last day."""
    days = sorted({s.day for s in samples})
    if len(days) < 2:
        raise ValueError("cannot split: dataset spans a single day")
    last = days[-1]
    train = [s for s in samples if s.day != last]
    test = [s for s in samples if s.day == last]
    return train, test


def train(model, train_samples, cfg: TrainConfig,
          test_samples=None, log=None) -> TrainResult:
    """Shuffled mini-batch Adagrad on the model's total loss.

    Evaluates on ``test_samples`` after each epoch (and once up front when
    ``epochs`` is 0, so the caller still gets the initialized model's
    metrics).  Aborts with ``TrainingDiverged`` on a non-finite loss or
    gradient, naming the batch and parameter.
    """
    if not train_samples:
        raise ValueError("no training samples")
    opt = Adagrad(model.params(), lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    history: list[EpochMetrics] = []

    def test_metrics() -> tuple[float, float]:
        if not test_samples:
            return math.nan, math.nan
        scores = score_samples(model, test_samples,
                               batch_size=max(cfg.batch_size, 512))
        y = labels_of(test_samples)
        return auc(scores, y), logloss(scores, y)

    if cfg.epochs == 0:
        a, l = test_metrics()
        history.append(EpochMetrics(epoch=0, train_loss=None, auc=a, logloss=l))
        return TrainResult(model=model, epochs=history)

    n = len(train_samples)
    for epoch in range(1, cfg.epochs + 1):
        perm = rng.permutation(n)
        batch_losses = []
        for bi, start in enumerate(range(0, n, cfg.batch_size)):
            idx = perm[start:start + cfg.batch_size]
            batch = model.encode([train_samples[i] for i in idx])
            opt.zero_grad()
            total, _ = model.loss(batch)
            value = total.item()
            if not math.isfinite(value):
                raise TrainingDiverged(epoch, bi, None, f"loss is {value}")
            backward(total)
            try:
                opt.step()
            except NonFiniteGradientError as exc:
                raise TrainingDiverged(epoch, bi, exc.param_name,
                                       str(exc)) from exc
            batch_losses.append(value)
        a, l = test_metrics()
        row = EpochMetrics(epoch=epoch, train_loss=float(np.mean(batch_losses)),
                           auc=a, logloss=l)
        history.append(row)
        if log is not None:
            log(f"epoch {epoch}: train_loss={row.train_loss:.5f} "
                f"auc={row.auc:.5f} logloss={row.logloss:.5f}")
    return TrainResult(model=model, epochs=history)


def ablate(config: DpanConfig, sizes: dict[str, int], train_samples,
           test_samples, cfg: TrainConfig, log=None) -> list[tuple[str, float]]:
    """Train the full model plus each single-flag ablation on the same data
    and seed; returns (flag, test AUC) rows, full model first as 'none'."""
    rows: list[tuple[str, float]] = []
    for flag in ("none", *ABLATION_FLAGS):
        model_cfg = config if flag == "none" else config.with_ablation(flag)
        model = DpanModel(model_cfg, sizes)
        result = train(model, train_samples, cfg, test_samples)
        rows.append((flag, result.final.auc))
        if log is not None:
            log(f"ablation {flag}: auc={result.final.auc:.5f}")
    return rows


# ---------------------------------------------------------------------------
# case study: slate diversity per channel
# ---------------------------------------------------------------------------

@dataclass
class CaseStudyResult:
    # (channel, metric, mean, std) over per-user means
    rows: list[tuple[str, str, float, float]]
    # metric -> channel -> user -> mean distinct count
    per_user: dict[str, dict[str, dict[int, float]]]


def case_study(model, samples, top_k: int, batch_size: int = 512,
               threads: int | None = None,
               scores: np.ndarray | None = None) -> CaseStudyResult:
    """Rank each event's slate by score, keep the top_k, and count distinct
    categories/brands, averaged per user within each channel.

    Ties rank by ascending item id for determinism.  ``scores`` may be
    passed to reuse an existing scoring run.
    """
    if top_k < 1:
        raise ValueError(f"top_k must be >= 1, got {top_k}")
    if scores is None:
        scores = score_samples(model, samples, batch_size, threads)
    if len(scores) != len(samples):
        raise ValueError("scores and samples disagree in length")
    events: dict[int, list[int]] = defaultdict(list)
    for i, s in enumerate(samples):
        events[s.event].append(i)
    largest = max(len(v) for v in events.values())
    if top_k > largest:
        warnings.warn(f"top_k {top_k} exceeds the largest slate of {largest}; "
                      f"clamping", stacklevel=2)
    counts: dict[str, dict[str, dict[int, list[int]]]] = {
        "categories": defaultdict(lambda: defaultdict(list)),
        "brands": defaultdict(lambda: defaultdict(list)),
    }
    for event in sorted(events):
        idxs = events[event]
        first = samples[idxs[0]]
        ranked = sorted(idxs, key=lambda i: (-scores[i], samples[i].target[0]))
        top = ranked[:top_k]
        cats = len({samples[i].target[CATEGORY_POS] for i in top})
        brands = len({samples[i].target[BRAND_POS] for i in top})
        counts["categories"][first.channel][first.user].append(cats)
        counts["brands"][first.channel][first.user].append(brands)
    per_user: dict[str, dict[str, dict[int, float]]] = {}
    rows: list[tuple[str, str, float, float]] = []
    for metric in ("categories", "brands"):
        per_user[metric] = {}
        for channel in ("SRP", "GUL"):
            users = counts[metric].get(channel, {})
            means = {u: float(np.mean(v)) for u, v in sorted(users.items())}
            per_user[metric][channel] = means
            values = np.array(list(means.values()), dtype=np.float64)
            if values.size:
                rows.append((channel, metric, float(values.mean()),
                             float(values.std())))
            else:
                rows.append((channel, metric, math.nan, math.nan))
    return CaseStudyResult(rows=rows, per_user=per_user)


def sign_test_greater(pairs) -> float:
    """Exact one-sided paired sign test: p-value for H1 'first > second'.

    Ties are discarded; the p-value is P[Binomial(n, 1/2) >= wins].
    """
    wins = 0
    losses = 0
    for a, b in pairs:
        if a > b:
            wins += 1
        elif b > a:
            losses += 1
    n = wins + losses
    if n == 0:
        return 1.0
    return sum(math.comb(n, i) for i in range(wins, n + 1)) / 2.0 ** n


def paired_channel_means(per_channel: dict[str, dict[int, float]]):
    """(GUL, SRP) value pairs for users observed in both channels."""
    gul = per_channel.get("GUL", {})
    srp = per_channel.get("SRP", {})
    return [(gul[u], srp[u]) for u in sorted(gul.keys() & srp.keys())]
