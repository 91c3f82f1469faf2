"""Report files: tab-delimited tables, key=value summaries, and PNG figures.

Every writer takes a ``meta`` mapping (config echo, seed, input paths) and
stamps it into the file, as ``# key=value`` comment lines in text outputs and
as a PNG Description chunk in figures, so any output can be traced back to
the exact run that produced it.  Nothing here writes timestamps; identical
runs produce identical bytes.
"""

from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .kvconfig import format_kv

CHANNEL_COLORS = {"SRP": "#4878a8", "GUL": "#e49444"}


def format_cell(value) -> str:
    """Lossless, deterministic text for a table cell."""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def meta_lines(meta: dict | None) -> list[str]:
    if not meta:
        return []
    return [f"# {key}={format_cell(meta[key])}" for key in sorted(meta)]


def meta_text(meta: dict | None) -> str:
    return "\n".join(line[2:] for line in meta_lines(meta))


def write_table(path, columns, rows, meta: dict | None = None) -> None:
    """Tab-separated table: comment header, column names, one row per line."""
    lines = meta_lines(meta)
    lines.append("\t".join(columns))
    for row in rows:
        if len(row) != len(columns):
            raise ValueError(f"row has {len(row)} cells, expected {len(columns)}")
        lines.append("\t".join(format_cell(cell) for cell in row))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_table(path) -> tuple[list[str], list[list[str]]]:
    columns: list[str] = []
    rows: list[list[str]] = []
    with open(path, encoding="utf-8") as fh:
        for raw in fh:
            line = raw.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            if not columns:
                columns = line.split("\t")
            else:
                rows.append(line.split("\t"))
    return columns, rows


def write_summary(path, values: dict, meta: dict | None = None) -> None:
    """Machine-readable key=value summary with a comment header."""
    body = format_kv({key: format_cell(val) for key, val in values.items()})
    lines = meta_lines(meta)
    text = "\n".join(lines) + "\n" + body if lines else body
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


def _save(fig, path, meta: dict | None) -> None:
    fig.savefig(path, dpi=120, metadata={"Description": meta_text(meta)})
    plt.close(fig)


def plot_training_curves(path, curves: dict[str, list], meta: dict | None = None) -> None:
    """Per-epoch train loss and test AUC, one line per named run.

    ``curves`` maps a run name to its EpochMetrics-like rows (``epoch``,
    ``train_loss``, ``auc`` attributes); rows without a value are skipped.
    """
    fig, (ax_loss, ax_auc) = plt.subplots(1, 2, figsize=(9, 3.5))
    for name in sorted(curves):
        rows = curves[name]
        loss_pts = [(r.epoch, r.train_loss) for r in rows
                    if r.train_loss is not None and math.isfinite(r.train_loss)]
        auc_pts = [(r.epoch, r.auc) for r in rows if math.isfinite(r.auc)]
        if loss_pts:
            ax_loss.plot(*zip(*loss_pts), marker="o", label=name)
        if auc_pts:
            ax_auc.plot(*zip(*auc_pts), marker="o", label=name)
    for ax, title in ((ax_loss, "train loss"), (ax_auc, "test AUC")):
        ax.set_xlabel("epoch")
        ax.set_title(title)
        ax.grid(True, alpha=0.3)
        if ax.lines:
            ax.legend()
    fig.tight_layout()
    _save(fig, path, meta)


def plot_ablation(path, rows, meta: dict | None = None) -> None:
    """Horizontal AUC bars, one per (flag, auc) row, full model on top."""
    flags = [flag for flag, _ in rows]
    scores = [score for _, score in rows]
    fig, ax = plt.subplots(figsize=(7, 0.5 * len(rows) + 1.5))
    pos = range(len(rows) - 1, -1, -1)
    ax.barh(list(pos), scores, color="#4878a8")
    ax.set_yticks(list(pos), flags)
    lo, hi = min(scores), max(scores)
    pad = max((hi - lo) * 0.15, 1e-4)
    ax.set_xlim(lo - pad, hi + pad)
    for p, score in zip(pos, scores):
        ax.text(score, p, f" {score:.4f}", va="center", fontsize=8)
    ax.set_xlabel("test AUC")
    ax.set_title("single-flag ablations")
    fig.tight_layout()
    _save(fig, path, meta)


def plot_case_study(path, rows, meta: dict | None = None) -> None:
    """Grouped bars of mean distinct categories/brands per user by channel.

    ``rows`` are (channel, metric, mean, std) as produced by ``case_study``.
    """
    metrics = []
    for _, metric, _, _ in rows:
        if metric not in metrics:
            metrics.append(metric)
    channels = []
    for channel, _, _, _ in rows:
        if channel not in channels:
            channels.append(channel)
    by_key = {(channel, metric): (mean, std) for channel, metric, mean, std in rows}
    fig, ax = plt.subplots(figsize=(6, 3.5))
    width = 0.8 / max(len(channels), 1)
    for ci, channel in enumerate(channels):
        xs, means, stds = [], [], []
        for mi, metric in enumerate(metrics):
            mean, std = by_key.get((channel, metric), (math.nan, math.nan))
            if math.isnan(mean):
                continue
            xs.append(mi + (ci - (len(channels) - 1) / 2) * width)
            means.append(mean)
            stds.append(std)
        if xs:
            ax.bar(xs, means, width=width, yerr=stds, capsize=3,
                   label=channel, color=CHANNEL_COLORS.get(channel))
    ax.set_xticks(range(len(metrics)), [f"distinct {m}" for m in metrics])
    ax.set_ylabel("mean per user")
    ax.set_title("slate diversity by channel")
    ax.legend(title="channel")
    fig.tight_layout()
    _save(fig, path, meta)
