"""Command-line entry point: generate data, train, evaluate, ablate, and run
the slate-diversity case study.

Configuration comes from three layers, later overriding earlier: desk-scale
defaults built into the package, a plain ``key=value`` config file with
dotted sections (``model.attr_dim=16``, ``train.epochs=3``), then
command-line flags.  The resolved configuration is echoed to stdout and
stamped into every output file, so a run is reproducible from its outputs.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import fields, replace
from pathlib import Path

from .datasynth import WorldConfig, generate, load_dataset
from .kvconfig import (
    format_kv,
    parse_bool,
    parse_int_tuple,
    parse_kv,
    parse_str_tuple,
)
from .model import (
    ABLATION_FLAGS,
    DpanConfig,
    build_model,
    config_to_kv,
    load_checkpoint,
    save_checkpoint,
)
from .report import (
    plot_ablation,
    plot_case_study,
    plot_training_curves,
    write_summary,
    write_table,
)
from .traineval import (
    TrainConfig,
    TrainingDiverged,
    ablate,
    case_study,
    evaluate,
    paired_channel_means,
    relaimpr,
    sign_test_greater,
    split_by_day,
    train,
)

PROG = "dpan"


class CliError(Exception):
    """Flag or input validation failure; the message names the flag."""


# ---------------------------------------------------------------------------
# flag parsing
# ---------------------------------------------------------------------------

def positive_int(raw: str) -> int:
    value = int(raw)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def any_int(raw: str) -> int:
    return int(raw)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog=PROG,
        description="Attribute-aware CTR model with channel-conditioned "
                    "similarity/diversity fusion: synthetic data, training, "
                    "evaluation, ablations, and the slate-diversity case study.",
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    gen = sub.add_parser("gen-data", help="simulate a dataset into a directory")
    gen.add_argument("--out", required=True, metavar="DIR",
                     help="output directory (created if missing)")
    gen.add_argument("--users", type=positive_int, metavar="N")
    gen.add_argument("--items", type=positive_int, metavar="N")
    gen.add_argument("--days", type=positive_int, metavar="D")
    gen.add_argument("--seed", type=any_int, metavar="S")
    gen.add_argument("--beta-sim", type=float, metavar="F",
                     help="attribute-overlap click boost on the search channel")
    gen.add_argument("--beta-div", type=float, metavar="F",
                     help="novelty click boost on the browse channel")
    gen.set_defaults(func=cmd_gen_data)

    tr = sub.add_parser("train", help="train a model and write a checkpoint")
    tr.add_argument("--data", required=True, metavar="DIR")
    tr.add_argument("--model", required=True, choices=("dpan", "din"))
    tr.add_argument("--config", required=True, metavar="FILE",
                    help="key=value file with model.* and train.* sections")
    tr.add_argument("--out", required=True, metavar="CKPT")
    tr.add_argument("--ablate", action="append", default=[], metavar="FLAG",
                    help=f"disable one component (repeatable); one of "
                         f"{', '.join(ABLATION_FLAGS)}")
    tr.add_argument("--seed", type=any_int, metavar="S",
                    help="override both model and training seeds")
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    ev.add_argument("--ckpt", required=True, metavar="CKPT")
    ev.add_argument("--data", required=True, metavar="DIR")
    ev.add_argument("--baseline-ckpt", metavar="CKPT",
                    help="second checkpoint; report improvement relative to it")
    ev.add_argument("--out", metavar="DIR",
                    help="also write metrics table + summary here")
    ev.set_defaults(func=cmd_eval)

    ab = sub.add_parser("ablate", help="train the full model and every "
                                       "single-flag ablation")
    ab.add_argument("--data", required=True, metavar="DIR")
    ab.add_argument("--config", required=True, metavar="FILE")
    ab.add_argument("--seed", type=any_int, metavar="S",
                    help="override both model and training seeds")
    ab.add_argument("--out", default=".", metavar="DIR",
                    help="directory for the table, figure, and summary")
    ab.set_defaults(func=cmd_ablate)

    cs = sub.add_parser("case-study", help="slate diversity of top-k "
                                           "recommendations per channel")
    cs.add_argument("--ckpt", required=True, metavar="CKPT")
    cs.add_argument("--data", required=True, metavar="DIR")
    cs.add_argument("--topk", required=True, type=positive_int, metavar="K")
    cs.add_argument("--out", default=".", metavar="DIR",
                    help="directory for the table, figure, and summary")
    cs.set_defaults(func=cmd_case_study)

    return parser


# ---------------------------------------------------------------------------
# config resolution
# ---------------------------------------------------------------------------

_MODEL_FIELD_PARSERS = {
    "attrs": parse_str_tuple,
    "deep_widths": parse_int_tuple,
    "scoring_widths": parse_int_tuple,
    "alpha": float,
}

_TRAIN_FIELD_PARSERS = {
    "lr": float,
    "split_rule": str,
}


def _parse_field(section: str, name: str, raw: str, known: dict, flagged: dict):
    if name not in known:
        raise CliError(f"--config: unknown key {section}.{name!r}")
    if name in flagged:
        return flagged[name](raw)
    if name in ABLATION_FLAGS:
        return parse_bool(raw)
    return int(raw)


def load_run_config(path_str: str) -> tuple[DpanConfig, TrainConfig]:
    """Desk-scale defaults overridden by a model.*/train.* key=value file."""
    path = Path(path_str)
    if not path.is_file():
        raise CliError(f"--config: no such file: {path}")
    try:
        kv = parse_kv(path.read_text(encoding="utf-8"))
    except ValueError as exc:
        raise CliError(f"--config: {exc}") from exc
    model_fields = {f.name: f for f in fields(DpanConfig)}
    train_fields = {f.name: f for f in fields(TrainConfig)}
    model_over: dict[str, object] = {}
    train_over: dict[str, object] = {}
    for key, raw in kv.items():
        section, _, name = key.partition(".")
        try:
            if section == "model" and name:
                model_over[name] = _parse_field(section, name, raw,
                                                model_fields, _MODEL_FIELD_PARSERS)
            elif section == "train" and name:
                train_over[name] = _parse_field(section, name, raw,
                                                train_fields, _TRAIN_FIELD_PARSERS)
            else:
                raise CliError(f"--config: unknown key {key!r} "
                               f"(expected model.* or train.*)")
        except (ValueError, TypeError) as exc:
            raise CliError(f"--config: bad value for {key}: {exc}") from exc
    try:
        model_cfg = replace(DpanConfig.desk(), **model_over)
        model_cfg.validate()
        train_cfg = replace(TrainConfig.desk(), **train_over)
    except ValueError as exc:
        raise CliError(f"--config: {exc}") from exc
    return model_cfg, train_cfg


def _require_dataset(dir_str: str):
    path = Path(dir_str)
    if not path.is_dir():
        raise CliError(f"--data: no such directory: {path}")
    try:
        return load_dataset(str(path))
    except (ValueError, OSError) as exc:
        raise CliError(f"--data: {exc}") from exc


def _load_ckpt(path_str: str, flag: str):
    path = Path(path_str)
    if not path.is_file():
        raise CliError(f"{flag}: no such file: {path}")
    try:
        return load_checkpoint(str(path))
    except ValueError as exc:
        raise CliError(f"{flag}: {exc}") from exc


def _split_for_training(samples) -> tuple[list, list]:
    try:
        return split_by_day(samples)
    except ValueError as exc:
        raise CliError(f"--data: {exc}; training needs at least two days") from exc


def _eval_slice(samples) -> list:
    """The held-out slice: the last day when the data spans several days,
    everything otherwise."""
    days = {s.day for s in samples}
    if len(days) < 2:
        return list(samples)
    last = max(days)
    return [s for s in samples if s.day == last]


def _train_meta(command: str, args, model, train_cfg: TrainConfig) -> dict:
    meta = {"command": command, "data": args.data}
    meta.update(config_to_kv(model))
    for f in fields(TrainConfig):
        meta[f"train.{f.name}"] = getattr(train_cfg, f.name)
    return meta


def _echo(meta: dict) -> None:
    print("resolved configuration:")
    body = format_kv({k: str(v) for k, v in sorted(meta.items())})
    print("".join(f"  {line}\n" for line in body.splitlines()), end="")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    overrides = {}
    for flag, name in (("users", "users"), ("items", "items"), ("days", "days"),
                       ("seed", "seed"), ("beta_sim", "beta_sim"),
                       ("beta_div", "beta_div")):
        value = getattr(args, flag)
        if value is not None:
            overrides[name] = value
    try:
        if "items" in overrides:
            config = WorldConfig.sized(**overrides)
        else:
            config = WorldConfig(**overrides)
    except ValueError as exc:
        flag = next((f"--{name.replace('_', '-')}" for name in overrides
                     if name in str(exc)), "--items")
        raise CliError(f"{flag}: {exc}") from exc
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    summary = generate(config, str(out_dir))
    _echo({f"world.{f.name}": getattr(config, f.name) for f in fields(WorldConfig)})
    print(f"wrote {summary.impressions} impressions "
          f"({summary.positives} positives, rate {summary.positive_rate:.3f}) "
          f"to {out_dir}")
    return 0


def cmd_train(args) -> int:
    samples, sizes = _require_dataset(args.data)
    model_cfg, train_cfg = load_run_config(args.config)
    if args.model != "dpan" and args.ablate:
        raise CliError("--ablate: only the dpan model has ablation flags")
    for flag in args.ablate:
        try:
            model_cfg = model_cfg.with_ablation(flag)
        except ValueError as exc:
            raise CliError(f"--ablate: {exc}") from exc
    if args.seed is not None:
        model_cfg = replace(model_cfg, seed=args.seed)
        train_cfg = replace(train_cfg, seed=args.seed)
    try:
        model_cfg.validate()
        model = build_model(args.model, model_cfg, sizes)
    except ValueError as exc:
        raise CliError(f"--config: {exc}") from exc
    train_samples, test_samples = _split_for_training(samples)
    meta = _train_meta("train", args, model, train_cfg)
    meta["ablate"] = ",".join(args.ablate)
    _echo(meta)
    print(f"training on {len(train_samples)} impressions, "
          f"testing on {len(test_samples)}")
    result = train(model, train_samples, train_cfg, test_samples, log=print)
    out = Path(args.out)
    if out.parent and not out.parent.exists():
        out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(str(out), model)
    stem = out.with_suffix("")
    write_table(f"{stem}.epochs.tsv", ("epoch", "train_loss", "auc", "logloss"),
                [(r.epoch, "" if r.train_loss is None else r.train_loss,
                  r.auc, r.logloss) for r in result.epochs], meta)
    plot_training_curves(f"{stem}.curves.png", {args.model: result.epochs}, meta)
    final = result.final
    print(f"checkpoint: {out}")
    print(f"final: auc={final.auc:.6f} logloss={final.logloss:.6f}")
    return 0


def cmd_eval(args) -> int:
    model = _load_ckpt(args.ckpt, "--ckpt")
    samples, _ = _require_dataset(args.data)
    held_out = _eval_slice(samples)
    report = evaluate(model, held_out)
    baseline_auc = None
    if args.baseline_ckpt:
        baseline = _load_ckpt(args.baseline_ckpt, "--baseline-ckpt")
        baseline_auc = evaluate(baseline, held_out).auc
        try:
            report.relaimpr_vs_baseline = relaimpr(report.auc, baseline_auc)
        except ValueError as exc:
            raise CliError(f"--baseline-ckpt: {exc}") from exc
    meta = {"command": "eval", "ckpt": args.ckpt, "data": args.data,
            "samples": len(held_out)}
    _echo(meta)
    print(f"auc={report.auc:.6f}")
    print(f"logloss={report.logloss:.6f}")
    values = {"auc": report.auc, "logloss": report.logloss}
    if baseline_auc is not None:
        values["baseline_auc"] = baseline_auc
        values["relaimpr_vs_baseline"] = report.relaimpr_vs_baseline
        print(f"baseline_auc={baseline_auc:.6f}")
        print(f"relaimpr_vs_baseline={report.relaimpr_vs_baseline:.4f}%")
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_table(out_dir / "eval.tsv", ("metric", "value"),
                    list(values.items()), meta)
        write_summary(out_dir / "eval_summary.txt", values, meta)
        print(f"wrote {out_dir / 'eval.tsv'}")
    return 0


def cmd_ablate(args) -> int:
    samples, sizes = _require_dataset(args.data)
    model_cfg, train_cfg = load_run_config(args.config)
    if args.seed is not None:
        model_cfg = replace(model_cfg, seed=args.seed)
        train_cfg = replace(train_cfg, seed=args.seed)
    train_samples, test_samples = _split_for_training(samples)
    meta = {"command": "ablate", "data": args.data,
            "train.seed": train_cfg.seed, "model.seed": model_cfg.seed}
    _echo(meta)
    rows = ablate(model_cfg, sizes, train_samples, test_samples, train_cfg,
                  log=print)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_table(out_dir / "ablation.tsv", ("ablation", "auc"), rows, meta)
    plot_ablation(out_dir / "ablation.png", rows, meta)
    write_summary(out_dir / "ablation_summary.txt",
                  {f"auc.{flag}": score for flag, score in rows}, meta)
    width = max(len(flag) for flag, _ in rows)
    for flag, score in rows:
        print(f"{flag:<{width}}  auc={score:.6f}")
    print(f"wrote {out_dir / 'ablation.tsv'}")
    return 0


def cmd_case_study(args) -> int:
    model = _load_ckpt(args.ckpt, "--ckpt")
    samples, _ = _require_dataset(args.data)
    held_out = _eval_slice(samples)
    result = case_study(model, held_out, top_k=args.topk)
    meta = {"command": "case-study", "ckpt": args.ckpt, "data": args.data,
            "topk": args.topk}
    _echo(meta)
    values: dict[str, object] = {}
    for channel, metric, mean, std in result.rows:
        print(f"{channel} distinct {metric}: mean={mean:.4f} std={std:.4f}")
        values[f"{metric}.{channel}.mean"] = mean
        values[f"{metric}.{channel}.std"] = std
    for metric in ("categories", "brands"):
        pairs = paired_channel_means(result.per_user[metric])
        p = sign_test_greater(pairs)
        values[f"{metric}.sign_test_gul_gt_srp.p"] = p
        values[f"{metric}.sign_test_gul_gt_srp.users"] = len(pairs)
        print(f"sign test (GUL > SRP, {metric}): p={p:.6f} over {len(pairs)} users")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_table(out_dir / "case_study.tsv", ("channel", "metric", "mean", "std"),
                result.rows, meta)
    plot_case_study(out_dir / "case_study.png", result.rows, meta)
    write_summary(out_dir / "case_study_summary.txt", values, meta)
    print(f"wrote {out_dir / 'case_study.tsv'}")
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    try:
        return args.func(args)
    except CliError as exc:
        print(parser.format_usage(), end="", file=sys.stderr)
        print(f"{PROG}: error: {exc}", file=sys.stderr)
        return 2
    except TrainingDiverged as exc:
        print(f"{PROG}: error: {exc}", file=sys.stderr)
        return 1


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
