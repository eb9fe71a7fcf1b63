"""Command-line interface.

Subcommands: ``gen-data``, ``pretrain``, ``finetune``, ``evaluate``,
``gradcheck``.  Exit codes: 0 success, 1 usage/configuration error,
2 data error, 3 wall-clock limit reached.

``TSFM_THREADS`` caps the numeric kernels' internal parallelism; it is applied
before numpy loads, so it must be set in the environment of the process.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_TIME_LIMIT = 3


def _configure_threads():
    threads = os.environ.get("TSFM_THREADS")
    if threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                    "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS"):
            os.environ.setdefault(var, threads)


_configure_threads()

import numpy as np

from .errors import CheckpointError, ConfigError, DataError, ShapeError, WorkbenchError
from . import checkpoint as ckpt_io
from . import data as data_io
from . import reporting
from .cbramod import CBraModConfig, CBraModEncoder
from .mantis import MantisConfig, MantisEncoder
from .metrics import compute_metrics, default_metric_names
from .training import (STATUS_TIME_LIMIT, ClassifierHead, HeadConfig, TrainConfig,
                       _evaluate, fit, pretrain_contrastive, pretrain_mae)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        sys.exit(EXIT_USAGE)


def _load_json(path) -> dict:
    with open(path) as fh:
        return json.load(fh)


def _train_config(args) -> TrainConfig:
    raw = _load_json(args.config) if args.config else {}
    if args.seed is not None:
        raw["seed"] = args.seed      # explicit flag beats the config file
    else:
        raw.setdefault("seed", 0)
    if args.max_hours is not None:
        raw["max_wallclock_hours"] = args.max_hours
    return TrainConfig.from_dict(raw)


def _build_encoder(kind: str, model_config: dict | None, seed: int):
    model_config = model_config or {}
    if kind == "mantis":
        return MantisEncoder(MantisConfig(**model_config), seed=seed)
    if kind == "cbramod":
        return CBraModEncoder(CBraModConfig(**model_config), seed=seed)
    raise ConfigError(f"unknown model {kind!r}")


def _parse_ranges(text: str):
    ranges = []
    for chunk in text.split(","):
        first, _, last = chunk.partition(":")
        if not first or not last:
            raise ConfigError(f"range {chunk!r} must look like firstid:lastid")
        ranges.append((first, last))
    return ranges


def _split_dataset(dataset, args):
    if getattr(args, "split_ranges", None):
        idx = data_io.split_by_subject_ranges(dataset.subjects, _parse_ranges(args.split_ranges))
    else:
        idx = data_io.split_by_subject(dataset.subjects, seed=args.split_seed)
    return idx


def _metric_names(args, n_classes):
    if args.metrics:
        return tuple(name.strip() for name in args.metrics.split(","))
    return default_metric_names(n_classes)


# -- subcommands ---------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    spec = data_io.SynthSpec.from_dict(_load_json(args.spec))
    dataset = data_io.gen_synthetic(spec, args.out)
    print(f"wrote {len(dataset)} samples "
          f"({dataset.manifest.n_channels} ch x {dataset.manifest.series_length} pts, "
          f"{dataset.n_classes} classes, {spec.n_subjects} subjects) to {args.out}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    dataset = data_io.load_dataset(args.data)
    cfg = _train_config(args)
    model_config = _load_json(args.model_config) if args.model_config else None
    encoder = _build_encoder(args.model, model_config, cfg.seed)
    if args.objective == "mae":
        report = pretrain_mae(encoder, dataset.data, cfg)
    else:
        report = pretrain_contrastive(encoder, dataset.data, cfg)
    provenance = {
        "model": encoder.kind,
        "objective": args.objective,
        "encoder_config": _config_dict(encoder.config),
        "config_hash": ckpt_io.config_hash(_config_dict(encoder.config)),
        "seed": cfg.seed,
        "step": report.steps_run,
    }
    ckpt_io.save_checkpoint(args.out, encoder.params, provenance)
    stem = os.path.splitext(args.out)[0]
    reporting.write_pretrain_outputs(report, stem)
    print(f"{args.model}/{args.objective}: {report.steps_run} steps, "
          f"loss {report.initial_loss:.4f} -> {report.final_loss:.4f} ({report.status})")
    return EXIT_TIME_LIMIT if report.status == STATUS_TIME_LIMIT else EXIT_OK


def _config_dict(config) -> dict:
    from dataclasses import asdict
    return asdict(config)


def _head_config(args, in_dim, n_classes) -> HeadConfig:
    hidden = tuple(int(h) for h in args.head_hidden.split(",")) if args.head_hidden else (256, 128)
    return HeadConfig(kind=args.head, in_dim=in_dim, n_classes=n_classes,
                      hidden=hidden, dropout=args.head_dropout)


def cmd_finetune(args) -> int:
    dataset = data_io.load_dataset(args.data)
    idx = _split_dataset(dataset, args)
    model_config = _load_json(args.model_config) if args.model_config else None
    metric_names = _metric_names(args, dataset.n_classes)
    base_cfg = _train_config(args)
    seeds = list(range(args.seeds)) if args.seeds else [base_cfg.seed]

    runs = []
    statuses = []
    for seed in seeds:
        cfg = base_cfg if len(seeds) == 1 else TrainConfig.from_dict(
            {**base_cfg.__dict__, "seed": seed})
        encoder = _build_encoder(args.model, model_config, cfg.seed)
        if args.init != "random":
            encoder.params = ckpt_io.load_into_params(
                encoder.params, ckpt_io.load_checkpoint(args.init))
        head = ClassifierHead(
            _head_config(args, encoder.feature_dim(dataset.manifest.n_channels,
                                                   dataset.manifest.series_length),
                         dataset.n_classes),
            seed=cfg.seed)
        splits = data_io.Splits(dataset, idx)
        report = fit(encoder, head, splits, cfg, metric_names)
        runs.append((cfg.seed, encoder, head, report))
        statuses.append(report.status)
        pct = reporting.metrics_percent(report.test_metrics)
        print(f"seed {cfg.seed}: {report.status} after {report.epochs_run} epochs; "
              + ", ".join(f"{k}={v}" for k, v in pct.items()))

    if len(runs) == 1:
        seed, encoder, head, report = runs[0]
        reporting.write_fit_outputs(report, args.report)
    else:
        payload = {"seeds": [seed for seed, *_ in runs],
                   "runs": [r.to_dict() for _, _, _, r in runs]}
        finite = [r for *_, r in runs if r.status != STATUS_TIME_LIMIT]
        if finite:
            payload["mean_pct"] = {
                name: round(float(np.mean([100 * r.test_metrics[name] for r in finite])), 2)
                for name in metric_names}
            payload["std_pct"] = {
                name: round(float(np.std([100 * r.test_metrics[name] for r in finite])), 2)
                for name in metric_names}
            for name in metric_names:
                values = [r.test_metrics[name] for r in finite]
                print(f"{name}: {reporting.format_mean_std(values)}")
        reporting.write_json(args.report, payload)
        curves = {f"seed {seed}": ([row["epoch"] for row in r.history],
                                   [row["val_loss"] for row in r.history])
                  for seed, _, _, r in runs}
        stem = os.path.splitext(args.report)[0]
        reporting.save_comparison_figure(stem + "_history.png", curves,
                                         "epoch", "val loss", "fine-tuning seeds")
        reporting.write_history_csv(
            stem + "_history.csv",
            [{"seed": seed, **row} for seed, _, _, r in runs for row in r.history],
            fieldnames=["seed", "epoch", "train_loss", "val_loss", "lr", "wallclock_s"])

    if args.out:
        seed, encoder, head, report = runs[-1]
        provenance = {
            "model": encoder.kind,
            "encoder_config": _config_dict(encoder.config),
            "head_config": _config_dict(head.config),
            "config_hash": ckpt_io.config_hash(_config_dict(encoder.config)),
            "seed": seed,
            "step": report.epochs_run,
        }
        ckpt_io.save_checkpoint(args.out, {**encoder.params, **head.params}, provenance)

    if any(s == STATUS_TIME_LIMIT for s in statuses):
        return EXIT_TIME_LIMIT
    return EXIT_OK


def cmd_evaluate(args) -> int:
    ckpt = ckpt_io.load_checkpoint(args.ckpt)
    prov = ckpt.provenance
    if "head_config" not in prov:
        raise ConfigError("checkpoint has no classification head; fine-tune it first")
    encoder = _build_encoder(prov["model"], prov["encoder_config"], seed=0)
    encoder.params = ckpt_io.load_into_params(encoder.params, ckpt)
    head_cfg = HeadConfig(**prov["head_config"])
    head = ClassifierHead(head_cfg, seed=0)
    head.params = ckpt_io.load_into_params(head.params, ckpt)
    print(f"loaded {ckpt.n_tensors} tensors, {ckpt.n_params} parameters "
          f"({prov['model']}, seed {prov.get('seed')}, step {prov.get('step')})")

    dataset = data_io.load_dataset(args.data)
    if args.split == "all":
        data, labels = dataset.data, dataset.labels.astype(np.int64)
    else:
        idx = _split_dataset(dataset, args)
        chosen = {"train": idx[0], "val": idx[1], "test": idx[2]}[args.split]
        data, labels = dataset.data[chosen], dataset.labels[chosen].astype(np.int64)
    metric_names = _metric_names(args, dataset.n_classes)
    loss, preds, scores = _evaluate(encoder, head, data, labels, batch_size=64)
    values = compute_metrics(metric_names, labels, preds, scores)
    pct = reporting.metrics_percent(values)
    print(f"split={args.split} n={len(labels)} loss={loss:.4f}")
    for name in metric_names:
        print(f"{name}: {pct[name]}")
    if args.report:
        reporting.write_json(args.report, {"split": args.split, "n": len(labels),
                                           "loss": loss, "metrics": values,
                                           "metrics_pct": pct})
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradchecks import run_registry
    rows = run_registry(args.module)
    if not rows:
        print(f"no registered checks match {args.module!r}", file=sys.stderr)
        return EXIT_USAGE
    all_ok = True
    for name, err, threshold, ok in rows:
        all_ok &= ok
        print(f"{'PASS' if ok else 'FAIL'} {name}: max_rel_err={err:.3e} (threshold {threshold:g})")
    print(f"gradcheck: {'all checks passed' if all_ok else 'FAILURES detected'}")
    return EXIT_OK if all_ok else EXIT_USAGE


# -- parser --------------------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="tsfm", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset directory")
    p.add_argument("--spec", required=True, help="JSON synthetic-data spec")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(func=cmd_gen_data)

    def add_common(p, with_model=True):
        if with_model:
            p.add_argument("--model", required=True, choices=("mantis", "cbramod"))
            p.add_argument("--model-config", help="JSON file of model config overrides")
        p.add_argument("--data", required=True, help="dataset directory")
        p.add_argument("--config", help="JSON file of training config fields")
        p.add_argument("--seed", type=int, default=None,
                       help="run seed (beats a seed in --config; default 0)")
        p.add_argument("--max-hours", type=float, default=None,
                       help="wall-clock cap in hours (default 5 via config)")

    p = sub.add_parser("pretrain", help="self-supervised pretraining")
    add_common(p)
    p.add_argument("--objective", required=True, choices=("contrastive", "mae"))
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="supervised fine-tuning of encoder + head")
    add_common(p)
    p.add_argument("--init", default="random", help="'random' or a checkpoint path")
    p.add_argument("--head", default="mlp3", choices=("linear_preln", "mlp3"))
    p.add_argument("--head-hidden", help="comma list of mlp3 hidden widths")
    p.add_argument("--head-dropout", type=float, default=0.1)
    p.add_argument("--report", required=True, help="FitReport JSON output path")
    p.add_argument("--out", help="optional fine-tuned checkpoint output path")
    p.add_argument("--seeds", type=int, help="run seeds 0..N-1 and report mean/std")
    p.add_argument("--metrics", help="comma list of metric names")
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--split-ranges", help="three subject-id ranges a:b,c:d,e:f")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("evaluate", help="score a fine-tuned checkpoint on a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--metrics", help="comma list of metric names")
    p.add_argument("--split", default="test", choices=("train", "val", "test", "all"))
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--split-ranges", help="three subject-id ranges a:b,c:d,e:f")
    p.add_argument("--report", help="optional JSON output path")
    p.add_argument("--max-hours", type=float, default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck", help="run registered finite-difference checks")
    p.add_argument("--module", help="restrict to one module or check name")
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ConfigError, ShapeError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except WorkbenchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
