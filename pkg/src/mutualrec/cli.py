"""Command-line interface: data preparation, training, comparison, report
re-emission, and the gradient audit suites."""

from __future__ import annotations

import argparse
import logging
import os
import sys

from . import audit, data as data_mod, harness
from .backbones import BACKBONE_KINDS
from .data import DATASET_KINDS
from .dml import VARIANTS
from .metrics import parse_report_tsv

log = logging.getLogger(__name__)


def _config_from_args(args) -> harness.ExperimentConfig:
    config = (harness.load_config(args.config) if args.config
              else harness.config_from_dict({}))
    overrides = {}
    for flag, key in (("dataset", "dataset"), ("backbone", "backbone"),
                      ("variant", "variant"), ("data_dir", "data_dir"),
                      ("out", "out_dir")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    if getattr(args, "seeds", None):
        overrides["seeds"] = tuple(int(s) for s in args.seeds.split(","))
    elif getattr(args, "seed", None) is not None:
        overrides["seeds"] = (args.seed,)
    return config.replaced(**overrides) if overrides else config


def cmd_prepare_data(args) -> int:
    config = _config_from_args(args)
    if args.seed is not None:
        config = config.replaced(split_seed=args.seed)
    cache = args.out or config.cache
    if not cache:
        print("prepare-data needs --out (or `cache` in the config) "
              "for the split file", file=sys.stderr)
        return 2
    split = data_mod.split_dataset(harness.build_dataset(config),
                                   config.split_seed)
    parent = os.path.dirname(os.path.abspath(cache))
    os.makedirs(parent, exist_ok=True)
    data_mod.save_split(split, cache)
    print(f"dataset {split.dataset.kind}: {len(split.dataset.examples)} examples "
          f"({len(split.train)} train / {len(split.validation)} validation / "
          f"{len(split.test)} test), split seed {config.split_seed}")
    print("fields: " + ", ".join(
        f"{f.name}[{f.vocab_size}]{'*' if f.multi else ''}"
        for f in split.fields))
    print("tasks: " + ", ".join(f"{t.name} ({t.kind})" for t in split.tasks))
    print(f"wrote {cache}")
    return 0


def cmd_train(args) -> int:
    config = _config_from_args(args)
    artifacts = harness.run_experiment(config)
    os.makedirs(config.out_dir, exist_ok=True)
    harness.save_artifacts(artifacts,
                           os.path.join(config.out_dir, "artifacts.json"))
    paths = harness.emit_report(artifacts, config.out_dir)
    for a in artifacts:
        if a.diverged:
            print(f"seed {a.seed}: DIVERGED ({a.error})")
        else:
            shown = ", ".join(f"{k}={v:.4f}"
                              for k, v in sorted(a.report.metrics.items()))
            print(f"seed {a.seed}: best epoch {a.best_epoch}, {shown}")
    with open(paths["table"], encoding="utf-8") as fh:
        print(fh.read(), end="")
    for name in sorted(paths):
        print(f"wrote {paths[name]}")
    return 1 if all(a.diverged for a in artifacts) else 0


def _load_reports(path):
    if os.path.isdir(path):
        path = os.path.join(path, "runs.tsv")
    with open(path, encoding="utf-8") as fh:
        return parse_report_tsv(fh.read())


def _inferred_direction(metric: str) -> str:
    return "smaller" if metric.startswith("mse") else "greater"


def cmd_compare(args) -> int:
    base = _load_reports(args.base)
    treat = _load_reports(args.treat)
    if args.metric:
        pairs = [(args.metric, args.direction
                  or _inferred_direction(args.metric))]
    else:
        common = (set.intersection(*(set(r.metrics) for r in base + treat))
                  if base + treat else set())
        pairs = [(m, _inferred_direction(m)) for m in sorted(common)]
        if not pairs:
            print("no metric shared by every report", file=sys.stderr)
            return 2
    for metric, direction in pairs:
        c = harness.compare(base, treat, metric, direction=direction)
        verdict = "significant" if c.significant else "not significant"
        print(f"{c.metric} ({c.direction}): base {c.base_mean:.4f} (n={len(base)}), "
              f"treat {c.treat_mean:.4f} (n={len(treat)}), delta {c.delta:+.4f}, "
              f"p={c.p_value:.4g} -> {verdict} at 0.05")
    return 0


def cmd_report(args) -> int:
    out_dir = args.out
    artifacts_path = os.path.join(out_dir, "artifacts.json")
    if not os.path.exists(artifacts_path):
        print(f"no artifacts.json under {out_dir}", file=sys.stderr)
        return 2
    artifacts = harness.load_artifacts(artifacts_path)
    paths = harness.emit_report(artifacts, out_dir)
    for name in sorted(paths):
        print(f"wrote {paths[name]}")
    return 0


def cmd_grad_audit(args) -> int:
    results = audit.run_all(backbone=args.backbone, variant=args.variant,
                            eps=args.eps)
    print(audit.render_results(results), end="")
    return 0 if all(r.passed for r in results) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mutualrec",
        description="Multi-task recommender experiments with cross-task "
                    "feature mining and distillation heads.")
    sub = parser.add_subparsers(dest="command", required=True)

    prep = sub.add_parser("prepare-data",
                          help="parse/generate a dataset and cache its split")
    prep.add_argument("--config", help="YAML experiment config")
    prep.add_argument("--dataset", choices=DATASET_KINDS)
    prep.add_argument("--data-dir", dest="data_dir",
                      help="directory with the raw dataset files")
    prep.add_argument("--seed", type=int, help="split seed override")
    prep.add_argument("--out", help="destination npz path for the split")
    prep.set_defaults(func=cmd_prepare_data)

    train = sub.add_parser("train", help="train and evaluate over the "
                                         "configured seeds")
    train.add_argument("--config", help="YAML experiment config")
    train.add_argument("--dataset", choices=DATASET_KINDS)
    train.add_argument("--data-dir", dest="data_dir")
    train.add_argument("--backbone", choices=BACKBONE_KINDS)
    train.add_argument("--variant", choices=VARIANTS)
    train.add_argument("--seed", type=int, help="train a single seed")
    train.add_argument("--seeds", help="comma-separated seed list")
    train.add_argument("--out", help="output directory")
    train.set_defaults(func=cmd_train)

    comp = sub.add_parser("compare", help="one-tailed comparison of two "
                                          "report sets")
    comp.add_argument("base", help="runs.tsv (or its directory) for the baseline")
    comp.add_argument("treat", help="runs.tsv (or its directory) for the treatment")
    comp.add_argument("--metric", help="metric name; all shared metrics if omitted")
    comp.add_argument("--direction", choices=("greater", "smaller"),
                      help="improvement direction (inferred when omitted)")
    comp.set_defaults(func=cmd_compare)

    rep = sub.add_parser("report", help="re-emit reports from saved artifacts")
    rep.add_argument("--out", required=True,
                     help="directory holding artifacts.json")
    rep.set_defaults(func=cmd_report)

    aud = sub.add_parser("grad-audit", help="finite-difference, isolation "
                                            "and accounting audits")
    aud.add_argument("--backbone", choices=BACKBONE_KINDS,
                     help="restrict the model audit to one backbone")
    aud.add_argument("--variant", choices=VARIANTS,
                     help="restrict the model audit to one head variant")
    aud.add_argument("--eps", type=float, default=1e-5,
                     help="finite-difference step")
    aud.set_defaults(func=cmd_grad_audit)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
