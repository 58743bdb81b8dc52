"""Experiment orchestration: configuration, model assembly, the training
loop, evaluation, multi-seed comparison, and report emission.

A model is the composition `embeddings -> backbone -> dml head`; the harness
owns that assembly plus everything around it (data loading, Adam training
with summed equal-weight task losses, best-epoch selection on the validation
primary metric, and deterministic report files).
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
import time
from dataclasses import dataclass

import numpy as np
import yaml

from . import data as data_mod
from .autodiff import NumericError, Tape
from .backbones import (BACKBONE_KINDS, BackboneConfig, backbone_forward,
                        backbone_param_count, init_backbone_params,
                        make_backbone_config)
from .data import DATASET_KINDS, DatasetSplit, batch_iterator
from .dml import (VARIANTS, DMLConfig, dml_head_forward, dml_param_count,
                  init_dml_params)
from .metrics import (EvalReport, auc, consistency_ratio, mse,
                      one_tailed_t_test, render_report_tsv)
from .nn import (AdamState, EmbeddingTable, ParameterStore, adam_step,
                 embed_and_concat, task_loss)

log = logging.getLogger(__name__)

EVAL_BATCH_SIZE = 4096

# ---------------------------------------------------------------------------
# configuration


_CONFIG_DEFAULTS = {
    "dataset": "synthetic",        # one of data.DATASET_KINDS
    "data_dir": None,              # directory with the raw dataset files
    "cache": None,                 # optional prepared-split npz path
    "backbone": "shared_bottom",   # one of backbones.BACKBONE_KINDS
    "variant": "full",             # one of dml.VARIANTS
    "seeds": (0, 1, 2, 3, 4),
    "epochs": 10,
    "patience": 2,                 # early stopping on the validation primary
    "batch_size": 512,
    "learning_rate": 0.001,
    "eval_every": 1,               # epochs between validation evaluations
    "out_dir": "runs",
    "split_seed": 0,               # data split / augmentation / subsample seed
    "embed_dim": 8,
    "expert_dim": 128,             # backbone output width (= tower input d0)
    "tower_dim": 80,               # tower hidden width d1
    "subsample": 1.0,              # keep this fraction of raw records
    "synthetic_examples": 1000,
}


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated experiment description; build via `config_from_dict`."""

    dataset: str
    data_dir: str | None
    cache: str | None
    backbone: str
    variant: str
    seeds: tuple
    epochs: int
    patience: int
    batch_size: int
    learning_rate: float
    eval_every: int
    out_dir: str
    split_seed: int
    embed_dim: int
    expert_dim: int
    tower_dim: int
    subsample: float
    synthetic_examples: int

    def __post_init__(self):
        if self.dataset not in DATASET_KINDS:
            raise ValueError(f"unknown dataset kind {self.dataset!r}")
        if self.backbone not in BACKBONE_KINDS:
            raise ValueError(f"unknown backbone kind {self.backbone!r}")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown dml variant {self.variant!r}")
        seeds = tuple(int(s) for s in self.seeds)
        if not seeds:
            raise ValueError("seeds must be non-empty")
        if len(set(seeds)) != len(seeds):
            raise ValueError(f"seeds must be distinct, got {list(seeds)}")
        object.__setattr__(self, "seeds", seeds)
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.patience < 0:
            raise ValueError("patience must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not (math.isfinite(self.learning_rate) and self.learning_rate > 0):
            raise ValueError("learning_rate must be positive and finite")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")
        for name in ("embed_dim", "expert_dim", "tower_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not (0.0 < self.subsample <= 1.0):
            raise ValueError("subsample must lie in (0, 1]")
        if self.synthetic_examples < 10:
            raise ValueError("synthetic_examples must be >= 10")

    def replaced(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


def config_from_dict(raw: dict) -> ExperimentConfig:
    """Merge over the defaults, rejecting keys the schema does not declare."""
    unknown = sorted(set(raw) - set(_CONFIG_DEFAULTS))
    if unknown:
        raise ValueError(f"unknown config keys: {', '.join(unknown)}")
    merged = dict(_CONFIG_DEFAULTS)
    merged.update({k: v for k, v in raw.items() if v is not None})
    merged["seeds"] = tuple(merged["seeds"])
    return ExperimentConfig(**merged)


def load_config(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        raw = yaml.safe_load(fh)
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ValueError(f"config {path} must hold a key-value mapping")
    return config_from_dict(raw)


# ---------------------------------------------------------------------------
# dataset acquisition


def _subsample_records(records, fraction, seed):
    if fraction >= 1.0:
        return records
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 1_000_003]))
    keep = rng.choice(len(records), size=round(len(records) * fraction),
                      replace=False)
    return [records[i] for i in sorted(int(k) for k in keep)]


def build_dataset(config: ExperimentConfig):
    """Parse (or generate) the configured corpus and attach labels."""
    kind = config.dataset
    if kind == "synthetic":
        records = data_mod.synthetic_dataset(config.synthetic_examples,
                                             seed=config.split_seed)
        return data_mod.derive_labels(records, kind)
    if config.data_dir is None:
        raise ValueError(f"dataset {kind!r} needs data_dir")
    if kind == "ml1m":
        records = data_mod.parse_movielens(
            os.path.join(config.data_dir, "ratings.dat"),
            os.path.join(config.data_dir, "users.dat"),
            os.path.join(config.data_dir, "movies.dat"))
        records = _subsample_records(records, config.subsample, config.split_seed)
    else:  # electronics: rated items on file, unrated negatives synthesized
        records = data_mod.parse_interactions(
            os.path.join(config.data_dir, "ratings.csv"))
        records = _subsample_records(records, config.subsample, config.split_seed)
        records = data_mod.augment_negatives(records, config.split_seed)
    return data_mod.derive_labels(records, kind)


def load_split_for(config: ExperimentConfig) -> DatasetSplit:
    """Return the train/validation/test split, honoring the cache path."""
    if config.cache and os.path.exists(config.cache):
        split = data_mod.load_split(config.cache)
        if split.dataset.kind != config.dataset:
            raise ValueError(f"cache {config.cache} holds {split.dataset.kind!r}, "
                             f"config wants {config.dataset!r}")
        return split
    split = data_mod.split_dataset(build_dataset(config), config.split_seed)
    if config.cache:
        os.makedirs(os.path.dirname(os.path.abspath(config.cache)), exist_ok=True)
        data_mod.save_split(split, config.cache)
        log.info("cached split at %s", config.cache)
    return split


# ---------------------------------------------------------------------------
# model assembly


@dataclass(frozen=True)
class ModelConfig:
    """Embeddings + backbone + head, fully determined by dataset and config."""

    dataset: str
    fields: tuple     # data.FieldSpec per input field
    tasks: tuple      # data.TaskSpec per task
    backbone: BackboneConfig
    dml: DMLConfig
    embed_dim: int

    def __post_init__(self):
        if self.backbone.num_tasks != len(self.tasks):
            raise ValueError("backbone num_tasks disagrees with the task list")
        if self.dml.num_tasks != len(self.tasks):
            raise ValueError("dml num_tasks disagrees with the task list")
        if self.dml.task_kinds != tuple(t.kind for t in self.tasks):
            raise ValueError("dml task kinds disagree with the task list")
        if self.dml.d0 != self.backbone.expert_dim:
            raise ValueError("dml d0 must equal the backbone output width")
        if self.backbone.in_dim != self.embed_dim * len(self.fields):
            raise ValueError("backbone in_dim must equal embed_dim * num_fields")


def build_model_config(dataset_kind, fields, tasks, backbone_kind, variant,
                       embed_dim=8, expert_dim=128, tower_dim=80) -> ModelConfig:
    fields = tuple(fields)
    tasks = tuple(tasks)
    in_dim = embed_dim * len(fields)
    backbone = make_backbone_config(backbone_kind, len(tasks), in_dim, expert_dim)
    dml = DMLConfig(variant, tuple(t.kind for t in tasks),
                    d0=expert_dim, d1=tower_dim)
    return ModelConfig(dataset_kind, fields, tasks, backbone, dml, embed_dim)


def model_config_for(config: ExperimentConfig, split: DatasetSplit) -> ModelConfig:
    return build_model_config(split.dataset.kind, split.fields, split.tasks,
                              config.backbone, config.variant,
                              embed_dim=config.embed_dim,
                              expert_dim=config.expert_dim,
                              tower_dim=config.tower_dim)


def _embedding_tables(mc: ModelConfig):
    """One table list per task for the single-task backbone (fully private
    encoders), one shared list otherwise."""
    def tables(prefix):
        return tuple(EmbeddingTable(f"{prefix}{f.name}", f.vocab_size, mc.embed_dim)
                     for f in mc.fields)
    if mc.backbone.kind == "single_task":
        return tuple(tables(f"embed/task{k}/") for k in range(len(mc.tasks)))
    return tables("embed/")


def init_model_params(store: ParameterStore, mc: ModelConfig) -> None:
    tables = _embedding_tables(mc)
    groups = tables if mc.backbone.kind == "single_task" else (tables,)
    for group in groups:
        for table in group:
            store.add_embedding(table.name, table.vocab_size, table.dim)
    init_backbone_params(store, mc.backbone)
    init_dml_params(store, mc.dml)


def analytic_param_count(mc: ModelConfig) -> int:
    """Closed-form count of every scalar `init_model_params` registers."""
    emb = sum(f.vocab_size * mc.embed_dim for f in mc.fields)
    if mc.backbone.kind == "single_task":
        emb *= len(mc.tasks)
    return emb + backbone_param_count(mc.backbone) + dml_param_count(mc.dml)


def model_forward(tape: Tape, store: ParameterStore, mc: ModelConfig,
                  batch) -> list:
    """Per-task prediction nodes ([B x 1] each) for one batch."""
    tables = _embedding_tables(mc)

    def encode(group):
        return embed_and_concat(
            tape, store, [(t, batch.features[f.name])
                          for t, f in zip(group, mc.fields)])

    if mc.backbone.kind == "single_task":
        reps = backbone_forward(tape, store, mc.backbone,
                                [encode(group) for group in tables])
    else:
        reps = backbone_forward(tape, store, mc.backbone, encode(tables))
    return dml_head_forward(tape, store, mc.dml, reps)


def training_loss(tape: Tape, mc: ModelConfig, preds, labels) -> int:
    """Sum of mean-reduced per-task losses, each weighted 1.0."""
    total = None
    for k, task in enumerate(mc.tasks):
        kind = ("binary_cross_entropy" if task.kind == "classification"
                else "squared_error")
        term = task_loss(tape, kind, preds[k], labels[:, k])
        total = term if total is None else tape.add(total, term)
    return total


# ---------------------------------------------------------------------------
# evaluation


def predict(store: ParameterStore, mc: ModelConfig, block,
            batch_size: int = EVAL_BATCH_SIZE):
    """Per-task prediction vectors over `block`, in example order."""
    preds = [[] for _ in mc.tasks]
    for batch in batch_iterator(block, batch_size=batch_size, shuffle=False):
        tape = Tape()
        nodes = model_forward(tape, store, mc, batch)
        for k, nid in enumerate(nodes):
            preds[k].append(tape.value(nid)[:, 0])
    return [np.concatenate(chunks) for chunks in preds]


def evaluate(store: ParameterStore, mc: ModelConfig, block,
             batch_size: int = EVAL_BATCH_SIZE) -> dict:
    """AUC per classification task, MSE per regression task, and — when both
    kinds are present — the cross-task consistency ratio (classification
    scores vs. regression predictions, grouped by the true rating)."""
    preds = predict(store, mc, block, batch_size=batch_size)
    labels = block.labels
    metrics = {}
    for k, task in enumerate(mc.tasks):
        if task.kind == "classification":
            metrics[f"auc/{task.name}"] = float(auc(preds[k], labels[:, k]))
        else:
            metrics[f"mse/{task.name}"] = float(mse(preds[k], labels[:, k]))
    cls = next((k for k, t in enumerate(mc.tasks) if t.kind == "classification"), None)
    reg = next((k for k, t in enumerate(mc.tasks) if t.kind == "regression"), None)
    if cls is not None and reg is not None:
        metrics["consistency"] = float(consistency_ratio(labels[:, reg],
                                                         preds[cls], preds[reg]))
    return metrics


def validation_primary(metrics: dict, tasks) -> tuple:
    """(mean classification AUC, -mean regression MSE); larger is better.
    A dataset without classification tasks orders on -MSE alone."""
    aucs = [metrics[f"auc/{t.name}"] for t in tasks if t.kind == "classification"]
    mses = [metrics[f"mse/{t.name}"] for t in tasks if t.kind == "regression"]
    neg_mse = -sum(mses) / len(mses) if mses else 0.0
    if aucs:
        return (sum(aucs) / len(aucs), neg_mse)
    return (neg_mse, 0.0)


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class RunArtifact:
    """Outcome of one seed's run; `diverged` runs carry the diagnostic in
    `error` and no report/checkpoint.  `timings` (wall-clock seconds) never
    enter report files."""

    dataset: str
    backbone: str
    variant: str
    seed: int
    diverged: bool
    report: EvalReport | None
    checkpoint: str | None
    curve: tuple
    best_epoch: int | None
    param_count: int
    timings: dict
    error: str | None = None


def _checkpoint_path(out_dir, config, seed):
    name = f"{config.dataset}_{config.backbone}_{config.variant}_seed{seed}.npz"
    return os.path.join(out_dir, name)


def _run_one_seed(config: ExperimentConfig, mc: ModelConfig,
                  split: DatasetSplit, seed: int) -> RunArtifact:
    t_start = time.perf_counter()
    store = ParameterStore(seed=seed)
    init_model_params(store, mc)
    param_count = store.total_count()
    adam = AdamState(lr=config.learning_rate)

    curve = []
    best_store = None
    best_primary = None
    best_epoch = None
    stale = 0
    train_seconds = 0.0

    def fail(exc):
        log.warning("seed %d diverged: %s", seed, exc)
        return RunArtifact(
            dataset=config.dataset, backbone=config.backbone,
            variant=config.variant, seed=seed, diverged=True, report=None,
            checkpoint=None, curve=tuple(curve), best_epoch=None,
            param_count=param_count,
            timings={"total_s": time.perf_counter() - t_start}, error=str(exc))

    try:
        for epoch in range(config.epochs):
            t_epoch = time.perf_counter()
            batch_losses = []
            for batch in batch_iterator(split.train, config.batch_size,
                                        seed=seed, epoch=epoch):
                tape = Tape()
                preds = model_forward(tape, store, mc, batch)
                loss = training_loss(tape, mc, preds, batch.labels)
                grads = tape.param_grads(tape.backward(loss))
                adam_step(adam, store, grads)
                batch_losses.append(tape.value(loss).item())
            train_seconds += time.perf_counter() - t_epoch

            last = epoch == config.epochs - 1
            if (epoch + 1) % config.eval_every and not last:
                continue
            val_metrics = evaluate(store, mc, split.validation)
            primary = validation_primary(val_metrics, mc.tasks)
            entry = {"epoch": epoch,
                     "train_loss": sum(batch_losses) / len(batch_losses),
                     "train_loss_first_batch": batch_losses[0],
                     "train_loss_last_batch": batch_losses[-1],
                     "val_primary": primary[0], "val_tiebreak": primary[1]}
            entry.update({f"val_{k}": v for k, v in val_metrics.items()})
            curve.append(entry)
            log.info("seed %d epoch %d: train loss %.5f, validation primary %.5f",
                     seed, epoch, entry["train_loss"], primary[0])
            if best_primary is None or primary > best_primary:
                best_primary, best_epoch, stale = primary, epoch, 0
                best_store = store.copy()
            else:
                stale += 1
                if stale >= config.patience:
                    log.info("seed %d: stopping early at epoch %d", seed, epoch)
                    break
    except NumericError as exc:
        return fail(exc)

    optimum = max((e["val_primary"], e["val_tiebreak"]) for e in curve)
    if optimum != best_primary:
        raise RuntimeError("best checkpoint does not sit at the curve optimum")

    t_eval = time.perf_counter()
    test_metrics = evaluate(best_store, mc, split.test)
    report = EvalReport(dataset=config.dataset, backbone=config.backbone,
                        variant=config.variant, seed=seed,
                        example_count=len(split.test), metrics=test_metrics)
    os.makedirs(config.out_dir, exist_ok=True)
    checkpoint = _checkpoint_path(config.out_dir, config, seed)
    best_store.save(checkpoint)
    now = time.perf_counter()
    timings = {"train_s": train_seconds, "test_eval_s": now - t_eval,
               "total_s": now - t_start}
    return RunArtifact(
        dataset=config.dataset, backbone=config.backbone, variant=config.variant,
        seed=seed, diverged=False, report=report, checkpoint=checkpoint,
        curve=tuple(curve), best_epoch=best_epoch, param_count=param_count,
        timings=timings)


def run_experiment(config: ExperimentConfig,
                   split: DatasetSplit | None = None) -> list:
    """Train and evaluate one model per seed; deterministic per seed."""
    if split is None:
        split = load_split_for(config)
    if split.dataset.kind != config.dataset:
        raise ValueError(f"split holds {split.dataset.kind!r}, "
                         f"config wants {config.dataset!r}")
    mc = model_config_for(config, split)
    log.info("running %s/%s/%s on %s: %d seeds, %d trainable parameters",
             config.dataset, config.backbone, config.variant,
             f"{len(split.train)}+{len(split.validation)}+{len(split.test)} examples",
             len(config.seeds), analytic_param_count(mc))
    return [_run_one_seed(config, mc, split, seed) for seed in config.seeds]


# ---------------------------------------------------------------------------
# artifact persistence


def save_artifacts(artifacts, path) -> None:
    payload = []
    for a in artifacts:
        record = dataclasses.asdict(a)
        record["curve"] = list(a.curve)
        payload.append(record)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_artifacts(path) -> list:
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    out = []
    for record in payload:
        report = record.pop("report")
        if report is not None:
            report = EvalReport(**report)
        record["curve"] = tuple(record["curve"])
        out.append(RunArtifact(report=report, **record))
    return out


# ---------------------------------------------------------------------------
# comparison


@dataclass(frozen=True)
class Comparison:
    metric: str
    direction: str
    base_mean: float
    treat_mean: float
    delta: float
    p_value: float
    significant: bool


def compare(base_reports, treat_reports, metric: str,
            direction: str = "greater", alpha: float = 0.05) -> Comparison:
    """Welch one-tailed comparison of a metric across two report sets."""
    base_reports = list(base_reports)
    treat_reports = list(treat_reports)
    datasets = {r.dataset for r in base_reports + treat_reports}
    if len(datasets) != 1:
        raise ValueError(f"reports span several datasets: {sorted(datasets)}")
    missing = [r for r in base_reports + treat_reports if metric not in r.metrics]
    if missing:
        raise ValueError(f"metric {metric!r} missing from some reports")
    base = [r.metrics[metric] for r in base_reports]
    treat = [r.metrics[metric] for r in treat_reports]
    p = one_tailed_t_test(base, treat, direction=direction)
    base_mean = sum(base) / len(base)
    treat_mean = sum(treat) / len(treat)
    return Comparison(metric=metric, direction=direction, base_mean=base_mean,
                      treat_mean=treat_mean, delta=treat_mean - base_mean,
                      p_value=p, significant=p < alpha)


# ---------------------------------------------------------------------------
# report emission


_DISPLAY_VARIANTS = ("none", "full", "ctfm_only", "gkd_only", "v0")


def _row_key(dataset, backbone, variant):
    return (dataset, BACKBONE_KINDS.index(backbone),
            _DISPLAY_VARIANTS.index(variant))


def _sorted_artifacts(artifacts):
    return sorted(artifacts, key=lambda a: _row_key(a.dataset, a.backbone,
                                                    a.variant) + (a.seed,))


def _render_curves_tsv(artifacts) -> str:
    metric_keys = sorted({k for a in artifacts for e in a.curve for k in e}
                         - {"epoch", "train_loss", "train_loss_first_batch",
                            "train_loss_last_batch", "val_primary",
                            "val_tiebreak"})
    fixed = ("dataset", "backbone", "variant", "seed", "epoch", "train_loss",
             "train_loss_first_batch", "train_loss_last_batch", "val_primary",
             "val_tiebreak")
    lines = ["\t".join(fixed + tuple(metric_keys))]
    for a in artifacts:
        for e in a.curve:
            row = [a.dataset, a.backbone, a.variant, str(a.seed),
                   str(e["epoch"])]
            row += [repr(float(e[k])) for k in fixed[5:]]
            row += [repr(float(e[k])) if k in e else "" for k in metric_keys]
            lines.append("\t".join(row))
    return "\n".join(lines) + "\n"


def _render_table(artifacts) -> str:
    """Mean ± std per (dataset, backbone, variant) group, one row each."""
    groups = {}
    for a in artifacts:
        groups.setdefault((a.dataset, a.backbone, a.variant), []).append(a)
    keys = sorted(groups, key=lambda k: _row_key(*k))
    metric_names = sorted({m for a in artifacts if a.report
                           for m in a.report.metrics})
    header = ["dataset", "backbone", "variant", "seeds", "params"] + metric_names
    rows = []
    for key in keys:
        members = groups[key]
        reports = [a.report for a in members if a.report is not None]
        row = [key[0], key[1], key[2], str(len(members)),
               str(members[0].param_count)]
        for name in metric_names:
            values = [r.metrics[name] for r in reports if name in r.metrics]
            if not values:
                row.append("-")
                continue
            mean = sum(values) / len(values)
            std = (math.sqrt(sum((v - mean) ** 2 for v in values)
                             / (len(values) - 1)) if len(values) > 1 else 0.0)
            row.append(f"{mean:.4f} ± {std:.4f}")
        rows.append(row)
    widths = [max(len(header[i]), *(len(r[i]) for r in rows)) if rows
              else len(header[i]) for i in range(len(header))]
    def fmt(cells):
        return "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()
    lines = [fmt(header), fmt(["-" * w for w in widths])]
    lines += [fmt(r) for r in rows]
    return "\n".join(lines) + "\n"


def emit_report(artifacts, out_dir, figures: bool = True) -> dict:
    """Write runs.tsv / curves.tsv / table.txt (and figures) under `out_dir`.

    Emission is a pure function of the artifacts, so re-emitting saved
    artifacts reproduces every text file byte for byte.
    """
    artifacts = _sorted_artifacts(artifacts)
    if not artifacts:
        raise ValueError("need at least one artifact")
    os.makedirs(out_dir, exist_ok=True)
    paths = {}

    done = [a for a in artifacts if not a.diverged]
    reports = [a.report for a in done]
    paths["runs"] = os.path.join(out_dir, "runs.tsv")
    with open(paths["runs"], "w", encoding="utf-8") as fh:
        fh.write(render_report_tsv(reports))
    paths["curves"] = os.path.join(out_dir, "curves.tsv")
    with open(paths["curves"], "w", encoding="utf-8") as fh:
        fh.write(_render_curves_tsv(done))
    paths["table"] = os.path.join(out_dir, "table.txt")
    with open(paths["table"], "w", encoding="utf-8") as fh:
        fh.write(_render_table(artifacts))

    failed = [a for a in artifacts if a.diverged]
    if failed:
        paths["diverged"] = os.path.join(out_dir, "diverged.tsv")
        with open(paths["diverged"], "w", encoding="utf-8") as fh:
            fh.write("dataset\tbackbone\tvariant\tseed\terror\n")
            for a in failed:
                fh.write(f"{a.dataset}\t{a.backbone}\t{a.variant}\t{a.seed}\t"
                         f"{a.error}\n")

    if figures:
        from . import plots
        if any(a.curve for a in done):
            paths["curves_figure"] = os.path.join(out_dir, "curves.png")
            plots.plot_training_curves(done, paths["curves_figure"])
        if reports:
            paths["metrics_figure"] = os.path.join(out_dir, "metrics.png")
            plots.plot_metric_bars(reports, paths["metrics_figure"])
    return paths
