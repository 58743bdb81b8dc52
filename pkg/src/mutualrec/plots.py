"""Figure rendering for experiment artifacts (headless PNG output)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)


def _run_label(artifact) -> str:
    return f"{artifact.backbone}/{artifact.variant} seed {artifact.seed}"


def plot_training_curves(artifacts, path) -> None:
    """Training loss and validation primary metric per epoch, one line per run."""
    artifacts = [a for a in artifacts if a.curve]
    fig, (ax_loss, ax_val) = plt.subplots(1, 2, figsize=(11, 4))
    for a in artifacts:
        epochs = [e["epoch"] for e in a.curve]
        ax_loss.plot(epochs, [e["train_loss"] for e in a.curve],
                     marker="o", markersize=3, label=_run_label(a))
        ax_val.plot(epochs, [e["val_primary"] for e in a.curve],
                    marker="o", markersize=3, label=_run_label(a))
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("training loss")
    ax_loss.set_title("training loss")
    ax_val.set_xlabel("epoch")
    ax_val.set_ylabel("validation primary metric")
    ax_val.set_title("validation primary metric")
    if artifacts and len(artifacts) <= 12:
        ax_val.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_metric_bars(reports, path) -> None:
    """Mean of each metric per (dataset, backbone, variant) group, with a
    sample-std error bar when a group holds several seeds."""
    groups: dict = {}
    for r in reports:
        groups.setdefault((r.dataset, r.backbone, r.variant), []).append(r)
    labels = sorted(groups)
    metric_names = sorted({m for r in reports for m in r.metrics})
    fig, axes = plt.subplots(1, max(len(metric_names), 1),
                             figsize=(4.0 * max(len(metric_names), 1), 4),
                             squeeze=False)
    for ax, name in zip(axes[0], metric_names):
        means, stds = [], []
        for key in labels:
            values = [r.metrics[name] for r in groups[key] if name in r.metrics]
            if values:
                mean = sum(values) / len(values)
                var = (sum((v - mean) ** 2 for v in values) / (len(values) - 1)
                       if len(values) > 1 else 0.0)
                means.append(mean)
                stds.append(var ** 0.5)
            else:
                means.append(0.0)
                stds.append(0.0)
        xs = range(len(labels))
        ax.bar(xs, means, yerr=stds, capsize=3)
        ax.set_xticks(list(xs))
        ax.set_xticklabels([f"{b}\n{v}" for _, b, v in labels],
                           fontsize=7, rotation=45, ha="right")
        ax.set_title(name)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
