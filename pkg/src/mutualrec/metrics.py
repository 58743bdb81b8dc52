"""Offline evaluation: AUC, MSE, pairwise prediction consistency, and
multi-run significance testing, plus the per-run report record.

All metric functions are pure and deterministic (the consistency ratio's
pair sampling is keyed by an explicit seed), so evaluation can run in
parallel across training runs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats


class UndefinedMetricError(Exception):
    """The metric does not exist for this input (e.g. single-class AUC)."""


def auc(scores, labels) -> float:
    """Probability that a random positive outranks a random negative.

    Computed from average ranks in O(n log n); ties contribute 1/2, which
    makes the result exactly equal to brute-force pair counting.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError("scores and labels must be equal-length 1-d sequences")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be binary")
    num_pos = int(np.count_nonzero(y == 1))
    num_neg = y.size - num_pos
    if num_pos == 0 or num_neg == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative")
    ranks = stats.rankdata(s)  # average ranks; half-integers are exact
    rank_sum = float(ranks[y == 1].sum())
    return (rank_sum - num_pos * (num_pos + 1) / 2) / (num_pos * num_neg)


def mse(preds, targets) -> float:
    """Mean squared difference; summed with fsum so the result is the
    correctly rounded mean."""
    p = np.asarray(preds, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {t.shape}")
    if p.size == 0:
        raise ValueError("mse of an empty sequence")
    return math.fsum(((p - t) ** 2).tolist()) / p.size


def consistency_ratio(ratings, pred1, pred2, max_pairs: int = 1_000_000,
                      seed: int = 0) -> float:
    """Fraction of differing-rating pairs that both prediction lists order
    the same way the ratings do.

    A pair (i, j) with rating_i != rating_j is consistent iff
    sign(pred1_i - pred1_j) and sign(pred2_i - pred2_j) both equal
    sign(rating_i - rating_j); a prediction tie (sign 0) is never
    consistent.  All eligible pairs are enumerated when their count is at
    most `max_pairs`; beyond that, `max_pairs` distinct pairs are sampled
    uniformly without replacement, deterministically per `seed`.
    """
    r = np.asarray(ratings)
    p1 = np.asarray(pred1, dtype=np.float64)
    p2 = np.asarray(pred2, dtype=np.float64)
    if not (r.shape == p1.shape == p2.shape and r.ndim == 1):
        raise ValueError("ratings and both prediction lists must have equal length")
    if r.size < 2:
        raise UndefinedMetricError("need at least two examples")

    values = np.unique(r)
    groups = [np.flatnonzero(r == v) for v in values]
    eligible = 0
    for a in range(len(values)):
        for b in range(a + 1, len(values)):
            eligible += groups[a].size * groups[b].size
    if eligible == 0:
        raise UndefinedMetricError("no pair with differing ratings")

    if eligible <= max_pairs:
        consistent = 0
        for a in range(len(values)):
            for b in range(a + 1, len(values)):
                gi, gj = groups[a], groups[b]
                sign = np.sign(values[a] - values[b])  # < 0: values sorted
                d1 = np.sign(p1[gi][:, None] - p1[gj][None, :])
                d2 = np.sign(p2[gi][:, None] - p2[gj][None, :])
                consistent += int(np.count_nonzero((d1 == sign) & (d2 == sign)))
        return consistent / eligible

    lo, hi = _sample_pairs(r, max_pairs, seed)
    sign = np.sign(r[lo].astype(np.int64) - r[hi].astype(np.int64))
    ok1 = np.sign(p1[lo] - p1[hi]) == sign
    ok2 = np.sign(p2[lo] - p2[hi]) == sign
    return int(np.count_nonzero(ok1 & ok2)) / lo.size


def _sample_pairs(r, max_pairs, seed):
    """Uniform distinct index pairs with differing ratings (vectorized
    rejection sampling with first-occurrence dedup)."""
    n = r.size
    rng = np.random.default_rng(np.random.SeedSequence([int(seed)]))
    keys = np.zeros(0, dtype=np.int64)
    for _ in range(64):
        want = max_pairs - keys.size
        if want <= 0:
            break
        m = int(want * 1.25) + 64
        a = rng.integers(n, size=m)
        b = rng.integers(n, size=m)
        lo = np.minimum(a, b)
        hi = np.maximum(a, b)
        valid = (lo != hi) & (r[lo] != r[hi])
        fresh = lo[valid].astype(np.int64) * n + hi[valid]
        merged = np.concatenate([keys, fresh])
        _, first = np.unique(merged, return_index=True)
        keys = merged[np.sort(first)]  # draw order, duplicates dropped
    keys = keys[:max_pairs]
    return keys // n, keys % n


def one_tailed_t_test(base_runs, treat_runs, direction: str = "greater") -> float:
    """Welch's unequal-variance one-tailed test.

    `direction` states how the treatment is supposed to improve on the
    baseline: "greater" (e.g. AUC) or "smaller" (e.g. MSE).  Returns the
    p-value for that alternative.  Degenerate zero-variance inputs resolve
    to 0.5 (equal means) or 0/1 (separated in/against the stated direction).
    """
    if direction not in ("greater", "smaller"):
        raise ValueError(f"direction must be 'greater' or 'smaller', got {direction!r}")
    a = np.asarray(base_runs, dtype=np.float64)
    b = np.asarray(treat_runs, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise ValueError("need at least two runs per side")
    var_a = a.var(ddof=1)
    var_b = b.var(ddof=1)
    if var_a == 0.0 and var_b == 0.0:
        if a.mean() == b.mean():
            return 0.5
        improved = b.mean() > a.mean() if direction == "greater" else b.mean() < a.mean()
        return 0.0 if improved else 1.0
    se2 = var_a / a.size + var_b / b.size
    tstat = (b.mean() - a.mean()) / math.sqrt(se2)
    df = se2 ** 2 / ((var_a / a.size) ** 2 / (a.size - 1)
                     + (var_b / b.size) ** 2 / (b.size - 1))
    if direction == "smaller":
        tstat = -tstat
    return float(stats.t.sf(tstat, df))


# ---------------------------------------------------------------------------
# per-run report records


@dataclass(frozen=True)
class EvalReport:
    """Flat per-run evaluation record.

    `metrics` maps metric name (e.g. "auc/positive", "mse/rating",
    "consistency") to its value.
    """

    dataset: str
    backbone: str
    variant: str
    seed: int
    example_count: int
    metrics: dict


REPORT_FIXED_COLUMNS = ("dataset", "backbone", "variant", "seed", "example_count")


def render_report_tsv(reports) -> str:
    """One tab-separated line per run.

    Field order is stable: the fixed columns above, then metric names in
    sorted order.  Floats are serialized with repr for a lossless
    round-trip; a metric absent from some run renders as an empty cell.
    """
    reports = list(reports)
    names = sorted({k for r in reports for k in r.metrics})
    lines = ["\t".join(REPORT_FIXED_COLUMNS + tuple(names))]
    for r in reports:
        row = [r.dataset, r.backbone, r.variant, str(r.seed), str(r.example_count)]
        row += [repr(float(r.metrics[k])) if k in r.metrics else "" for k in names]
        lines.append("\t".join(row))
    return "\n".join(lines) + "\n"


def parse_report_tsv(text: str):
    """Inverse of render_report_tsv."""
    lines = [ln for ln in text.splitlines() if ln]
    header = lines[0].split("\t")
    if tuple(header[:len(REPORT_FIXED_COLUMNS)]) != REPORT_FIXED_COLUMNS:
        raise ValueError("unrecognized report header")
    metric_names = header[len(REPORT_FIXED_COLUMNS):]
    out = []
    for line in lines[1:]:
        cells = line.split("\t")
        fixed = cells[:len(REPORT_FIXED_COLUMNS)]
        metrics = {name: float(cell)
                   for name, cell in zip(metric_names, cells[len(REPORT_FIXED_COLUMNS):])
                   if cell != ""}
        out.append(EvalReport(dataset=fixed[0], backbone=fixed[1], variant=fixed[2],
                              seed=int(fixed[3]), example_count=int(fixed[4]),
                              metrics=metrics))
    return out
