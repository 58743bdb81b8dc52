"""Mutual-learning head: cross-task attention at the tower entry and
distilled global knowledge at the tower exit.

The head sits between a backbone's per-task representations l^k (width d0)
and the per-task predictions, and has two cooperating pieces:

* Cross-task feature mining (CTFM).  Each task row is shifted by a trainable
  task embedding, O_k = l^k + t_k, then every task attends over all tasks
  with shared projections W_q, W_k, W_v and a scaled-dot softmax; a residual
  add keeps the own-task signal.  When gradient blocking is on, the key and
  value branches read stop_gradient(O_j): reverse-mode gradients of any
  task-k output with respect to l^j (j != k) are then exactly zero, so one
  task's loss can never push another task's representation around — other
  tasks' features are consumed, never trained through.

* Global knowledge distillation (GKD).  After the per-task hidden towers
  produce h^k (width d1), a per-task distillation MLP reads the blocked
  concatenation of all h's to form global knowledge GK^k, a sigmoid gate
  driven by (GK^k, h^k) weighs it, and an output layer maps
  (GK^k * gate, h^k) to the prediction.

Ablation variants wire these pieces differently; see `dml_head_forward`.

Parameter names: ``dml/ctfm/{t_<k>,Wq,Wk,Wv}``, ``dml/tower/<k>/...``,
``dml/gkd/<k>/{distill,gate,out}/...``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import ShapeError, Tape
from .nn import MLPSpec, ParameterStore, init_mlp_params, mlp_forward, mlp_param_count, rng_for

VARIANTS = ("full", "ctfm_only", "gkd_only", "v0", "none")
TASK_KINDS = ("classification", "regression")

# variants in which each wiring piece participates
_CTFM_VARIANTS = ("full", "ctfm_only", "v0")
_GKD_VARIANTS = ("full", "gkd_only", "v0")


@dataclass(frozen=True)
class DMLConfig:
    """Variant wiring plus the task list (kind decides the final activation)."""

    variant: str
    task_kinds: tuple[str, ...]
    d0: int = 128
    d1: int = 80

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown dml variant {self.variant!r}")
        if len(self.task_kinds) < 1:
            raise ValueError("at least one task required")
        for kind in self.task_kinds:
            if kind not in TASK_KINDS:
                raise ValueError(f"unknown task kind {kind!r}")
        if self.variant != "none" and len(self.task_kinds) < 2:
            raise ValueError(f"variant {self.variant!r} needs at least 2 tasks")

    @property
    def num_tasks(self) -> int:
        return len(self.task_kinds)


def _final_activation(task_kind: str) -> str:
    return "sigmoid" if task_kind == "classification" else "linear"


def _tower_spec(cfg: DMLConfig, k: int) -> MLPSpec:
    if cfg.variant == "none":
        # the whole baseline tower, prediction included
        return MLPSpec((cfg.d0, cfg.d1, 1), _final_activation(cfg.task_kinds[k]))
    return MLPSpec((cfg.d0, cfg.d1), "relu")


def _distill_spec(cfg):
    return MLPSpec((cfg.d1,), "relu")


def _gate_spec(cfg):
    return MLPSpec((cfg.d1,), "sigmoid")


def _out_spec(cfg, k):
    return MLPSpec((1,), _final_activation(cfg.task_kinds[k]))


# ---------------------------------------------------------------------------
# parameters


def init_dml_params(store: ParameterStore, cfg: DMLConfig) -> None:
    K, d0, d1 = cfg.num_tasks, cfg.d0, cfg.d1
    if cfg.variant in _CTFM_VARIANTS:
        for k in range(K):
            name = f"dml/ctfm/t_{k}"
            store.add(name, rng_for(store.seed, name).uniform(-0.05, 0.05, size=d0))
        for w in ("Wq", "Wk", "Wv"):
            store.add_weight(f"dml/ctfm/{w}", d0, d0)
    for k in range(K):
        init_mlp_params(store, f"dml/tower/{k}", _tower_spec(cfg, k), d0)
    if cfg.variant == "ctfm_only":
        for k in range(K):
            init_mlp_params(store, f"dml/tower/{k}/out", _out_spec(cfg, k), d1)
    if cfg.variant in _GKD_VARIANTS:
        for k in range(K):
            init_mlp_params(store, f"dml/gkd/{k}/distill", _distill_spec(cfg), K * d1)
            init_mlp_params(store, f"dml/gkd/{k}/gate", _gate_spec(cfg), 2 * d1)
            init_mlp_params(store, f"dml/gkd/{k}/out", _out_spec(cfg, k), 2 * d1)


def dml_param_count(cfg: DMLConfig) -> int:
    """Closed-form count of the scalars `init_dml_params` registers."""
    K, d0, d1 = cfg.num_tasks, cfg.d0, cfg.d1
    total = 0
    if cfg.variant in _CTFM_VARIANTS:
        total += K * d0 + 3 * d0 * d0
    total += sum(mlp_param_count(_tower_spec(cfg, k), d0) for k in range(K))
    if cfg.variant == "ctfm_only":
        total += sum(mlp_param_count(_out_spec(cfg, k), d1) for k in range(K))
    if cfg.variant in _GKD_VARIANTS:
        total += K * (mlp_param_count(_distill_spec(cfg), K * d1)
                      + mlp_param_count(_gate_spec(cfg), 2 * d1))
        total += sum(mlp_param_count(_out_spec(cfg, k), 2 * d1) for k in range(K))
    return total


# ---------------------------------------------------------------------------
# forward pieces


def ctfm_forward(tape: Tape, store: ParameterStore, l: list[int], d0: int,
                 block_gradients: bool = True) -> list[int]:
    """Cross-task attention over the K task representations.

    Returns one node per task: split(O + softmax(Q K^T / sqrt(d0)) V) where
    O stacks the task-shifted rows O_k = l^k + t_k.  The per-sample K x K
    attention is built from rank-2 ops: scores via hadamard + row_sum per
    task pair, the weighted value sum via one-hot column extraction and
    scale_rows.  With `block_gradients`, the key/value branches read
    stop_gradient(O_j), so d(output_k)/d(l^j) is exactly zero for j != k.
    """
    K = len(l)
    if K < 2:
        raise ValueError(f"cross-task attention needs at least 2 tasks, got {K}")
    for node in l:
        width = tape.value(node).shape[1]
        if width != d0:
            raise ShapeError(f"task representation width {width} != expected {d0}")

    o = []
    for k in range(K):
        t_k = tape.parameter(f"dml/ctfm/t_{k}", store[f"dml/ctfm/t_{k}"])
        o.append(tape.add(l[k], t_k))
    wq = tape.parameter("dml/ctfm/Wq", store["dml/ctfm/Wq"])
    wk = tape.parameter("dml/ctfm/Wk", store["dml/ctfm/Wk"])
    wv = tape.parameter("dml/ctfm/Wv", store["dml/ctfm/Wv"])

    queries = [tape.matmul(o_k, wq) for o_k in o]
    sources = [tape.stop_gradient(o_k) if block_gradients else o_k for o_k in o]
    keys = [tape.matmul(s, wk) for s in sources]
    values = [tape.matmul(s, wv) for s in sources]

    inv_scale = 1.0 / math.sqrt(d0)
    outputs = []
    for k in range(K):
        scores = [tape.scale(tape.row_sum(tape.hadamard(queries[k], keys[j])), inv_scale)
                  for j in range(K)]
        attn = tape.row_softmax(tape.concat_cols(scores))  # [B x K]
        mixed = None
        for j in range(K):
            one_hot = np.zeros((K, 1))
            one_hot[j, 0] = 1.0
            weight_col = tape.matmul(attn, tape.constant(one_hot))  # [B x 1]
            term = tape.scale_rows(values[j], weight_col)
            mixed = term if mixed is None else tape.add(mixed, term)
        outputs.append(tape.add(o[k], mixed))
    return outputs


def tower_hidden(tape: Tape, store: ParameterStore, cfg: DMLConfig, k: int,
                 x: int) -> int:
    """Task-k hidden tower; yields h^k of width d1 (relu MLP)."""
    return mlp_forward(tape, store, f"dml/tower/{k}", _tower_spec(cfg, k), x)


def gkd_forward(tape: Tape, store: ParameterStore, cfg: DMLConfig, k: int,
                h_all: list[int]) -> int:
    """Distilled-knowledge prediction head for task k.

    The distillation MLP reads the gradient-blocked concatenation of every
    task's hidden representation (including h^k itself), so the only
    trainable paths from o^k back to the towers run through h^k's unblocked
    uses in the gate and output concatenations.
    """
    if not 0 <= k < cfg.num_tasks:
        raise ValueError(f"task index {k} out of range for {cfg.num_tasks} tasks")
    for node in h_all:
        width = tape.value(node).shape[1]
        if width != cfg.d1:
            raise ShapeError(f"hidden width {width} != expected {cfg.d1}")
    blocked = tape.stop_gradient(tape.concat_cols(h_all))
    gk = mlp_forward(tape, store, f"dml/gkd/{k}/distill", _distill_spec(cfg), blocked)
    gate_in = tape.concat_cols([gk, h_all[k]])
    gw = mlp_forward(tape, store, f"dml/gkd/{k}/gate", _gate_spec(cfg), gate_in)
    weighted = tape.hadamard(gk, gw)
    out_in = tape.concat_cols([weighted, h_all[k]])
    return mlp_forward(tape, store, f"dml/gkd/{k}/out", _out_spec(cfg, k), out_in)


def dml_head_forward(tape: Tape, store: ParameterStore, cfg: DMLConfig,
                     l: list[int]) -> list[int]:
    """Map backbone outputs to per-task prediction nodes ([B x 1] each).

    Variant wiring:
      full       CTFM (blocked) -> towers -> GKD
      ctfm_only  CTFM (blocked) -> towers -> per-task linear/sigmoid unit
      gkd_only   towers on l^k directly -> GKD
      v0         CTFM (unblocked) -> towers -> GKD
      none       plain per-task towers ending in the prediction unit
    """
    if len(l) != cfg.num_tasks:
        raise ValueError(f"expected {cfg.num_tasks} representations, got {len(l)}")
    if cfg.variant == "none":
        return [tower_hidden(tape, store, cfg, k, l[k]) for k in range(cfg.num_tasks)]
    if cfg.variant in _CTFM_VARIANTS:
        l = ctfm_forward(tape, store, l, cfg.d0,
                         block_gradients=(cfg.variant != "v0"))
    hidden = [tower_hidden(tape, store, cfg, k, l[k]) for k in range(cfg.num_tasks)]
    if cfg.variant == "ctfm_only":
        return [mlp_forward(tape, store, f"dml/tower/{k}/out", _out_spec(cfg, k), hidden[k])
                for k in range(cfg.num_tasks)]
    return [gkd_forward(tape, store, cfg, k, hidden) for k in range(cfg.num_tasks)]
