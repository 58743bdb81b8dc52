"""Lower-level networks that map concatenated feature embeddings to per-task
representations.

Every backbone produces a list of K nodes, one per task, each of shape
[batch x expert_dim] (128 by default).  Four kinds are provided:

* ``single_task``   -- one independent encoder per task (no sharing at all);
                       the caller supplies one input node per task so that
                       embeddings can be task-private too.
* ``shared_bottom`` -- a single shared layer whose output is handed to every
                       task (all K entries are literally the same node).
* ``mmoe``          -- a bank of shared expert layers combined per task by a
                       softmax gate computed from the input.
* ``ple``           -- two extraction levels, each holding one shared expert
                       plus one expert per task; task gates mix the own and
                       shared experts, and a shared gate (first level only)
                       mixes all of them.

Parameters are registered in a :class:`~mutualrec.nn.ParameterStore` under
``backbone/<kind>/<level>/<expert>/<layer>/{W,b}``; gates occupy the expert
slot with names like ``gate_task0``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tape
from .nn import MLPSpec, ParameterStore, init_mlp_params, mlp_forward, mlp_param_count

BACKBONE_KINDS = ("single_task", "shared_bottom", "mmoe", "ple")


@dataclass(frozen=True)
class BackboneConfig:
    """Static description of a backbone.

    ``num_experts_per_level`` counts the sub-networks on each extraction
    level; for PLE it must equal ``num_tasks + 1`` (one shared expert plus
    one per task).  ``num_levels`` is 2 for PLE and 1 otherwise.
    """

    kind: str
    num_tasks: int
    in_dim: int
    expert_dim: int = 128
    num_experts_per_level: int = 3
    num_levels: int = 1

    def __post_init__(self):
        if self.kind not in BACKBONE_KINDS:
            raise ValueError(f"unknown backbone kind {self.kind!r}")
        if self.num_tasks < 1 or self.in_dim < 1 or self.expert_dim < 1:
            raise ValueError("num_tasks, in_dim and expert_dim must be positive")
        if self.kind == "ple":
            if self.num_levels != 2:
                raise ValueError("ple uses exactly 2 extraction levels")
            if self.num_experts_per_level != self.num_tasks + 1:
                raise ValueError(
                    f"ple with {self.num_tasks} tasks needs "
                    f"{self.num_tasks + 1} experts per level, got "
                    f"{self.num_experts_per_level}")
        elif self.num_levels != 1:
            raise ValueError(f"{self.kind} uses a single level")


def make_backbone_config(kind, num_tasks, in_dim, expert_dim=128):
    """Build a config with the level/expert counts implied by `kind`."""
    if kind == "ple":
        return BackboneConfig(kind, num_tasks, in_dim, expert_dim,
                              num_experts_per_level=num_tasks + 1, num_levels=2)
    return BackboneConfig(kind, num_tasks, in_dim, expert_dim)


# ---------------------------------------------------------------------------
# parameter naming helpers

def _expert_prefix(kind, level, expert):
    return f"backbone/{kind}/{level}/{expert}"


def _expert_spec(cfg):
    return MLPSpec((cfg.expert_dim,), "relu")


def _gate_spec(num_choices):
    return MLPSpec((num_choices,), "linear")


def init_backbone_params(store: ParameterStore, cfg: BackboneConfig) -> None:
    """Register every weight and bias the backbone's forward pass will read."""
    expert = _expert_spec(cfg)
    if cfg.kind == "single_task":
        for k in range(cfg.num_tasks):
            init_mlp_params(store, _expert_prefix(cfg.kind, 0, f"task{k}"),
                            expert, cfg.in_dim)
    elif cfg.kind == "shared_bottom":
        init_mlp_params(store, _expert_prefix(cfg.kind, 0, "shared"),
                        expert, cfg.in_dim)
    elif cfg.kind == "mmoe":
        for e in range(cfg.num_experts_per_level):
            init_mlp_params(store, _expert_prefix(cfg.kind, 0, f"expert{e}"),
                            expert, cfg.in_dim)
        gate = _gate_spec(cfg.num_experts_per_level)
        for k in range(cfg.num_tasks):
            init_mlp_params(store, _expert_prefix(cfg.kind, 0, f"gate_task{k}"),
                            gate, cfg.in_dim)
    elif cfg.kind == "ple":
        for level in range(2):
            in_dim = cfg.in_dim if level == 0 else cfg.expert_dim
            init_mlp_params(store, _expert_prefix(cfg.kind, level, "expert_shared"),
                            expert, in_dim)
            for k in range(cfg.num_tasks):
                init_mlp_params(store, _expert_prefix(cfg.kind, level, f"expert_task{k}"),
                                expert, in_dim)
                init_mlp_params(store, _expert_prefix(cfg.kind, level, f"gate_task{k}"),
                                _gate_spec(2), in_dim)
        init_mlp_params(store, _expert_prefix(cfg.kind, 0, "gate_shared"),
                        _gate_spec(cfg.num_tasks + 1), cfg.in_dim)


def backbone_param_count(cfg: BackboneConfig) -> int:
    """Closed-form count of the scalars `init_backbone_params` registers."""
    expert = mlp_param_count(_expert_spec(cfg), cfg.in_dim)
    if cfg.kind == "single_task":
        return cfg.num_tasks * expert
    if cfg.kind == "shared_bottom":
        return expert
    if cfg.kind == "mmoe":
        gates = cfg.num_tasks * mlp_param_count(
            _gate_spec(cfg.num_experts_per_level), cfg.in_dim)
        return cfg.num_experts_per_level * expert + gates
    # ple
    total = 0
    for level in range(2):
        in_dim = cfg.in_dim if level == 0 else cfg.expert_dim
        spec = BackboneConfig("shared_bottom", cfg.num_tasks, in_dim, cfg.expert_dim)
        level_expert = mlp_param_count(_expert_spec(spec), in_dim)
        total += (cfg.num_tasks + 1) * level_expert
        total += cfg.num_tasks * mlp_param_count(_gate_spec(2), in_dim)
    total += mlp_param_count(_gate_spec(cfg.num_tasks + 1), cfg.in_dim)
    return total


# ---------------------------------------------------------------------------
# forward passes

def _gate_weights(tape, store, prefix, num_choices, x):
    """Softmax gate over `num_choices` alternatives, computed from `x`."""
    logits = mlp_forward(tape, store, prefix, _gate_spec(num_choices), x)
    return tape.row_softmax(logits)


def _weighted_sum(tape: Tape, experts, gate):
    """Mix expert outputs [B x d] with per-row weights gate[:, e].

    Column e of the gate matrix is broadcast across the expert width with a
    constant selector matmul, so the whole mix stays inside rank-2 ops.
    """
    num = len(experts)
    width = tape.value(experts[0]).shape[1]
    out = None
    for e, expert in enumerate(experts):
        selector = np.zeros((num, width))
        selector[e, :] = 1.0
        w_cols = tape.matmul(gate, tape.constant(selector))
        term = tape.hadamard(expert, w_cols)
        out = term if out is None else tape.add(out, term)
    return out


def shared_bottom_forward(tape, store, cfg, x):
    shared = mlp_forward(tape, store, _expert_prefix(cfg.kind, 0, "shared"),
                         _expert_spec(cfg), x)
    return [shared] * cfg.num_tasks


def single_task_forward(tape, store, cfg, xs):
    """One private encoder per task; `xs` holds one input node per task."""
    if len(xs) != cfg.num_tasks:
        raise ValueError(f"expected {cfg.num_tasks} input nodes, got {len(xs)}")
    return [mlp_forward(tape, store, _expert_prefix(cfg.kind, 0, f"task{k}"),
                        _expert_spec(cfg), xs[k])
            for k in range(cfg.num_tasks)]


def mmoe_forward(tape, store, cfg, x):
    experts = [mlp_forward(tape, store, _expert_prefix(cfg.kind, 0, f"expert{e}"),
                           _expert_spec(cfg), x)
               for e in range(cfg.num_experts_per_level)]
    outputs = []
    for k in range(cfg.num_tasks):
        gate = _gate_weights(tape, store, _expert_prefix(cfg.kind, 0, f"gate_task{k}"),
                             cfg.num_experts_per_level, x)
        outputs.append(_weighted_sum(tape, experts, gate))
    return outputs


def ple_forward(tape, store, cfg, x):
    """Two-level progressive extraction.

    Level 1 feeds every expert the raw input; task gates mix
    [own expert, shared expert] while the shared gate mixes
    [task0, ..., task{K-1}, shared] to carry a shared path forward.
    Level 2 experts consume the level-1 fused representations (the shared
    expert takes the shared fuse), and the level-2 task gates — driven by
    each task's own level-1 fuse — produce the final per-task outputs.
    """
    expert = _expert_spec(cfg)

    def run_level(level, task_inputs, shared_input, gate_inputs, with_shared_gate):
        shared_out = mlp_forward(
            tape, store, _expert_prefix(cfg.kind, level, "expert_shared"),
            expert, shared_input)
        task_outs = [mlp_forward(
            tape, store, _expert_prefix(cfg.kind, level, f"expert_task{k}"),
            expert, task_inputs[k]) for k in range(cfg.num_tasks)]
        fused = []
        for k in range(cfg.num_tasks):
            gate = _gate_weights(
                tape, store, _expert_prefix(cfg.kind, level, f"gate_task{k}"),
                2, gate_inputs[k])
            fused.append(_weighted_sum(tape, [task_outs[k], shared_out], gate))
        shared_fused = None
        if with_shared_gate:
            gate = _gate_weights(
                tape, store, _expert_prefix(cfg.kind, level, "gate_shared"),
                cfg.num_tasks + 1, shared_input)
            shared_fused = _weighted_sum(tape, task_outs + [shared_out], gate)
        return fused, shared_fused

    level1, shared1 = run_level(
        0, [x] * cfg.num_tasks, x, [x] * cfg.num_tasks, with_shared_gate=True)
    level2, _ = run_level(1, level1, shared1, level1, with_shared_gate=False)
    return level2


_FORWARDS = {
    "shared_bottom": shared_bottom_forward,
    "mmoe": mmoe_forward,
    "ple": ple_forward,
}


def backbone_forward(tape, store, cfg: BackboneConfig, x):
    """Dispatch to the configured backbone.

    `x` is a single node for the shared kinds and a list of per-task nodes
    for ``single_task``.  Returns K nodes of width `cfg.expert_dim`.
    """
    if cfg.kind == "single_task":
        return single_task_forward(tape, store, cfg, x)
    return _FORWARDS[cfg.kind](tape, store, cfg, x)
