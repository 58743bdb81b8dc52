"""Gradient and accounting audits, runnable from the CLI.

Four suites:
  * primitive finite-difference checks, one per tape primitive;
  * finite-difference checks on fully assembled models (every head variant,
    every backbone), excluding parameters that feed a blocked edge — their
    true derivative deliberately disagrees with the reverse pass;
  * exact isolation checks: blocked cross-task adjoints are bit-zero where
    the head promises it, and nonzero where the unblocked variant allows it;
  * parameter accounting: reported trainable counts equal the closed form.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tape, finite_difference_check
from .backbones import BACKBONE_KINDS
from .data import Batch, FieldSpec, TaskSpec
from .dml import VARIANTS, DMLConfig, dml_head_forward, gkd_forward, init_dml_params
from .harness import (ModelConfig, analytic_param_count, build_model_config,
                      init_model_params, model_forward, training_loss)
from .nn import ParameterStore, task_loss

FD_TOLERANCE = 1e-4


@dataclass(frozen=True)
class AuditResult:
    name: str
    passed: bool
    detail: str


def render_results(results) -> str:
    lines = [f"{'PASS' if r.passed else 'FAIL'} {r.name}: {r.detail}"
             for r in results]
    failed = sum(not r.passed for r in results)
    lines.append(f"{len(results) - failed}/{len(results)} audits passed")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# primitive finite-difference checks


def _params(**arrays):
    store = ParameterStore()
    for name, arr in arrays.items():
        store.add(name, np.asarray(arr, dtype=np.float64))
    return store


def _scalar_case(build):
    def scalar_fn(params):
        tape = Tape()
        out = build(tape, params)
        gmap = tape.backward(out)
        return tape.value(out).item(), lambda: tape.param_grads(gmap)
    return scalar_fn


def _p(tape, params, name):
    return tape.parameter(name, params[name])


def _signed(rng, shape, lo=0.2, hi=1.0):
    """Magnitudes in [lo, hi] with random signs: generic but clear of the
    relu/clip kinks that finite differences straddle."""
    return rng.uniform(lo, hi, shape) * rng.choice([-1.0, 1.0], shape)


def _primitive_cases():
    rng = np.random.default_rng(20240801)
    A34 = _signed(rng, (3, 4))
    B34 = _signed(rng, (3, 4))
    B42 = _signed(rng, (4, 2))
    C34 = _signed(rng, (3, 4))
    C43 = _signed(rng, (4, 3))
    C38 = _signed(rng, (3, 8))
    C23 = _signed(rng, (2, 3))
    C24 = _signed(rng, (2, 4))
    C53 = _signed(rng, (5, 3))
    A43 = _signed(rng, (4, 3))
    S31 = rng.uniform(0.3, 1.2, (3, 1))
    T53 = _signed(rng, (5, 3))
    POS = rng.uniform(0.5, 2.0, (3, 4))
    # half the clip input sits inside (-0.8, 0.8), half outside, all at
    # distance > 0.1 from the thresholds
    CLIP = np.concatenate([_signed(rng, (2, 4), 0.2, 0.6),
                           _signed(rng, (1, 4), 1.0, 1.5)])
    idx = np.array([0, 2, 2, 4, 1])

    def case(name, params, build):
        return name, params, _scalar_case(build)

    return [
        case("matmul", _params(A=A34, B=B42),
             lambda t, p: t.reduce_mean(t.matmul(_p(t, p, "A"), _p(t, p, "B")))),
        case("add", _params(A=A34, B=B34),
             lambda t, p: t.reduce_mean(t.add(_p(t, p, "A"), _p(t, p, "B")))),
        case("subtract", _params(A=A34, B=B34),
             lambda t, p: t.reduce_mean(t.subtract(_p(t, p, "A"), _p(t, p, "B")))),
        case("hadamard", _params(A=A34, B=B34),
             lambda t, p: t.reduce_mean(t.hadamard(_p(t, p, "A"), _p(t, p, "B")))),
        case("scale", _params(A=A34),
             lambda t, p: t.reduce_mean(t.scale(_p(t, p, "A"), -1.7))),
        case("relu", _params(A=A34),
             lambda t, p: t.reduce_mean(t.relu(_p(t, p, "A")))),
        case("sigmoid", _params(A=A34),
             lambda t, p: t.reduce_mean(t.sigmoid(_p(t, p, "A")))),
        case("row_softmax", _params(A=A34),
             lambda t, p: t.reduce_mean(
                 t.hadamard(t.row_softmax(_p(t, p, "A")), t.constant(C34)))),
        case("transpose", _params(A=A34),
             lambda t, p: t.reduce_mean(
                 t.hadamard(t.transpose(_p(t, p, "A")), t.constant(C43)))),
        case("concat_cols", _params(A=A34, B=B34),
             lambda t, p: t.reduce_mean(
                 t.hadamard(t.concat_cols([_p(t, p, "A"), _p(t, p, "B")]),
                            t.constant(C38)))),
        case("slice_rows", _params(A=A43),
             lambda t, p: t.reduce_mean(
                 t.hadamard(t.slice_rows(_p(t, p, "A"), 1, 3), t.constant(C23)))),
        case("stack_rows", _params(A=_signed(rng, (4,)), B=_signed(rng, (4,))),
             lambda t, p: t.reduce_mean(
                 t.hadamard(t.stack_rows([_p(t, p, "A"), _p(t, p, "B")]),
                            t.constant(C24)))),
        case("row_sum", _params(A=A34),
             lambda t, p: t.reduce_mean(t.square(t.row_sum(_p(t, p, "A"))))),
        case("scale_rows", _params(A=A34, S=S31),
             lambda t, p: t.reduce_mean(t.scale_rows(_p(t, p, "A"), _p(t, p, "S")))),
        case("reduce_mean", _params(A=A34),
             lambda t, p: t.reduce_mean(_p(t, p, "A"))),
        case("log", _params(A=POS),
             lambda t, p: t.reduce_mean(t.log(_p(t, p, "A")))),
        case("square", _params(A=A34),
             lambda t, p: t.reduce_mean(t.square(_p(t, p, "A")))),
        case("clip", _params(A=CLIP),
             lambda t, p: t.reduce_mean(t.clip(_p(t, p, "A"), -0.8, 0.8))),
        case("lookup_rows", _params(T=T53),
             lambda t, p: t.reduce_mean(
                 t.hadamard(t.lookup_rows(_p(t, p, "T"), idx), t.constant(C53)))),
    ]


def audit_primitives(eps: float = 1e-5, tolerance: float = FD_TOLERANCE):
    results = []
    for name, params, scalar_fn in _primitive_cases():
        err = finite_difference_check(scalar_fn, params, eps=eps)
        results.append(AuditResult(f"primitive-fd/{name}", err < tolerance,
                                   f"max rel err {err:.3e}"))
    results.append(audit_stop_gradient())
    return results


def audit_stop_gradient() -> AuditResult:
    """The blocked copy contributes to the forward value but exactly nothing
    to the adjoint, and the parameter is flagged as blocked."""
    rng = np.random.default_rng(5)
    a = _signed(rng, (2, 3))
    c1 = _signed(rng, (2, 3))
    c2 = _signed(rng, (2, 3))
    store = _params(A=a)
    tape = Tape()
    node = tape.parameter("A", store["A"])
    out = tape.reduce_mean(
        tape.add(tape.hadamard(node, tape.constant(c1)),
                 tape.hadamard(tape.stop_gradient(node), tape.constant(c2))))
    grads = tape.param_grads(tape.backward(out))
    expected = c1 * (1.0 / a.size)
    ok = (np.array_equal(grads["A"], expected)
          and tape.blocked_param_names() == {"A"})
    return AuditResult("primitive-fd/stop_gradient", ok,
                       "adjoint drops the blocked path exactly")


# ---------------------------------------------------------------------------
# assembled-model finite-difference checks


_AUDIT_FIELDS = (FieldSpec("user", 6), FieldSpec("item", 8),
                 FieldSpec("tags", 5, multi=True))
_AUDIT_TASKS = (TaskSpec("click", "classification"),
                TaskSpec("score", "regression"))


def _audit_model_config(backbone_kind, variant,
                        embed_dim=3, expert_dim=6, tower_dim=4) -> ModelConfig:
    return build_model_config("audit", _AUDIT_FIELDS, _AUDIT_TASKS,
                              backbone_kind, variant, embed_dim=embed_dim,
                              expert_dim=expert_dim, tower_dim=tower_dim)


def _audit_batch(batch_size=5, seed=31):
    rng = np.random.default_rng(seed)
    pool = np.zeros((batch_size, 5))
    for row in range(batch_size):
        values = rng.choice(5, size=rng.integers(1, 3), replace=False)
        pool[row, values] = 1.0 / values.size
    features = {"user": rng.integers(0, 6, batch_size),
                "item": rng.integers(0, 8, batch_size),
                "tags": pool}
    labels = np.column_stack([rng.integers(0, 2, batch_size).astype(float),
                              rng.uniform(0.2, 1.0, batch_size)])
    return Batch(features=features, labels=labels)


def _positivize(store: ParameterStore, seed=929) -> None:
    """Overwrite every parameter with small positive values so relu units
    stay active and sigmoids interior — finite differences on a generic
    random model are dominated by roundoff on near-dead paths."""
    rng = np.random.default_rng(seed)
    for name in store.names():
        store[name][...] = rng.uniform(0.05, 0.3, store[name].shape)


def audit_model_gradients(backbone_kind: str, variant: str, eps: float = 1e-5,
                          tolerance: float = FD_TOLERANCE) -> AuditResult:
    mc = _audit_model_config(backbone_kind, variant)
    store = ParameterStore(seed=7)
    init_model_params(store, mc)
    _positivize(store)
    batch = _audit_batch()

    def scalar_fn(params):
        tape = Tape()
        preds = model_forward(tape, params, mc, batch)
        loss = training_loss(tape, mc, preds, batch.labels)
        gmap = tape.backward(loss)
        return tape.value(loss).item(), lambda: tape.param_grads(gmap)

    probe = Tape()
    loss = training_loss(probe, mc, model_forward(probe, store, mc, batch),
                         batch.labels)
    probe.backward(loss)
    exclude = probe.blocked_param_names()

    err = finite_difference_check(scalar_fn, store, eps=eps, exclude=exclude)
    return AuditResult(
        f"model-fd/{backbone_kind}/{variant}", err < tolerance,
        f"max rel err {err:.3e} over {len(store.names()) - len(exclude)} "
        f"parameters ({len(exclude)} blocked ones excluded)")


# ---------------------------------------------------------------------------
# exact isolation checks


def _head_setup(variant, batch_size=6, d0=5, d1=4, seed=11):
    cfg = DMLConfig(variant, ("classification", "regression"), d0=d0, d1=d1)
    store = ParameterStore(seed=seed)
    init_dml_params(store, cfg)
    rng = np.random.default_rng(seed + 1)
    leaves = [rng.normal(size=(batch_size, d0)) for _ in range(cfg.num_tasks)]
    labels = np.column_stack([rng.integers(0, 2, batch_size).astype(float),
                              rng.normal(size=batch_size)])
    return cfg, store, leaves, labels


def audit_isolation(variant: str) -> AuditResult:
    """Adjoint of task-k loss w.r.t. the other task's backbone output:
    exactly zero under the blocking head, nonzero once CTFM is unblocked."""
    cfg, store, leaves, labels = _head_setup(variant)
    want_zero = variant != "v0"
    checked, failures = 0, []
    for k, kind in enumerate(("binary_cross_entropy", "squared_error")):
        tape = Tape()
        nodes = [tape.parameter(f"input/l{j}", leaf)
                 for j, leaf in enumerate(leaves)]
        preds = dml_head_forward(tape, store, cfg, nodes)
        gmap = tape.backward(task_loss(tape, kind, preds[k], labels[:, k]))
        own = tape.grad(gmap, nodes[k])
        if not np.any(own != 0.0):
            failures.append(f"task {k}: own-input adjoint vanished")
        for j in range(cfg.num_tasks):
            if j == k:
                continue
            checked += 1
            cross = tape.grad(gmap, nodes[j])
            if want_zero and np.any(cross != 0.0):
                failures.append(f"task {k}: leak into l{j}")
            if not want_zero and not np.any(cross != 0.0):
                failures.append(f"task {k}: no gradient reaches l{j}")
    detail = (f"{checked} cross-task adjoints "
              + ("bit-zero" if want_zero else "nonzero"))
    if failures:
        detail = "; ".join(failures)
    return AuditResult(f"isolation/{variant}", not failures, detail)


def audit_isolation_gkd() -> AuditResult:
    """Within the distillation head, o^k sees other towers' hidden states
    only through the blocked concat: zero adjoint, yet forward-sensitive."""
    cfg, store, _, _ = _head_setup("full")
    rng = np.random.default_rng(17)
    h = [rng.normal(size=(6, cfg.d1)) for _ in range(cfg.num_tasks)]
    tape = Tape()
    nodes = [tape.parameter(f"input/h{j}", arr) for j, arr in enumerate(h)]
    out = gkd_forward(tape, store, cfg, 0, nodes)
    gmap = tape.backward(tape.reduce_mean(tape.square(out)))
    cross = tape.grad(gmap, nodes[1])
    own = tape.grad(gmap, nodes[0])
    base = tape.value(out).copy()

    tape2 = Tape()
    h_bumped = [h[0], h[1] + 0.25]
    nodes2 = [tape2.parameter(f"input/h{j}", arr)
              for j, arr in enumerate(h_bumped)]
    moved = tape2.value(gkd_forward(tape2, store, cfg, 0, nodes2))

    ok = (not np.any(cross != 0.0)) and np.any(own != 0.0) \
        and np.any(moved != base)
    return AuditResult("isolation/gkd", ok,
                       "cross-tower adjoint bit-zero, forward still sensitive")


# ---------------------------------------------------------------------------
# parameter accounting


def audit_param_counts(embed_dim=8, expert_dim=128, tower_dim=80):
    results = []
    for backbone in BACKBONE_KINDS:
        for variant in VARIANTS:
            mc = _audit_model_config(backbone, variant, embed_dim=embed_dim,
                                     expert_dim=expert_dim, tower_dim=tower_dim)
            store = ParameterStore()
            init_model_params(store, mc)
            actual = store.total_count()
            expected = analytic_param_count(mc)
            results.append(AuditResult(
                f"param-count/{backbone}/{variant}", actual == expected,
                f"reported {actual}, analytic {expected}"))
    return results


# ---------------------------------------------------------------------------
# full suite


def default_model_matrix():
    """Every head variant on the shared-bottom backbone plus every other
    backbone under the full head."""
    pairs = [("shared_bottom", v) for v in VARIANTS]
    pairs += [(b, "full") for b in BACKBONE_KINDS if b != "shared_bottom"]
    return pairs


def run_all(backbone: str | None = None, variant: str | None = None,
            eps: float = 1e-5):
    results = audit_primitives(eps=eps)
    if backbone or variant:
        pairs = [(backbone or "shared_bottom", variant or "full")]
    else:
        pairs = default_model_matrix()
    for b, v in pairs:
        results.append(audit_model_gradients(b, v, eps=eps))
    results.append(audit_isolation("full"))
    results.append(audit_isolation("v0"))
    results.append(audit_isolation_gkd())
    results.extend(audit_param_counts())
    return results
