"""Tape-based reverse-mode autodiff over dense rank-1/rank-2 float arrays.

Every tensor is a C-contiguous numpy array of rank <= 2. A ``Tape`` records
one ``TapeNode`` per primitive application in topological order; ``backward``
walks the tape in reverse with a fixed accumulation order so that repeated
runs are bit-identical. Gradient blocking is represented explicitly on the
node: ``grad_blocked_inputs`` holds the input positions through which no
adjoint flows, and ``stop_gradient`` is the identity op with its single
input blocked. 64-bit floats are the verification dtype; a 32-bit tape is
supported for faster training but gradient checks are run at 64-bit.

Broadcasting is deliberately restricted: ``add`` accepts a rank-1 bias
against a matrix (summed over rows in the adjoint) and ``scale_rows``
multiplies each row of a matrix by a per-row scalar column. Every other
shape mix is a ``ShapeError``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


class AutodiffError(Exception):
    """Base class for tape construction and execution errors."""


class ShapeError(AutodiffError):
    """Input shapes invalid for a primitive; message names op and shapes."""


class NumericError(AutodiffError):
    """A primitive produced (or received) a non-finite value."""


def _shape_msg(kind: str, arrays: Sequence[np.ndarray]) -> str:
    return f"op '{kind}' got incompatible shapes {[tuple(a.shape) for a in arrays]}"


def _require(cond: bool, kind: str, arrays: Sequence[np.ndarray], detail: str = "") -> None:
    if not cond:
        msg = _shape_msg(kind, arrays)
        if detail:
            msg += f" ({detail})"
        raise ShapeError(msg)


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _row_softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


@dataclass(frozen=True)
class TapeNode:
    """One recorded primitive application.

    ``grad_blocked_inputs`` is the set of input positions through which the
    reverse pass contributes nothing; it is always a subset of the input
    positions.
    """

    nid: int
    op: str
    input_ids: tuple[int, ...]
    value: np.ndarray
    attrs: dict = field(default_factory=dict)
    grad_blocked_inputs: frozenset[int] = frozenset()


# GradientMap: node id -> accumulated adjoint of the node's output.
GradientMap = dict[int, np.ndarray]


class _Op:
    def __init__(self, forward: Callable, adjoint: Callable | None, arity: int | None):
        self.forward = forward
        self.adjoint = adjoint  # (node, out_adjoint, input_values) -> list per input
        self.arity = arity  # None = variadic


def _matmul_fwd(kind, vals, attrs):
    a, b = vals
    _require(a.ndim == 2 and b.ndim == 2 and a.shape[1] == b.shape[0], kind, vals)
    return a @ b


def _matmul_adj(node, g, vals):
    a, b = vals
    return [g @ b.T, a.T @ g]


def _add_fwd(kind, vals, attrs):
    a, b = vals
    if a.shape == b.shape:
        return a + b
    # Row-vector-over-matrix bias add is the only permitted broadcast.
    _require(a.ndim == 2 and b.ndim == 1 and a.shape[1] == b.shape[0], kind, vals,
             "only same-shape or matrix + rank-1 bias")
    return a + b[None, :]


def _add_adj(node, g, vals):
    a, b = vals
    if a.shape == b.shape:
        return [g, g]
    return [g, g.sum(axis=0)]


def _sub_fwd(kind, vals, attrs):
    a, b = vals
    _require(a.shape == b.shape, kind, vals)
    return a - b


def _hadamard_fwd(kind, vals, attrs):
    a, b = vals
    _require(a.shape == b.shape, kind, vals)
    return a * b


def _row_softmax_fwd(kind, vals, attrs):
    (a,) = vals
    _require(a.ndim == 2, kind, vals)
    return _row_softmax(a)


def _row_softmax_adj(node, g, vals):
    y = node.value
    return [y * (g - (g * y).sum(axis=1, keepdims=True))]


def _transpose_fwd(kind, vals, attrs):
    (a,) = vals
    _require(a.ndim == 2, kind, vals)
    return np.ascontiguousarray(a.T)


def _concat_cols_fwd(kind, vals, attrs):
    _require(len(vals) >= 1 and all(v.ndim == 2 for v in vals), kind, vals)
    rows = vals[0].shape[0]
    _require(all(v.shape[0] == rows for v in vals), kind, vals, "row counts differ")
    return np.concatenate(vals, axis=1)


def _concat_cols_adj(node, g, vals):
    out, col = [], 0
    for v in vals:
        out.append(np.ascontiguousarray(g[:, col:col + v.shape[1]]))
        col += v.shape[1]
    return out


def _slice_rows_fwd(kind, vals, attrs):
    (a,) = vals
    start, stop = attrs["start"], attrs["stop"]
    _require(a.ndim == 2, kind, vals)
    if not (0 <= start < stop <= a.shape[0]):
        raise ShapeError(f"op 'slice_rows' range [{start}:{stop}] invalid for {a.shape[0]} rows")
    return np.ascontiguousarray(a[start:stop])


def _slice_rows_adj(node, g, vals):
    z = np.zeros_like(vals[0])
    z[node.attrs["start"]:node.attrs["stop"]] = g
    return [z]


def _stack_rows_fwd(kind, vals, attrs):
    _require(len(vals) >= 1 and all(v.ndim == 1 for v in vals), kind, vals, "rank-1 inputs only")
    m = vals[0].shape[0]
    _require(all(v.shape[0] == m for v in vals), kind, vals)
    return np.stack(vals, axis=0)


def _row_sum_fwd(kind, vals, attrs):
    (a,) = vals
    _require(a.ndim == 2, kind, vals)
    return a.sum(axis=1, keepdims=True)


def _row_sum_adj(node, g, vals):
    return [np.broadcast_to(g, vals[0].shape).copy()]


def _scale_rows_fwd(kind, vals, attrs):
    a, s = vals
    _require(a.ndim == 2 and s.ndim == 2 and s.shape == (a.shape[0], 1), kind, vals,
             "expects matrix and per-row scalar column")
    return a * s


def _scale_rows_adj(node, g, vals):
    a, s = vals
    return [g * s, (g * a).sum(axis=1, keepdims=True)]


def _reduce_mean_fwd(kind, vals, attrs):
    (a,) = vals
    return np.array([a.mean()], dtype=a.dtype)


def _reduce_mean_adj(node, g, vals):
    a = vals[0]
    return [np.full(a.shape, g.ravel()[0] / a.size, dtype=a.dtype)]


def _log_fwd(kind, vals, attrs):
    (a,) = vals
    if np.any(a <= 0):
        raise NumericError("op 'log' received a non-positive input")
    return np.log(a)


def _clip_fwd(kind, vals, attrs):
    (a,) = vals
    return np.clip(a, attrs["lo"], attrs["hi"])


def _clip_adj(node, g, vals):
    a = vals[0]
    inside = (a > node.attrs["lo"]) & (a < node.attrs["hi"])
    return [g * inside]


def _lookup_rows_fwd(kind, vals, attrs):
    (table,) = vals
    idx = attrs["indices"]
    _require(table.ndim == 2, kind, vals)
    if idx.ndim != 1:
        raise ShapeError("op 'lookup_rows' expects a rank-1 index array")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(
            f"op 'lookup_rows' index out of range for table with {table.shape[0]} rows")
    return table[idx]


def _lookup_rows_adj(node, g, vals):
    z = np.zeros_like(vals[0])
    np.add.at(z, node.attrs["indices"], g)
    return [z]


_OPS: dict[str, _Op] = {
    "const": _Op(None, None, 0),
    "param": _Op(None, None, 0),
    "matmul": _Op(_matmul_fwd, _matmul_adj, 2),
    "add": _Op(_add_fwd, _add_adj, 2),
    "subtract": _Op(_sub_fwd, lambda n, g, v: [g, -g], 2),
    "scale": _Op(lambda k, v, a: v[0] * a["c"], lambda n, g, v: [g * n.attrs["c"]], 1),
    "hadamard": _Op(_hadamard_fwd, lambda n, g, v: [g * v[1], g * v[0]], 2),
    "relu": _Op(lambda k, v, a: np.maximum(v[0], 0.0), lambda n, g, v: [g * (v[0] > 0)], 1),
    "sigmoid": _Op(lambda k, v, a: _stable_sigmoid(v[0]),
                   lambda n, g, v: [g * n.value * (1.0 - n.value)], 1),
    "row_softmax": _Op(_row_softmax_fwd, _row_softmax_adj, 1),
    "transpose": _Op(_transpose_fwd, lambda n, g, v: [np.ascontiguousarray(g.T)], 1),
    "concat_cols": _Op(_concat_cols_fwd, _concat_cols_adj, None),
    "slice_rows": _Op(_slice_rows_fwd, _slice_rows_adj, 1),
    "stack_rows": _Op(_stack_rows_fwd, lambda n, g, v: [g[i] for i in range(len(v))], None),
    "row_sum": _Op(_row_sum_fwd, _row_sum_adj, 1),
    "scale_rows": _Op(_scale_rows_fwd, _scale_rows_adj, 2),
    "reduce_mean": _Op(_reduce_mean_fwd, _reduce_mean_adj, 1),
    "square": _Op(lambda k, v, a: v[0] * v[0], lambda n, g, v: [2.0 * v[0] * g], 1),
    "log": _Op(_log_fwd, lambda n, g, v: [g / v[0]], 1),
    "clip": _Op(_clip_fwd, _clip_adj, 1),
    "lookup_rows": _Op(_lookup_rows_fwd, _lookup_rows_adj, 1),
    "stop_gradient": _Op(lambda k, v, a: v[0].copy(), lambda n, g, v: [g], 1),
}


class Tape:
    """Records primitive applications; single-threaded by construction.

    A completed tape may be handed to another thread, but all construction
    and the backward pass happen on one thread. Concurrency belongs at the
    level of independent tapes (one per run/seed).
    """

    def __init__(self, dtype=np.float64, check_finite: bool = True):
        self.dtype = np.dtype(dtype)
        self.check_finite = check_finite
        self.nodes: list[TapeNode] = []
        self.param_nodes: dict[str, int] = {}

    # -- construction ------------------------------------------------------

    def _as_array(self, value) -> np.ndarray:
        arr = np.ascontiguousarray(value, dtype=self.dtype)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if arr.ndim > 2:
            raise ShapeError(f"tensors are rank <= 2, got shape {arr.shape}")
        return arr

    def _record(self, op: str, input_ids: tuple[int, ...], value: np.ndarray,
                attrs: dict | None = None, blocked: frozenset[int] = frozenset()) -> int:
        if self.check_finite and not np.isfinite(value).all():
            raise NumericError(f"op '{op}' produced a non-finite value")
        nid = len(self.nodes)
        self.nodes.append(TapeNode(nid, op, input_ids, value, attrs or {}, blocked))
        return nid

    def constant(self, value) -> int:
        return self._record("const", (), self._as_array(value))

    def parameter(self, name: str, value) -> int:
        """Leaf tensor tracked by name; repeated calls reuse the same node."""
        if name in self.param_nodes:
            return self.param_nodes[name]
        nid = self._record("param", (), self._as_array(value), {"name": name})
        self.param_nodes[name] = nid
        return nid

    def apply(self, kind: str, input_ids: Sequence[int], **attrs) -> int:
        if kind not in _OPS or _OPS[kind].forward is None:
            raise AutodiffError(f"unknown primitive '{kind}'")
        op = _OPS[kind]
        if op.arity is not None and len(input_ids) != op.arity:
            raise AutodiffError(f"op '{kind}' expects {op.arity} inputs, got {len(input_ids)}")
        vals = [self.value(i) for i in input_ids]
        out = op.forward(kind, vals, attrs)
        out = np.ascontiguousarray(out, dtype=self.dtype)
        blocked = frozenset({0}) if kind == "stop_gradient" else frozenset()
        return self._record(kind, tuple(input_ids), out, attrs, blocked)

    def value(self, nid: int) -> np.ndarray:
        try:
            return self.nodes[nid].value
        except IndexError:
            raise AutodiffError(f"node id {nid} not on tape") from None

    # -- op sugar ----------------------------------------------------------

    def matmul(self, a, b):
        return self.apply("matmul", (a, b))

    def add(self, a, b):
        return self.apply("add", (a, b))

    def subtract(self, a, b):
        return self.apply("subtract", (a, b))

    def scale(self, a, c: float):
        return self.apply("scale", (a,), c=float(c))

    def hadamard(self, a, b):
        return self.apply("hadamard", (a, b))

    def relu(self, a):
        return self.apply("relu", (a,))

    def sigmoid(self, a):
        return self.apply("sigmoid", (a,))

    def row_softmax(self, a):
        return self.apply("row_softmax", (a,))

    def transpose(self, a):
        return self.apply("transpose", (a,))

    def concat_cols(self, ids: Iterable[int]):
        return self.apply("concat_cols", tuple(ids))

    def slice_rows(self, a, start: int, stop: int):
        return self.apply("slice_rows", (a,), start=int(start), stop=int(stop))

    def split_rows(self, a, parts: int) -> list[int]:
        n = self.value(a).shape[0]
        if n % parts:
            raise ShapeError(f"cannot split {n} rows into {parts} equal parts")
        step = n // parts
        return [self.slice_rows(a, i * step, (i + 1) * step) for i in range(parts)]

    def stack_rows(self, ids: Iterable[int]):
        return self.apply("stack_rows", tuple(ids))

    def row_sum(self, a):
        return self.apply("row_sum", (a,))

    def scale_rows(self, a, s):
        return self.apply("scale_rows", (a, s))

    def reduce_mean(self, a):
        return self.apply("reduce_mean", (a,))

    def square(self, a):
        return self.apply("square", (a,))

    def log(self, a):
        return self.apply("log", (a,))

    def clip(self, a, lo: float, hi: float):
        return self.apply("clip", (a,), lo=float(lo), hi=float(hi))

    def lookup_rows(self, table, indices):
        idx = np.ascontiguousarray(indices, dtype=np.int64)
        return self.apply("lookup_rows", (table,), indices=idx)

    def stop_gradient(self, a):
        return self.apply("stop_gradient", (a,))

    # -- reverse pass ------------------------------------------------------

    def backward(self, loss: int) -> GradientMap:
        """Adjoints for every node reachable from ``loss``.

        Accumulation order is fixed (reverse tape order, inputs in position
        order) so results are bit-reproducible. Blocked input positions
        contribute nothing.
        """
        lval = self.value(loss)
        if lval.size != 1:
            raise AutodiffError(f"backward requires a scalar loss, got shape {lval.shape}")
        grads: GradientMap = {loss: np.ones_like(lval)}
        for node in reversed(self.nodes[: loss + 1]):
            g = grads.get(node.nid)
            if g is None or not node.input_ids:
                continue
            vals = [self.value(i) for i in node.input_ids]
            contribs = _OPS[node.op].adjoint(node, g, vals)
            for pos, (iid, contrib) in enumerate(zip(node.input_ids, contribs)):
                if pos in node.grad_blocked_inputs:
                    continue
                if self.check_finite and not np.isfinite(contrib).all():
                    raise NumericError(f"adjoint of op '{node.op}' is non-finite")
                if iid in grads:
                    grads[iid] = grads[iid] + contrib
                else:
                    grads[iid] = contrib
        return grads

    def grad(self, grads: GradientMap, nid: int) -> np.ndarray:
        """Adjoint of a node, zeros if the reverse pass never reached it."""
        g = grads.get(nid)
        return g if g is not None else np.zeros_like(self.value(nid))

    def param_grads(self, grads: GradientMap) -> dict[str, np.ndarray]:
        return {name: self.grad(grads, nid) for name, nid in self.param_nodes.items()}

    # -- blocked-path analysis ---------------------------------------------

    def blocked_ancestor_ids(self) -> set[int]:
        """Nodes with a forward path into some blocked input position.

        Any parameter in this set has a true derivative with a component the
        reverse pass deliberately drops, so finite-difference comparisons
        must exclude it.
        """
        seeds = set()
        for node in self.nodes:
            for pos in node.grad_blocked_inputs:
                seeds.add(node.input_ids[pos])
        marked = set(seeds)
        stack = list(seeds)
        while stack:
            nid = stack.pop()
            for iid in self.nodes[nid].input_ids:
                if iid not in marked:
                    marked.add(iid)
                    stack.append(iid)
        return marked

    def blocked_param_names(self) -> set[str]:
        marked = self.blocked_ancestor_ids()
        return {name for name, nid in self.param_nodes.items() if nid in marked}


def finite_difference_check(scalar_fn, params, eps: float = 1e-5,
                            exclude: Iterable[str] = ()) -> float:
    """Worst relative error between reverse-mode and central finite differences.

    ``scalar_fn(params)`` must build a fresh tape and return
    ``(loss_value, grad_thunk)`` where ``grad_thunk()`` yields the
    name -> gradient map; the thunk is only invoked once, at the unperturbed
    point. Every element of every non-excluded, non-frozen parameter is
    perturbed by +-eps in place (and restored). Parameters reachable only
    through blocked edges must be passed in ``exclude`` — their reverse
    gradient intentionally disagrees with the true derivative.

    Relative error falls back to absolute difference when both gradients are
    below 1e-8 in magnitude.
    """
    if not (0.0 < eps <= 1e-2):
        raise ValueError(f"eps must lie in (0, 1e-2], got {eps}")
    f0, grad_thunk = scalar_fn(params)
    f1, _ = scalar_fn(params)
    if f0 != f1:
        raise AutodiffError("scalar_fn is not deterministic: repeated evaluation differs")
    grads = grad_thunk()
    excluded = set(exclude) | set(getattr(params, "frozen", ()))
    worst = 0.0
    for name in params.names():
        if name in excluded:
            continue
        arr = params[name]
        rev = grads[name]
        flat = arr.reshape(-1)
        rflat = np.asarray(rev).reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp, _ = scalar_fn(params)
            flat[i] = orig - eps
            fm, _ = scalar_fn(params)
            flat[i] = orig
            fd = (fp - fm) / (2.0 * eps)
            denom = max(abs(fd), abs(rflat[i]))
            err = abs(fd - rflat[i]) if denom < 1e-8 else abs(fd - rflat[i]) / denom
            if err > worst:
                worst = err
    return worst
