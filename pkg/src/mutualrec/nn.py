"""Neural building blocks shared by every model.

ParameterStore holds named trainable arrays; initialization is keyed by
(global seed, parameter name) so a parameter's starting values do not depend
on which other parameters exist — architecture variants stay comparable
across runs. Weights are Glorot-uniform, biases zero, embedding tables
uniform in [-0.05, 0.05].
"""

from __future__ import annotations

import hashlib
import json
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .autodiff import GradientMap, ShapeError, Tape

CHECKPOINT_VERSION = 1

# out-of-vocabulary lookups, counted per embedding table
oov_events: Counter = Counter()


class MissingGradientError(Exception):
    """A trainable parameter received no gradient and was not declared frozen."""


def rng_for(seed: int, name: str) -> np.random.Generator:
    """Generator determined only by (seed, name)."""
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    words = [int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4)]
    return np.random.default_rng(np.random.SeedSequence([int(seed)] + words))


def glorot_uniform(fan_in: int, fan_out: int, rng: np.random.Generator) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class ParameterStore:
    """Named trainable tensors; optimizer state lives in AdamState."""

    def __init__(self, dtype=np.float64, seed: int = 0):
        self.dtype = np.dtype(dtype)
        self.seed = int(seed)
        self._arrays: dict[str, np.ndarray] = {}
        self.frozen: set[str] = set()

    def add(self, name: str, value: np.ndarray) -> np.ndarray:
        if name in self._arrays:
            raise KeyError(f"parameter '{name}' already exists")
        self._arrays[name] = np.ascontiguousarray(value, dtype=self.dtype)
        return self._arrays[name]

    def add_weight(self, name: str, fan_in: int, fan_out: int) -> np.ndarray:
        return self.add(name, glorot_uniform(fan_in, fan_out, rng_for(self.seed, name)))

    def add_bias(self, name: str, dim: int) -> np.ndarray:
        return self.add(name, np.zeros(dim))

    def add_embedding(self, name: str, vocab_size: int, dim: int) -> np.ndarray:
        rng = rng_for(self.seed, name)
        return self.add(name, rng.uniform(-0.05, 0.05, size=(vocab_size, dim)))

    def __getitem__(self, name: str) -> np.ndarray:
        return self._arrays[name]

    def __contains__(self, name: str) -> bool:
        return name in self._arrays

    def names(self) -> list[str]:
        return list(self._arrays)

    def freeze(self, names) -> None:
        self.frozen.update(names)

    def total_count(self, trainable_only: bool = True) -> int:
        return sum(a.size for n, a in self._arrays.items()
                   if not (trainable_only and n in self.frozen))

    def copy(self) -> "ParameterStore":
        out = ParameterStore(self.dtype, self.seed)
        out._arrays = {n: a.copy() for n, a in self._arrays.items()}
        out.frozen = set(self.frozen)
        return out

    def save(self, path) -> None:
        meta = json.dumps({
            "version": CHECKPOINT_VERSION,
            "dtype": self.dtype.name,
            "seed": self.seed,
            "frozen": sorted(self.frozen),
            "names": self.names(),
        })
        np.savez(path, __meta__=np.frombuffer(meta.encode(), dtype=np.uint8),
                 **self._arrays)

    @classmethod
    def load(cls, path) -> "ParameterStore":
        with np.load(path) as z:
            meta = json.loads(bytes(z["__meta__"]).decode())
            if meta["version"] != CHECKPOINT_VERSION:
                raise ValueError(f"unsupported checkpoint version {meta['version']}")
            store = cls(dtype=np.dtype(meta["dtype"]), seed=meta["seed"])
            for name in meta["names"]:
                store._arrays[name] = np.ascontiguousarray(z[name])
            store.frozen = set(meta["frozen"])
        return store


# ---------------------------------------------------------------------------
# MLP


@dataclass(frozen=True)
class MLPSpec:
    """Layer output sizes plus the final activation; hidden layers are relu."""

    layer_dims: tuple[int, ...]
    final_activation: str = "linear"  # relu | sigmoid | linear

    def __post_init__(self):
        if not self.layer_dims or any(d <= 0 for d in self.layer_dims):
            raise ValueError(f"layer_dims must be non-empty and positive: {self.layer_dims}")
        if self.final_activation not in ("relu", "sigmoid", "linear"):
            raise ValueError(f"unknown final activation '{self.final_activation}'")


def init_mlp_params(store: ParameterStore, prefix: str, spec: MLPSpec, in_dim: int) -> None:
    d = in_dim
    for i, out_dim in enumerate(spec.layer_dims):
        store.add_weight(f"{prefix}/{i}/W", d, out_dim)
        store.add_bias(f"{prefix}/{i}/b", out_dim)
        d = out_dim


def mlp_param_count(spec: MLPSpec, in_dim: int) -> int:
    total, d = 0, in_dim
    for out_dim in spec.layer_dims:
        total += d * out_dim + out_dim
        d = out_dim
    return total


def mlp_forward(tape: Tape, store: ParameterStore, prefix: str, spec: MLPSpec, x: int) -> int:
    h = x
    last = len(spec.layer_dims) - 1
    for i in range(len(spec.layer_dims)):
        w = tape.parameter(f"{prefix}/{i}/W", store[f"{prefix}/{i}/W"])
        b = tape.parameter(f"{prefix}/{i}/b", store[f"{prefix}/{i}/b"])
        h = tape.add(tape.matmul(h, w), b)
        act = spec.final_activation if i == last else "relu"
        if act == "relu":
            h = tape.relu(h)
        elif act == "sigmoid":
            h = tape.sigmoid(h)
    return h


# ---------------------------------------------------------------------------
# embeddings


@dataclass(frozen=True)
class EmbeddingTable:
    name: str
    vocab_size: int
    dim: int


def embed_single(tape: Tape, store: ParameterStore, table: EmbeddingTable,
                 indices: np.ndarray) -> int:
    """Lookup of one index per example; unknown indices map to row 0."""
    idx = np.asarray(indices, dtype=np.int64)
    bad = (idx < 0) | (idx >= table.vocab_size)
    if bad.any():
        oov_events[table.name] += int(bad.sum())
        idx = np.where(bad, 0, idx)
    rows = tape.parameter(table.name, store[table.name])
    return tape.lookup_rows(rows, idx)


def embed_multi(tape: Tape, store: ParameterStore, table: EmbeddingTable,
                pool_matrix: np.ndarray) -> int:
    """Mean-pooled lookup for multi-valued fields via a constant pooling matrix.

    ``pool_matrix`` is [batch x vocab] with each row summing to 1 (weight 1/n
    on each of the example's n values); the matmul adjoint distributes the
    gradient onto exactly the pooled rows.
    """
    if pool_matrix.shape[1] != table.vocab_size:
        raise ShapeError(f"pool matrix width {pool_matrix.shape[1]} != vocab "
                         f"{table.vocab_size} for '{table.name}'")
    rows = tape.parameter(table.name, store[table.name])
    return tape.matmul(tape.constant(pool_matrix), rows)


def embed_and_concat(tape: Tape, store: ParameterStore, fields) -> int:
    """Concatenate per-field embeddings in field order.

    ``fields`` is a sequence of (EmbeddingTable, payload) where the payload is
    an index array for single-valued fields or a pooling matrix for
    multi-valued ones.
    """
    outs = []
    batch = None
    for table, payload in fields:
        payload = np.asarray(payload)
        n = payload.shape[0]
        if batch is None:
            batch = n
        elif n != batch:
            raise ShapeError(f"field '{table.name}' batch {n} != {batch}")
        if payload.ndim == 1:
            outs.append(embed_single(tape, store, table, payload))
        else:
            outs.append(embed_multi(tape, store, table, payload))
    if len(outs) == 1:
        return outs[0]
    return tape.concat_cols(outs)


# ---------------------------------------------------------------------------
# attention


def scaled_dot_attention(tape: Tape, q: int, k: int, v: int) -> int:
    """row_softmax(Q K^T / sqrt(d0)) V for Q,K,V of shape [rows x d0]."""
    qv, kv, vv = tape.value(q), tape.value(k), tape.value(v)
    if not (qv.ndim == kv.ndim == vv.ndim == 2) or len({qv.shape[1], kv.shape[1], vv.shape[1]}) != 1:
        raise ShapeError(f"attention expects matching [rows x d0] matrices, got "
                         f"{qv.shape}, {kv.shape}, {vv.shape}")
    d0 = qv.shape[1]
    scores = tape.scale(tape.matmul(q, tape.transpose(k)), 1.0 / np.sqrt(d0))
    return tape.matmul(tape.row_softmax(scores), v)


# ---------------------------------------------------------------------------
# losses


def task_loss(tape: Tape, kind: str, pred: int, label: np.ndarray) -> int:
    """Mean-reduced per-task loss; the training loss is the plain sum of these."""
    y = np.asarray(label, dtype=float).reshape(-1, 1)
    pv = tape.value(pred)
    if pv.shape != y.shape:
        raise ShapeError(f"loss '{kind}': pred {pv.shape} vs label {y.shape}")
    if kind == "binary_cross_entropy":
        if not np.isin(y, (0.0, 1.0)).all():
            raise ValueError("binary_cross_entropy labels must be in {0, 1}")
        yc = tape.constant(y)
        one = tape.constant(np.ones_like(y))
        p = tape.clip(pred, 1e-7, 1.0 - 1e-7)
        pos = tape.hadamard(yc, tape.log(p))
        neg = tape.hadamard(tape.subtract(one, yc), tape.log(tape.subtract(one, p)))
        return tape.scale(tape.reduce_mean(tape.add(pos, neg)), -1.0)
    if kind == "squared_error":
        diff = tape.subtract(pred, tape.constant(y))
        return tape.reduce_mean(tape.square(diff))
    raise ValueError(f"unknown loss kind '{kind}'")


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(state: AdamState, params: ParameterStore, grads: dict[str, np.ndarray]) -> None:
    """Standard bias-corrected Adam update, in place."""
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name in params.names():
        if name in params.frozen:
            continue
        if name not in grads:
            raise MissingGradientError(
                f"parameter '{name}' has no gradient; freeze it explicitly if intended")
        g = grads[name]
        theta = params[name]
        if g.shape != theta.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {theta.shape} "
                             f"for '{name}'")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(theta)
        v = state.v.get(name)
        if v is None:
            v = state.v[name] = np.zeros_like(theta)
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        theta -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def grads_by_name(tape: Tape, gmap: GradientMap) -> dict[str, np.ndarray]:
    return tape.param_grads(gmap)
