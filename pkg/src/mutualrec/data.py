"""Dataset ingestion, label derivation, negative augmentation, splitting,
and batching.

Three dataset kinds are supported:

* ``ml1m``        -- the MovieLens-1M rating files ("::"-delimited), joined
                     with user and movie side features.  Tasks: `positive`
                     (rating >= 4, classification) and `rating` (regression).
* ``electronics`` -- a generic delimited interaction log (user,item,rating
                     [,timestamp[,category]]).  After negative augmentation
                     the tasks are `rated` (does a rating exist) and
                     `positive` (rating >= 4), both classification.
* ``synthetic``   -- a generated corpus whose labels come from a known
                     additive user+item score, used for fast end-to-end
                     checks; same task pair as ``ml1m``.

Examples are stored columnarly in :class:`ExampleBlock` (still a
``Sequence[LabeledExample]``), split 8:1:1 by a seeded permutation, and
batched with a per-epoch reshuffle keyed by (seed, epoch).  Feature index 0
is reserved for unknown values in every vocabulary.
"""

from __future__ import annotations

import hashlib
import json
import logging
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

DATASET_KINDS = ("ml1m", "electronics", "synthetic")
CACHE_VERSION = 1


@dataclass(frozen=True)
class FieldSpec:
    """One categorical feature field; multi-valued fields are mean-pooled."""

    name: str
    vocab_size: int  # including the reserved unknown index 0
    multi: bool = False


@dataclass(frozen=True)
class TaskSpec:
    name: str
    kind: str  # classification | regression

    def __post_init__(self):
        if self.kind not in ("classification", "regression"):
            raise ValueError(f"unknown task kind {self.kind!r}")


@dataclass(frozen=True)
class InteractionRecord:
    """One raw user-item event; rating 0 marks a synthesized negative."""

    user_id: str
    item_id: str
    rating: int
    timestamp: int | None = None
    features: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.user_id or not self.item_id:
            raise ValueError("user_id and item_id must be non-empty")
        if self.rating not in (0, 1, 2, 3, 4, 5):
            raise ValueError(f"rating must be an integer in 0..5, got {self.rating!r}")


@dataclass(frozen=True)
class LabeledExample:
    features: dict
    labels: tuple


class ExampleBlock(Sequence):
    """Columnar store of labeled examples.

    `columns[name]` is an int64 index array for single-valued fields and a
    list of index tuples for multi-valued ones; `labels` is [n x num_tasks].
    """

    def __init__(self, fields, columns, labels):
        self.fields = tuple(fields)
        self.columns = columns
        self.labels = np.asarray(labels, dtype=np.float64)
        n = self.labels.shape[0]
        for spec in self.fields:
            if len(columns[spec.name]) != n:
                raise ValueError(f"column '{spec.name}' length != {n}")

    def __len__(self):
        return self.labels.shape[0]

    def __getitem__(self, i):
        if not isinstance(i, (int, np.integer)):
            raise TypeError("ExampleBlock supports integer indexing; use take() for slices")
        feats = {}
        for spec in self.fields:
            col = self.columns[spec.name]
            feats[spec.name] = tuple(col[i]) if spec.multi else int(col[i])
        return LabeledExample(feats, tuple(self.labels[i]))

    def take(self, indices) -> "ExampleBlock":
        idx = np.asarray(indices, dtype=np.int64)
        columns = {}
        for spec in self.fields:
            col = self.columns[spec.name]
            columns[spec.name] = [col[i] for i in idx] if spec.multi else col[idx]
        return ExampleBlock(self.fields, columns, self.labels[idx])


@dataclass(frozen=True)
class Dataset:
    kind: str
    fields: tuple
    tasks: tuple
    examples: ExampleBlock


@dataclass(frozen=True)
class DatasetSplit:
    dataset: Dataset
    train: ExampleBlock
    validation: ExampleBlock
    test: ExampleBlock
    seed: int
    part_indices: dict  # part name -> indices into dataset.examples

    @property
    def fields(self):
        return self.dataset.fields

    @property
    def tasks(self):
        return self.dataset.tasks


# ---------------------------------------------------------------------------
# parsing


def _read_delimited(path, delimiter, min_fields, parse_line, what):
    """Shared malformed-line accounting: skip bad lines, abort above 1%."""
    rows, bad = [], 0
    with open(path, encoding="latin-1") as handle:
        for line in handle:
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split(delimiter)
            if len(parts) < min_fields:
                bad += 1
                continue
            try:
                rows.append(parse_line(parts))
            except (ValueError, KeyError):
                bad += 1
    total = len(rows) + bad
    if total and bad / total > 0.01:
        raise ValueError(f"{what}: {bad}/{total} malformed lines exceeds the 1% budget")
    if bad:
        log.warning("%s: skipped %d malformed lines", what, bad)
    return rows


def parse_movielens(ratings_path, users_path, movies_path):
    """Join the three MovieLens-1M files into interaction records."""
    users = dict(_read_delimited(
        users_path, "::", 4,
        lambda p: (p[0], {"gender": p[1], "age": p[2], "occupation": p[3]}),
        "users"))
    movies = dict(_read_delimited(
        movies_path, "::", 3,
        lambda p: (p[0], tuple(g for g in p[2].split("|") if g)),
        "movies"))

    def parse_rating(parts):
        user, item, rating = parts[0], parts[1], int(parts[2])
        side = users[user]  # KeyError on unknown ids counts as malformed
        return InteractionRecord(
            user_id=user, item_id=item, rating=rating,
            timestamp=int(parts[3]) if len(parts) > 3 else None,
            features={**side, "genres": movies[item]})

    return _read_delimited(ratings_path, "::", 3, parse_rating, "ratings")


def parse_interactions(path, delimiter=","):
    """Generic interaction log: user,item,rating[,timestamp[,category]]."""

    def parse_line(parts):
        features = {}
        if len(parts) > 4 and parts[4]:
            features["category"] = parts[4]
        return InteractionRecord(
            user_id=parts[0], item_id=parts[1], rating=int(float(parts[2])),
            timestamp=int(float(parts[3])) if len(parts) > 3 and parts[3] else None,
            features=features)

    return _read_delimited(path, delimiter, 3, parse_line, "interactions")


# ---------------------------------------------------------------------------
# negative augmentation


def augment_negatives(records, seed):
    """Balance each user's rated items with sampled never-rated ones.

    For a user with n rated items, n distinct items the user never rated are
    drawn uniformly (rating 0); users who rated nearly everything get as
    many negatives as remain available, with a warning.  Deterministic per
    seed: users are processed in sorted order with one generator.
    """
    all_items = sorted({r.item_id for r in records})
    item_features = {}
    for r in records:
        item_features.setdefault(r.item_id, r.features.get("category"))
    by_user: dict[str, set] = {}
    for r in records:
        by_user.setdefault(r.user_id, set()).add(r.item_id)

    rng = np.random.default_rng(np.random.SeedSequence([int(seed)]))
    out = list(records)
    for user in sorted(by_user):
        rated = by_user[user]
        candidates = [i for i in all_items if i not in rated]
        want = len(rated)
        if want > len(candidates):
            log.warning("user %s rated %d of %d items; only %d negatives available",
                        user, len(rated), len(all_items), len(candidates))
            want = len(candidates)
        chosen = rng.choice(len(candidates), size=want, replace=False) if want else []
        for ci in sorted(int(c) for c in chosen):
            item = candidates[ci]
            features = {}
            if item_features.get(item) is not None:
                features["category"] = item_features[item]
            out.append(InteractionRecord(user_id=user, item_id=item, rating=0,
                                         features=features))
    return out


# ---------------------------------------------------------------------------
# labeling


_FIELD_LAYOUT = {
    "ml1m": (("user", False), ("item", False), ("gender", False), ("age", False),
             ("occupation", False), ("genres", True)),
    "electronics": (("user", False), ("item", False)),
    "synthetic": (("user", False), ("item", False)),
}

_TASKS = {
    "ml1m": (TaskSpec("positive", "classification"), TaskSpec("rating", "regression")),
    "electronics": (TaskSpec("rated", "classification"), TaskSpec("positive", "classification")),
    "synthetic": (TaskSpec("positive", "classification"), TaskSpec("rating", "regression")),
}


def _raw_values(record, name):
    if name == "user":
        return (record.user_id,)
    if name == "item":
        return (record.item_id,)
    value = record.features.get(name)
    if value is None:
        return ()
    return tuple(value) if isinstance(value, tuple) else (value,)


def _labels_for(record, kind):
    if kind in ("ml1m", "synthetic"):
        return (1.0 if record.rating >= 4 else 0.0, float(record.rating))
    # electronics: a synthesized negative has rating 0, i.e. no rating exists
    return (1.0 if record.rating > 0 else 0.0, 1.0 if record.rating >= 4 else 0.0)


def derive_labels(records, dataset_kind) -> Dataset:
    """Index every categorical field and attach the per-task label tuple.

    Vocabularies are built over the full record list (index 0 stays reserved
    for unknown values); value order is sorted for reproducibility.
    """
    if dataset_kind not in DATASET_KINDS:
        raise ValueError(f"unknown dataset kind {dataset_kind!r}")
    if not records:
        raise ValueError("no records to label")
    layout = _FIELD_LAYOUT[dataset_kind]
    if dataset_kind == "electronics" and any("category" in r.features for r in records):
        layout = layout + (("category", False),)

    vocabs = {}
    for name, _multi in layout:
        values = sorted({v for r in records for v in _raw_values(r, name)})
        vocabs[name] = {v: i + 1 for i, v in enumerate(values)}

    fields = tuple(FieldSpec(name, len(vocabs[name]) + 1, multi)
                   for name, multi in layout)
    columns: dict = {}
    for spec in fields:
        vocab = vocabs[spec.name]
        if spec.multi:
            columns[spec.name] = [
                tuple(vocab.get(v, 0) for v in _raw_values(r, spec.name))
                for r in records]
        else:
            columns[spec.name] = np.array(
                [vocab.get(_raw_values(r, spec.name)[0], 0)
                 if _raw_values(r, spec.name) else 0
                 for r in records], dtype=np.int64)
    labels = np.array([_labels_for(r, dataset_kind) for r in records])
    block = ExampleBlock(fields, columns, labels)
    return Dataset(dataset_kind, fields, _TASKS[dataset_kind], block)


# ---------------------------------------------------------------------------
# splitting and batching


def split_dataset(dataset: Dataset, seed: int) -> DatasetSplit:
    """Permutation split into train/validation/test at 8:1:1."""
    n = len(dataset.examples)
    if n == 0:
        raise ValueError("cannot split an empty dataset")
    order = np.random.default_rng(np.random.SeedSequence([int(seed)])).permutation(n)
    n_train = round(0.8 * n)
    n_val = round(0.1 * n)
    parts = {"train": order[:n_train],
             "validation": order[n_train:n_train + n_val],
             "test": order[n_train + n_val:]}
    take = dataset.examples.take
    return DatasetSplit(dataset, train=take(parts["train"]),
                        validation=take(parts["validation"]),
                        test=take(parts["test"]), seed=int(seed),
                        part_indices=parts)


@dataclass(frozen=True)
class Batch:
    """Model-ready slice: index arrays for single-valued fields, mean-pool
    matrices [B x vocab] for multi-valued ones."""

    features: dict
    labels: np.ndarray

    @property
    def size(self):
        return self.labels.shape[0]


def make_batch(block: ExampleBlock, indices) -> Batch:
    idx = np.asarray(indices, dtype=np.int64)
    features = {}
    for spec in block.fields:
        col = block.columns[spec.name]
        if not spec.multi:
            features[spec.name] = col[idx]
            continue
        pool = np.zeros((idx.size, spec.vocab_size))
        for row, i in enumerate(idx):
            values = col[i] or (0,)  # empty set pools the unknown row
            for v in values:
                pool[row, v] += 1.0 / len(values)
        features[spec.name] = pool
    return Batch(features, block.labels[idx])


def batch_iterator(block: ExampleBlock, batch_size: int = 512, seed: int = 0,
                   epoch: int = 0, shuffle: bool = True):
    """Yield batches; the order is a permutation keyed by (seed, epoch)."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(block)
    if shuffle:
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(epoch)]))
        order = rng.permutation(n)
    else:
        order = np.arange(n)
    for start in range(0, n, batch_size):
        yield make_batch(block, order[start:start + batch_size])


# ---------------------------------------------------------------------------
# synthetic corpus


def synthetic_dataset(num_examples: int = 1000, seed: int = 0,
                      num_users: int = 50, num_items: int = 100):
    """Interactions whose rating is a clipped affine map of a known additive
    score u_eff[user] + i_eff[item].

    Pairs whose score falls near the positive-label boundary (rating 3.5)
    are rejected, so the classification task is cleanly separable and fast
    end-to-end runs can demand high AUC.
    """
    rng = np.random.default_rng(np.random.SeedSequence([int(seed)]))
    u_eff = rng.normal(size=num_users)
    i_eff = rng.normal(size=num_items)
    boundary = 0.5 / 1.2  # score at which 3 + 1.2*score crosses rating 3.5
    records, seen = [], set()
    while len(records) < num_examples:
        u = int(rng.integers(num_users))
        i = int(rng.integers(num_items))
        if (u, i) in seen:
            continue
        score = u_eff[u] + i_eff[i]
        if abs(score - boundary) < 0.3:
            continue
        seen.add((u, i))
        rating = int(np.clip(round(3.0 + 1.2 * score), 1, 5))
        records.append(InteractionRecord(user_id=f"u{u}", item_id=f"i{i}",
                                         rating=rating))
    return records


# ---------------------------------------------------------------------------
# processed-split cache


def _content_hash(block: ExampleBlock) -> str:
    digest = hashlib.sha256()
    for spec in block.fields:
        digest.update(spec.name.encode())
        col = block.columns[spec.name]
        if spec.multi:
            for row in col:
                digest.update(np.asarray(row, dtype=np.int64).tobytes())
                digest.update(b";")
        else:
            digest.update(np.ascontiguousarray(col).tobytes())
    digest.update(np.ascontiguousarray(block.labels).tobytes())
    return digest.hexdigest()


def _flatten_multi(col):
    values = np.concatenate([np.asarray(row, dtype=np.int64) for row in col]) \
        if col else np.zeros(0, dtype=np.int64)
    offsets = np.zeros(len(col) + 1, dtype=np.int64)
    np.cumsum([len(row) for row in col], out=offsets[1:])
    return values, offsets


def _unflatten_multi(values, offsets):
    return [tuple(int(v) for v in values[offsets[i]:offsets[i + 1]])
            for i in range(offsets.size - 1)]


def save_split(split: DatasetSplit, path) -> None:
    """Versioned binary dump of a processed dataset and its 8:1:1 split."""
    dataset = split.dataset
    block = dataset.examples
    arrays = {"labels": block.labels}
    for spec in dataset.fields:
        col = block.columns[spec.name]
        if spec.multi:
            values, offsets = _flatten_multi(col)
            arrays[f"multi_values/{spec.name}"] = values
            arrays[f"multi_offsets/{spec.name}"] = offsets
        else:
            arrays[f"col/{spec.name}"] = col
    for part_name, idx in split.part_indices.items():
        arrays[f"part/{part_name}"] = np.asarray(idx, dtype=np.int64)
    meta = json.dumps({
        "version": CACHE_VERSION,
        "kind": dataset.kind,
        "seed": split.seed,
        "fields": [(s.name, s.vocab_size, s.multi) for s in dataset.fields],
        "tasks": [(t.name, t.kind) for t in dataset.tasks],
        "content_hash": _content_hash(block),
        "total": len(block),
    })
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, __meta__=np.frombuffer(meta.encode(), dtype=np.uint8), **arrays)


def load_split(path) -> DatasetSplit:
    with np.load(path) as z:
        meta = json.loads(bytes(z["__meta__"]).decode())
        if meta["version"] != CACHE_VERSION:
            raise ValueError(f"unsupported cache version {meta['version']}")
        fields = tuple(FieldSpec(n, v, m) for n, v, m in meta["fields"])
        tasks = tuple(TaskSpec(n, k) for n, k in meta["tasks"])
        columns: dict = {}
        for spec in fields:
            if spec.multi:
                columns[spec.name] = _unflatten_multi(
                    z[f"multi_values/{spec.name}"], z[f"multi_offsets/{spec.name}"])
            else:
                columns[spec.name] = z[f"col/{spec.name}"]
        block = ExampleBlock(fields, columns, z["labels"])
        if _content_hash(block) != meta["content_hash"]:
            raise ValueError("cache content hash mismatch; file corrupted or stale")
        dataset = Dataset(meta["kind"], fields, tasks, block)
        parts = {name: z[f"part/{name}"] for name in ("train", "validation", "test")}
        return DatasetSplit(dataset, train=block.take(parts["train"]),
                            validation=block.take(parts["validation"]),
                            test=block.take(parts["test"]),
                            seed=meta["seed"], part_indices=parts)
