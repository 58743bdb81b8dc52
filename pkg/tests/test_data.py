import numpy as np
import pytest

from mutualrec.data import (
    DATASET_KINDS,
    Dataset,
    ExampleBlock,
    FieldSpec,
    InteractionRecord,
    TaskSpec,
    augment_negatives,
    batch_iterator,
    derive_labels,
    load_split,
    make_batch,
    parse_interactions,
    parse_movielens,
    save_split,
    split_dataset,
    synthetic_dataset,
)

ML1M_USERS = """\
1::F::1::10::48067
2::M::56::16::70072
3::M::25::15::55117
"""

ML1M_MOVIES = """\
1193::One Flew Over the Cuckoo's Nest (1975)::Drama
2355::Bug's Life, A (1998)::Animation|Children's|Comedy
3408::Erin Brockovich (2000)::Drama|Thriller
"""

ML1M_RATINGS = """\
1::1193::5::978300760
1::2355::3::978824291
2::3408::4::978300275
3::1193::1::978301968
"""


def write_ml1m(tmp_path, ratings=ML1M_RATINGS):
    (tmp_path / "users.dat").write_text(ML1M_USERS)
    (tmp_path / "movies.dat").write_text(ML1M_MOVIES)
    (tmp_path / "ratings.dat").write_text(ratings)
    return (tmp_path / "ratings.dat", tmp_path / "users.dat", tmp_path / "movies.dat")


# ---------------------------------------------------------------------------
# parsing


def test_parse_movielens_basic(tmp_path):
    records = parse_movielens(*write_ml1m(tmp_path))
    assert len(records) == 4
    first = records[0]
    assert (first.user_id, first.item_id, first.rating) == ("1", "1193", 5)
    assert first.timestamp == 978300760
    assert first.features["gender"] == "F"
    assert first.features["genres"] == ("Drama",)


def test_parse_movielens_multivalued_genres(tmp_path):
    records = parse_movielens(*write_ml1m(tmp_path))
    buglife = next(r for r in records if r.item_id == "2355")
    assert buglife.features["genres"] == ("Animation", "Children's", "Comedy")


def test_parse_movielens_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        parse_movielens(tmp_path / "nope.dat", tmp_path / "users.dat",
                        tmp_path / "movies.dat")


def test_parse_movielens_skips_rare_malformed_lines(tmp_path):
    good = "".join(f"{1 + i % 3}::1193::{1 + i % 5}::97830{i:04d}\n" for i in range(200))
    records = parse_movielens(*write_ml1m(tmp_path, ratings=good + "oops\n"))
    assert len(records) == 200


def test_parse_movielens_aborts_on_many_malformed_lines(tmp_path):
    bad = ML1M_RATINGS + "broken line\nanother bad\n"
    with pytest.raises(ValueError, match="1%"):
        parse_movielens(*write_ml1m(tmp_path, ratings=bad))


def test_parse_movielens_unknown_user_is_malformed(tmp_path):
    many = "".join(f"1::1193::5::97830{i:04d}\n" for i in range(200))
    paths = write_ml1m(tmp_path, ratings=many + "999::1193::5::978300000\n")
    assert len(parse_movielens(*paths)) == 200


def test_parse_interactions_with_and_without_extras(tmp_path):
    path = tmp_path / "inter.csv"
    path.write_text("u1,i1,5.0,1234567890\nu2,i2,3,,\nu3,i3,4,1111,Laptops\n")
    records = parse_interactions(path)
    assert [(r.user_id, r.rating, r.timestamp) for r in records] == [
        ("u1", 5, 1234567890), ("u2", 3, None), ("u3", 4, 1111)]
    assert records[2].features == {"category": "Laptops"}
    assert records[0].features == {}


def test_record_validation():
    with pytest.raises(ValueError):
        InteractionRecord("", "i", 3)
    with pytest.raises(ValueError):
        InteractionRecord("u", "i", 7)


# ---------------------------------------------------------------------------
# labeling


def test_ml1m_labels_follow_rating_threshold(tmp_path):
    dataset = derive_labels(parse_movielens(*write_ml1m(tmp_path)), "ml1m")
    assert [t.name for t in dataset.tasks] == ["positive", "rating"]
    assert [t.kind for t in dataset.tasks] == ["classification", "regression"]
    by_rating = dict(zip([e.labels[1] for e in dataset.examples],
                         [e.labels[0] for e in dataset.examples]))
    assert by_rating == {5.0: 1.0, 3.0: 0.0, 4.0: 1.0, 1.0: 0.0}
    for example in dataset.examples:
        assert example.labels[0] == (1.0 if example.labels[1] >= 4 else 0.0)


def test_ml1m_feature_indices_in_vocab(tmp_path):
    dataset = derive_labels(parse_movielens(*write_ml1m(tmp_path)), "ml1m")
    specs = {s.name: s for s in dataset.fields}
    assert set(specs) == {"user", "item", "gender", "age", "occupation", "genres"}
    assert specs["genres"].multi
    for example in dataset.examples:
        for name, value in example.features.items():
            values = value if specs[name].multi else (value,)
            for v in values:
                assert 1 <= v < specs[name].vocab_size  # 0 stays reserved
    buglife = next(e for e in dataset.examples if e.labels[1] == 3.0)
    assert len(buglife.features["genres"]) == 3


def test_electronics_labels(tmp_path):
    records = [InteractionRecord("u1", "i1", 5), InteractionRecord("u1", "i2", 3),
               InteractionRecord("u2", "i1", 0)]
    dataset = derive_labels(records, "electronics")
    assert [t.name for t in dataset.tasks] == ["rated", "positive"]
    assert dataset.examples[0].labels == (1.0, 1.0)
    assert dataset.examples[1].labels == (1.0, 0.0)
    assert dataset.examples[2].labels == (0.0, 0.0)
    for e in dataset.examples:
        assert e.labels[1] <= e.labels[0]  # positive implies rated


def test_unknown_dataset_kind():
    with pytest.raises(ValueError):
        derive_labels([InteractionRecord("u", "i", 3)], "books")


# ---------------------------------------------------------------------------
# negative augmentation


def elec_records():
    return [InteractionRecord("u1", f"i{j}", 4 + (j % 2)) for j in range(3)] + \
           [InteractionRecord("u2", "i0", 5)] + \
           [InteractionRecord("u3", f"i{j}", 3) for j in range(10)]


def test_augment_adds_one_negative_per_positive():
    out = augment_negatives(elec_records(), seed=0)
    by_user = {}
    for r in out:
        by_user.setdefault(r.user_id, []).append(r)
    assert sum(1 for r in by_user["u1"] if r.rating == 0) == 3
    assert sum(1 for r in by_user["u2"] if r.rating == 0) == 1
    for user, rows in by_user.items():
        rated = {r.item_id for r in rows if r.rating > 0}
        for r in rows:
            if r.rating == 0:
                assert r.item_id not in rated
        negatives = [r.item_id for r in rows if r.rating == 0]
        assert len(negatives) == len(set(negatives))


def test_augment_exhausted_user_gets_fewer(caplog):
    # u3 rated all 10 items: no negatives remain for them
    out = augment_negatives(elec_records(), seed=1)
    u3 = [r for r in out if r.user_id == "u3" and r.rating == 0]
    assert u3 == []


def test_augment_is_deterministic():
    a = augment_negatives(elec_records(), seed=7)
    b = augment_negatives(elec_records(), seed=7)
    assert [(r.user_id, r.item_id, r.rating) for r in a] == \
           [(r.user_id, r.item_id, r.rating) for r in b]
    c = augment_negatives([InteractionRecord(f"u{i}", f"i{i % 40}", 5)
                           for i in range(40)], seed=8)
    d = augment_negatives([InteractionRecord(f"u{i}", f"i{i % 40}", 5)
                           for i in range(40)], seed=9)
    assert [(r.user_id, r.item_id) for r in c] != [(r.user_id, r.item_id) for r in d]


def test_augment_doubles_counts_when_items_abound():
    records = [InteractionRecord(f"u{i}", f"i{j}", 5)
               for i in range(5) for j in range(i + 1)]
    out = augment_negatives(records + [InteractionRecord("u9", f"i{j}", 1)
                                       for j in range(20)], seed=3)
    for i in range(5):
        rows = [r for r in out if r.user_id == f"u{i}"]
        assert len(rows) == 2 * (i + 1)


# ---------------------------------------------------------------------------
# splitting


def block_of(n, seed=0):
    rng = np.random.default_rng(seed)
    records = [InteractionRecord(f"u{rng.integers(20)}", f"i{rng.integers(30)}",
                                 int(rng.integers(1, 6))) for _ in range(n)]
    return derive_labels(records, "synthetic")


def test_split_sizes_8_1_1():
    split = split_dataset(block_of(10), seed=0)
    assert (len(split.train), len(split.validation), len(split.test)) == (8, 1, 1)
    split2 = split_dataset(block_of(1005), seed=0)
    sizes = (len(split2.train), len(split2.validation), len(split2.test))
    assert sum(sizes) == 1005
    assert abs(sizes[0] - 804) <= 1 and abs(sizes[1] - 100.5) <= 1 and abs(sizes[2] - 100.5) <= 1


def test_split_is_deterministic_and_covering():
    dataset = block_of(100)
    a = split_dataset(dataset, seed=5)
    b = split_dataset(dataset, seed=5)
    for part in ("train", "validation", "test"):
        np.testing.assert_array_equal(a.part_indices[part], b.part_indices[part])
    combined = np.concatenate([a.part_indices[p] for p in ("train", "validation", "test")])
    assert sorted(combined) == list(range(100))


def test_split_varies_with_seed():
    dataset = block_of(100)
    differing = 0
    for s in range(10):
        a = split_dataset(dataset, seed=2 * s)
        b = split_dataset(dataset, seed=2 * s + 1)
        if not np.array_equal(a.part_indices["train"], b.part_indices["train"]):
            differing += 1
    assert differing == 10


# ---------------------------------------------------------------------------
# batching


def test_batch_sizes_with_short_tail():
    block = block_of(1030).examples
    sizes = [b.size for b in batch_iterator(block, batch_size=512, seed=0, epoch=0)]
    assert sizes == [512, 512, 6]


def test_batch_order_changes_across_epochs_not_within():
    block = block_of(200).examples

    def order(epoch):
        return np.concatenate([b.features["user"] for b in
                               batch_iterator(block, 64, seed=3, epoch=epoch)])

    assert not np.array_equal(order(0), order(1))
    np.testing.assert_array_equal(order(0), order(0))


def test_batch_unshuffled_preserves_example_alignment():
    dataset = block_of(50)
    block = dataset.examples
    batches = list(batch_iterator(block, 16, shuffle=False))
    users = np.concatenate([b.features["user"] for b in batches])
    labels = np.concatenate([b.labels for b in batches])
    np.testing.assert_array_equal(users, block.columns["user"])
    np.testing.assert_array_equal(labels, block.labels)


def test_multi_field_mean_pooling(tmp_path):
    dataset = derive_labels(parse_movielens(*write_ml1m(tmp_path)), "ml1m")
    block = dataset.examples
    batch = make_batch(block, np.arange(len(block)))
    genres = {s.name: s for s in dataset.fields}["genres"]
    pool = batch.features["genres"]
    assert pool.shape == (4, genres.vocab_size)
    np.testing.assert_allclose(pool.sum(axis=1), np.ones(4), atol=1e-12)
    multi_row = next(i for i in range(len(block))
                     if len(block.columns["genres"][i]) == 3)
    row = pool[multi_row]
    assert sorted(row[row > 0]) == pytest.approx([1 / 3, 1 / 3, 1 / 3])


# ---------------------------------------------------------------------------
# synthetic corpus


def test_synthetic_is_deterministic_and_labeled_by_threshold():
    a = synthetic_dataset(500, seed=4)
    b = synthetic_dataset(500, seed=4)
    assert [(r.user_id, r.item_id, r.rating) for r in a] == \
           [(r.user_id, r.item_id, r.rating) for r in b]
    assert len(a) == 500
    assert len({(r.user_id, r.item_id) for r in a}) == 500
    assert all(1 <= r.rating <= 5 for r in a)
    dataset = derive_labels(a, "synthetic")
    for e in dataset.examples:
        assert e.labels[0] == (1.0 if e.labels[1] >= 4 else 0.0)
    positives = sum(e.labels[0] for e in dataset.examples)
    assert 50 < positives < 450  # both classes well represented


# ---------------------------------------------------------------------------
# cache


def test_cache_round_trip(tmp_path):
    dataset = block_of(120)
    split = split_dataset(dataset, seed=11)
    path = tmp_path / "cache.npz"
    save_split(split, path)
    loaded = load_split(path)
    assert loaded.dataset.kind == dataset.kind
    assert loaded.fields == dataset.fields
    assert loaded.tasks == dataset.tasks
    assert loaded.seed == 11
    np.testing.assert_array_equal(loaded.dataset.examples.labels,
                                  dataset.examples.labels)
    for part in ("train", "validation", "test"):
        np.testing.assert_array_equal(loaded.part_indices[part],
                                      split.part_indices[part])
    np.testing.assert_array_equal(loaded.train.columns["user"],
                                  split.train.columns["user"])


def test_cache_rejects_corruption(tmp_path):
    split = split_dataset(block_of(60), seed=1)
    path = tmp_path / "cache.npz"
    save_split(split, path)
    with np.load(path) as z:
        arrays = {k: z[k] for k in z.files}
    arrays["labels"] = arrays["labels"] + 1.0
    np.savez(path, **arrays)
    with pytest.raises(ValueError, match="hash"):
        load_split(path)


def test_cache_rejects_other_versions(tmp_path, monkeypatch):
    split = split_dataset(block_of(30), seed=2)
    path = tmp_path / "cache.npz"
    monkeypatch.setattr("mutualrec.data.CACHE_VERSION", 99)
    save_split(split, path)
    monkeypatch.undo()
    with pytest.raises(ValueError, match="version"):
        load_split(path)


# ---------------------------------------------------------------------------
# ExampleBlock contract


def test_example_block_sequence_protocol():
    dataset = block_of(10)
    block = dataset.examples
    assert len(block) == 10
    example = block[3]
    assert set(example.features) == {"user", "item"}
    assert len(example.labels) == 2
    taken = block.take([3, 3, 7])
    assert len(taken) == 3
    assert taken[0] == block[3] and taken[2] == block[7]
    with pytest.raises(TypeError):
        block[1:3]
