import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import chisquare

from modest.data import (DROPPED, TEST, TRAIN, VALID, FeatureStore, InteractionDataset, from_pairs,
                         load_feature_store, load_interactions, min_core, random_split,
                         read_features_binary, sample_negative, sample_negatives, save_interactions,
                         split_counts, write_features_binary, write_features_tsv)
from modest.errors import DataError, EmptyDatasetError, NoNegativeError, ParseError


def write(tmp_path, text, name="inter.tsv"):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


def test_load_counts(tmp_path):
    ds = load_interactions(write(tmp_path, "u1\ti1\nu1\ti2\nu2\ti1\n"))
    assert (ds.num_users, ds.num_items, len(ds)) == (2, 2, 3)
    assert ds.user_ids == ("u1", "u2") and ds.item_ids == ("i1", "i2")
    assert ds.users.tolist() == [0, 0, 1] and ds.items.tolist() == [0, 1, 0]


def test_duplicates_dedup_or_error(tmp_path, caplog):
    p = write(tmp_path, "u1\ti1\nu1\ti1\nu2\ti1\n")
    with caplog.at_level(logging.WARNING):
        ds = load_interactions(p)
    assert len(ds) == 2
    assert "duplicate" in caplog.text
    with pytest.raises(DataError):
        load_interactions(p, dedup=False)


def test_parse_error_has_line_number(tmp_path):
    p = write(tmp_path, "u1\ti1\nbroken-line\n")
    with pytest.raises(ParseError, match=":2:"):
        load_interactions(p)


def test_empty_file(tmp_path):
    with pytest.raises(EmptyDatasetError):
        load_interactions(write(tmp_path, "\n\n"))


def test_split_column_roundtrip(tmp_path, ds):
    p = tmp_path / "s.tsv"
    save_interactions(ds, p)
    back = load_interactions(p, item_order=list(ds.item_ids))
    assert np.array_equal(back.split, ds.split)
    assert back.user_ids == ds.user_ids and back.item_ids == ds.item_ids


def test_dataset_invariants():
    with pytest.raises(DataError):
        InteractionDataset(1, 2, np.array([0]), np.array([2]), np.array([0]), ("u",), ("a", "b"))
    with pytest.raises(DataError):
        InteractionDataset(1, 2, np.array([0, 0]), np.array([1, 1]), np.array([0, 0]), ("u",), ("a", "b"))


@pytest.mark.parametrize("k,expected", [(5, (4, 1, 0)), (6, (4, 1, 1)), (7, (5, 1, 1)),
                                        (8, (6, 1, 1)), (9, (7, 1, 1)), (10, (8, 1, 1))])
def test_split_counts_table(k, expected):
    assert split_counts(k) == expected


@given(st.integers(3, 200))
def test_split_counts_partition(k):
    tr, va, te = split_counts(k)
    assert tr + va + te == k and tr >= 1 and min(va, te) >= 0


def _dataset_from_degrees(degrees, num_items=60):
    rng = np.random.default_rng(0)
    pairs = [(f"u{u}", f"i{i}") for u, d in enumerate(degrees)
             for i in rng.choice(num_items, size=d, replace=False)]
    return from_pairs(pairs)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(3, 30), min_size=1, max_size=12), st.integers(0, 2**32 - 1))
def test_random_split_is_partition(degrees, seed):
    ds = _dataset_from_degrees(degrees)
    out = random_split(ds, seed=seed)
    assert np.array_equal(out.users, ds.users) and np.array_equal(out.items, ds.items)
    assert set(np.unique(out.split)) <= {TRAIN, VALID, TEST}
    for u, d in enumerate(degrees):
        tags = out.split[out.users == u]
        assert (np.sum(tags == TRAIN), np.sum(tags == VALID), np.sum(tags == TEST)) == split_counts(d)


def test_random_split_deterministic():
    ds = _dataset_from_degrees([10, 7, 5, 12])
    a, b = random_split(ds, seed=3), random_split(ds, seed=3)
    assert np.array_equal(a.split, b.split)


def test_small_user_kept_in_train(caplog):
    ds = _dataset_from_degrees([2, 10])
    with caplog.at_level(logging.WARNING):
        out = random_split(ds, seed=0)
    assert (out.split[out.users == 0] == TRAIN).all()
    assert "fewer than" in caplog.text


def test_bad_ratios():
    with pytest.raises(ValueError):
        random_split(_dataset_from_degrees([5]), ratios=(0.5, 0.1, 0.1))


def test_reindex_bijection(ds):
    for u, uid in enumerate(ds.user_ids):
        assert ds.user_index[uid] == u
    for i, iid in enumerate(ds.item_ids):
        assert ds.item_index[iid] == i


def test_negative_forced_complement():
    ds = from_pairs([("u", "a"), ("u", "b"), ("v", "c")])
    rng = np.random.default_rng(0)
    assert all(sample_negative(ds, 0, rng) == 2 for _ in range(50))


def test_negative_no_complement():
    ds = from_pairs([("u", "a"), ("u", "b")])
    with pytest.raises(NoNegativeError):
        sample_negative(ds, 0, np.random.default_rng(0))


def test_negative_uniform_chi2():
    pairs = [("u", f"i{i}") for i in range(5)] + [("v", f"i{i}") for i in range(5, 1000)]
    ds = from_pairs(pairs)
    draws = sample_negatives(ds, np.zeros(100_000, dtype=np.int64), np.random.default_rng(42))
    assert not np.isin(draws, np.arange(5)).any()
    counts = np.bincount(draws, minlength=1000)[5:]
    assert chisquare(counts).pvalue > 0.01


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["all", "train"]))
def test_negatives_never_collide(seed, exclude):
    ds = random_split(_dataset_from_degrees([20, 30, 50, 8], num_items=60), seed=seed)
    users = np.repeat(np.arange(ds.num_users), 200)
    neg = sample_negatives(ds, users, np.random.default_rng(seed), exclude)
    splits = (TRAIN, VALID, TEST, DROPPED) if exclude == "all" else (TRAIN,)
    known = set(zip(*ds.pairs(*splits)))
    assert not any((int(u), int(i)) in known for u, i in zip(users, neg))


def test_dropped_rows_stay_excluded():
    ds = from_pairs([("u", "a"), ("u", "b"), ("v", "c")], tags=["train", "dropped", "train"])
    rng = np.random.default_rng(0)
    assert set(sample_negatives(ds, np.zeros(100, dtype=np.int64), rng).tolist()) == {2}


def test_min_core():
    ds = from_pairs([("u1", "a"), ("u1", "b"), ("u2", "a"), ("u2", "b"), ("u3", "c")])
    out = min_core(ds, 2)
    assert out.num_users == 2 and out.num_items == 2 and len(out) == 4


# -- features ------------------------------------------------------------------

def test_binary_roundtrip(tmp_path):
    mat = np.random.default_rng(0).standard_normal((5, 3)).astype(np.float32)
    p = tmp_path / "f.mdft"
    write_features_binary(p, mat)
    raw = p.read_bytes()
    assert raw[:4] == b"MDFT" and len(raw) == 16 + 5 * 3 * 4
    assert np.array_equal(read_features_binary(p), mat.astype(np.float64))


def test_binary_truncated(tmp_path):
    p = tmp_path / "f.mdft"
    write_features_binary(p, np.ones((4, 2)))
    p.write_bytes(p.read_bytes()[:-4])
    with pytest.raises(DataError):
        read_features_binary(p)


def test_store_invariants():
    with pytest.raises(DataError):
        FeatureStore(("v",), (np.array([[np.nan]]),))
    with pytest.raises(DataError):
        FeatureStore(("v", "t"), (np.ones((3, 2)), np.ones((4, 2))))


def test_tsv_features_align_by_id(tmp_path):
    ds = from_pairs([("u", "b"), ("u", "a")])
    p = tmp_path / "v.tsv"
    write_features_tsv(p, ["a", "b"], np.array([[1.0, 2.0], [3.0, 4.0]]))
    store = load_feature_store({"v": p}, ds)
    assert store["v"].tolist() == [[3.0, 4.0], [1.0, 2.0]]


def test_missing_feature_file_names_modality(tmp_path):
    ds = from_pairs([("u", "a")])
    with pytest.raises(DataError, match="'t'"):
        load_feature_store({"t": tmp_path / "nope.mdft"}, ds)
