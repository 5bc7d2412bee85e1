"""Interaction and feature data: loading, splitting and negative sampling."""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataError, EmptyDatasetError, NoNegativeError, ParseError

logger = logging.getLogger(__name__)

TRAIN, VALID, TEST, DROPPED = 0, 1, 2, 3
SPLIT_NAMES = ("train", "valid", "test", "dropped")
SPLIT_CODES = {name: code for code, name in enumerate(SPLIT_NAMES)}

FEATURE_MAGIC = b"MDFT"
FEATURE_VERSION = 1


@dataclass(frozen=True, eq=False)
class InteractionDataset:
    """Users, items and positive interactions, each tagged with a split.

    ``users``/``items`` hold zero-based indices; ``user_ids``/``item_ids``
    map indices back to the external identifiers.
    """

    num_users: int
    num_items: int
    users: np.ndarray
    items: np.ndarray
    split: np.ndarray
    user_ids: tuple[str, ...]
    item_ids: tuple[str, ...]

    def __post_init__(self):
        for name in ("users", "items", "split"):
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.int64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if not (len(self.users) == len(self.items) == len(self.split)):
            raise DataError("users, items and split must have equal length")
        if len(self.user_ids) != self.num_users or len(self.item_ids) != self.num_items:
            raise DataError("id maps do not match num_users/num_items")
        if len(self.users):
            if self.users.min() < 0 or self.users.max() >= self.num_users:
                raise DataError("user index out of range")
            if self.items.min() < 0 or self.items.max() >= self.num_items:
                raise DataError("item index out of range")
            if self.split.min() < 0 or self.split.max() >= len(SPLIT_NAMES):
                raise DataError("unknown split code")
        if len(np.unique(self.keys)) != len(self.keys):
            raise DataError("duplicate (user, item) pairs")

    def __len__(self):
        return len(self.users)

    @cached_property
    def keys(self) -> np.ndarray:
        return self.users * self.num_items + self.items

    @cached_property
    def user_index(self) -> dict[str, int]:
        return {uid: k for k, uid in enumerate(self.user_ids)}

    @cached_property
    def item_index(self) -> dict[str, int]:
        return {iid: k for k, iid in enumerate(self.item_ids)}

    def mask(self, *splits: int) -> np.ndarray:
        return np.isin(self.split, splits)

    def pairs(self, *splits: int) -> tuple[np.ndarray, np.ndarray]:
        m = self.mask(*splits)
        return self.users[m], self.items[m]

    def user_items(self, *splits: int) -> list[np.ndarray]:
        """Per-user sorted item arrays restricted to `splits`."""
        u, i = self.pairs(*splits)
        order = np.lexsort((i, u))
        u, i = u[order], i[order]
        bounds = np.searchsorted(u, np.arange(self.num_users + 1))
        return [i[bounds[k]:bounds[k + 1]] for k in range(self.num_users)]

    @cached_property
    def sorted_keys_all(self) -> np.ndarray:
        # dropped rows are still observed interactions, so they stay excluded
        return np.sort(self.keys)

    @cached_property
    def sorted_keys_train(self) -> np.ndarray:
        return np.sort(self.keys[self.split == TRAIN])

    @cached_property
    def train_items(self) -> np.ndarray:
        """Items with at least one training interaction."""
        return np.unique(self.items[self.split == TRAIN])

    def with_split(self, split: np.ndarray) -> "InteractionDataset":
        return InteractionDataset(self.num_users, self.num_items, self.users, self.items,
                                  split, self.user_ids, self.item_ids)

    def counts(self) -> dict[str, int]:
        return {name: int((self.split == code).sum()) for code, name in enumerate(SPLIT_NAMES)}


def from_pairs(pairs: Sequence[tuple[str, str]], tags: Sequence[str] | None = None,
               item_order: Sequence[str] | None = None, dedup: bool = True,
               source: str = "<pairs>") -> InteractionDataset:
    """Build a dataset from (user_id, item_id) pairs in first-appearance order."""
    user_index: dict[str, int] = {}
    item_index: dict[str, int] = {}
    if item_order is not None:
        for iid in item_order:
            item_index.setdefault(iid, len(item_index))
    seen: set[tuple[int, int]] = set()
    users, items, split = [], [], []
    n_dups = 0
    for k, (uid, iid) in enumerate(pairs):
        u = user_index.setdefault(uid, len(user_index))
        if iid not in item_index:
            if item_order is not None:
                raise DataError(f"{source}: item {iid!r} not in the item list")
            item_index[iid] = len(item_index)
        i = item_index[iid]
        if (u, i) in seen:
            if not dedup:
                raise DataError(f"{source}: duplicate interaction ({uid}, {iid})")
            n_dups += 1
            continue
        seen.add((u, i))
        users.append(u)
        items.append(i)
        split.append(SPLIT_CODES[tags[k]] if tags is not None else TRAIN)
    if n_dups:
        logger.warning("%s: dropped %d duplicate interactions", source, n_dups)
    if not users:
        raise EmptyDatasetError(f"{source}: no interactions")
    return InteractionDataset(len(user_index), len(item_index), np.array(users), np.array(items),
                              np.array(split), tuple(user_index), tuple(item_index))


def load_interactions(path, dedup: bool = True, item_order: Sequence[str] | None = None,
                      ) -> InteractionDataset:
    """Read a `user_id<TAB>item_id[<TAB>split]` file.

    A third column, when present on every line, is taken as the split tag.
    """
    path = Path(path)
    pairs, tags = [], []
    with path.open("r", encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.rstrip("\r\n")
            if not line.strip():
                continue
            cols = line.split("\t")
            if len(cols) not in (2, 3) or not cols[0] or not cols[1]:
                raise ParseError(path, line_no, f"expected user_id<TAB>item_id, got {line!r}")
            if len(cols) == 3:
                if cols[2] not in SPLIT_CODES:
                    raise ParseError(path, line_no, f"unknown split tag {cols[2]!r}")
                tags.append(cols[2])
            pairs.append((cols[0], cols[1]))
    if tags and len(tags) != len(pairs):
        raise ParseError(path, 0, "split column present on some lines only")
    if not pairs:
        raise EmptyDatasetError(f"{path}: empty file")
    return from_pairs(pairs, tags or None, item_order=item_order, dedup=dedup, source=str(path))


def load_item_list(path) -> list[str]:
    with Path(path).open("r", encoding="utf-8") as fh:
        return [line.rstrip("\r\n") for line in fh if line.strip()]


def save_interactions(ds: InteractionDataset, path, with_split: bool = True) -> None:
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        for u, i, s in zip(ds.users, ds.items, ds.split):
            if with_split:
                fh.write(f"{ds.user_ids[u]}\t{ds.item_ids[i]}\t{SPLIT_NAMES[s]}\n")
            else:
                fh.write(f"{ds.user_ids[u]}\t{ds.item_ids[i]}\n")


def save_item_list(ds: InteractionDataset, path) -> None:
    Path(path).write_text("".join(f"{iid}\n" for iid in ds.item_ids), encoding="utf-8")


def min_core(ds: InteractionDataset, k: int) -> InteractionDataset:
    """Iteratively drop users and items with fewer than `k` interactions."""
    keep = np.ones(len(ds), dtype=bool)
    while True:
        uc = np.bincount(ds.users[keep], minlength=ds.num_users)
        ic = np.bincount(ds.items[keep], minlength=ds.num_items)
        new_keep = keep & (uc[ds.users] >= k) & (ic[ds.items] >= k)
        if new_keep.sum() == keep.sum():
            break
        keep = new_keep
    pairs = [(ds.user_ids[u], ds.item_ids[i]) for u, i in zip(ds.users[keep], ds.items[keep])]
    tags = [SPLIT_NAMES[s] for s in ds.split[keep]]
    return from_pairs(pairs, tags, source="min-core")


# -- splitting ---------------------------------------------------------------

def split_counts(k: int, ratios: Sequence[float] = (0.8, 0.1, 0.1)) -> tuple[int, int, int]:
    """Per-user (train, valid, test) counts for a user with `k` interactions.

    train = floor(r_train * k), at least 1; the remainder is divided between
    valid and test in proportion to their ratios, rounding half up in favour
    of valid.
    """
    r_tr, r_va, r_te = ratios
    n_train = max(1, math.floor(r_tr * k + 1e-9))
    n_train = min(n_train, k)
    rest = k - n_train
    if r_va + r_te <= 0:
        return k, 0, 0
    n_valid = math.floor(rest * r_va / (r_va + r_te) + 0.5)
    return n_train, n_valid, rest - n_valid


def _check_ratios(ratios):
    if len(ratios) != 3 or min(ratios) < 0 or abs(sum(ratios) - 1.0) > 1e-6:
        raise DataError(f"split ratios must be three non-negative numbers summing to 1, got {ratios}")


def assign_split(users: np.ndarray, num_users: int, ratios, rng: np.random.Generator,
                 min_interactions: int = 3) -> np.ndarray:
    """Split tags for rows grouped by user, shuffled per user with `rng`."""
    _check_ratios(ratios)
    split = np.full(len(users), TRAIN, dtype=np.int64)
    order = np.argsort(users, kind="stable")
    bounds = np.searchsorted(users[order], np.arange(num_users + 1))
    n_short = 0
    for u in range(num_users):
        rows = order[bounds[u]:bounds[u + 1]]
        k = len(rows)
        if k == 0:
            continue
        if k < min_interactions:
            n_short += 1
            continue
        n_tr, n_va, _ = split_counts(k, ratios)
        rows = rows[rng.permutation(k)]
        split[rows[n_tr:n_tr + n_va]] = VALID
        split[rows[n_tr + n_va:]] = TEST
    if n_short:
        logger.warning("%d users with fewer than %d interactions kept entirely in train",
                       n_short, min_interactions)
    return split


def random_split(ds: InteractionDataset, ratios=(0.8, 0.1, 0.1), seed: int = 0) -> InteractionDataset:
    """Per-user random train/valid/test split, deterministic given `seed`."""
    from .rng import substream
    rng = substream(seed, "split")
    return ds.with_split(assign_split(ds.users, ds.num_users, ratios, rng))


# -- negative sampling -------------------------------------------------------

def _known_keys(ds: InteractionDataset, exclude: str) -> np.ndarray:
    if exclude == "all":
        return ds.sorted_keys_all
    if exclude == "train":
        return ds.sorted_keys_train
    raise ValueError(f"exclude must be 'train' or 'all', got {exclude!r}")


def _is_known(keys: np.ndarray, known: np.ndarray) -> np.ndarray:
    if len(known) == 0:
        return np.zeros(len(keys), dtype=bool)
    pos = np.searchsorted(known, keys)
    pos = np.minimum(pos, len(known) - 1)
    return known[pos] == keys


def sample_negatives(ds: InteractionDataset, users: np.ndarray, rng: np.random.Generator,
                     exclude: str = "all", max_retries: int = 100) -> np.ndarray:
    """One uniformly drawn unobserved item per entry of `users`.

    Rejection sampling for up to `max_retries` rounds, then an explicit scan
    of the complement for whatever is left.
    """
    users = np.asarray(users, dtype=np.int64)
    known = _known_keys(ds, exclude)
    n = ds.num_items
    neg = rng.integers(0, n, size=len(users))
    bad = np.flatnonzero(_is_known(users * n + neg, known))
    for _ in range(max_retries):
        if len(bad) == 0:
            break
        neg[bad] = rng.integers(0, n, size=len(bad))
        bad = bad[_is_known(users[bad] * n + neg[bad], known)]
    for row in bad:
        u = users[row]
        lo, hi = np.searchsorted(known, [u * n, (u + 1) * n])
        taken = known[lo:hi] - u * n
        free = np.setdiff1d(np.arange(n), taken, assume_unique=True)
        if len(free) == 0:
            raise NoNegativeError(f"user {ds.user_ids[u]!r} has interacted with every item")
        neg[row] = free[rng.integers(0, len(free))]
    return neg


def sample_negative(ds: InteractionDataset, user: int, rng: np.random.Generator,
                    exclude: str = "all") -> int:
    return int(sample_negatives(ds, np.array([user]), rng, exclude)[0])


# -- features ----------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class FeatureStore:
    """Per-modality raw item features, rows aligned with dataset item indices."""

    modalities: tuple[str, ...]
    matrices: tuple[np.ndarray, ...] = field(repr=False)

    def __post_init__(self):
        if len(self.modalities) != len(self.matrices):
            raise DataError("one matrix per modality required")
        if len(set(self.modalities)) != len(self.modalities):
            raise DataError("duplicate modality names")
        mats = []
        for name, mat in zip(self.modalities, self.matrices):
            mat = np.ascontiguousarray(mat, dtype=np.float64)
            if mat.ndim != 2:
                raise DataError(f"modality {name!r}: features must be a 2-D matrix")
            if not np.isfinite(mat).all():
                raise DataError(f"modality {name!r}: non-finite feature values")
            mat.setflags(write=False)
            mats.append(mat)
        if len({m.shape[0] for m in mats}) > 1:
            raise DataError("modalities disagree on the number of items")
        object.__setattr__(self, "matrices", tuple(mats))

    @property
    def num_items(self) -> int:
        return self.matrices[0].shape[0] if self.matrices else 0

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(m.shape[1] for m in self.matrices)

    def __getitem__(self, modality: str) -> np.ndarray:
        return self.matrices[self.modalities.index(modality)]

    def check_items(self, num_items: int) -> None:
        if self.matrices and self.num_items != num_items:
            raise DataError(f"feature rows ({self.num_items}) != dataset items ({num_items})")


def write_features_binary(path, matrix: np.ndarray) -> None:
    matrix = np.asarray(matrix)
    n, d = matrix.shape
    with Path(path).open("wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<III", FEATURE_VERSION, n, d))
        fh.write(np.ascontiguousarray(matrix, dtype="<f4").tobytes())


def read_features_binary(path) -> np.ndarray:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 16 or raw[:4] != FEATURE_MAGIC:
        raise DataError(f"{path}: not a feature file (bad magic)")
    version, n, d = struct.unpack("<III", raw[4:16])
    if version != FEATURE_VERSION:
        raise DataError(f"{path}: unsupported feature file version {version}")
    if len(raw) != 16 + 4 * n * d:
        raise DataError(f"{path}: expected {n}x{d} floats, file size is {len(raw)} bytes")
    return np.frombuffer(raw, dtype="<f4", offset=16).reshape(n, d).astype(np.float64)


def read_features_tsv(path) -> tuple[list[str], np.ndarray]:
    path = Path(path)
    ids, rows = [], []
    with path.open("r", encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.rstrip("\r\n")
            if not line.strip():
                continue
            cols = line.split("\t")
            try:
                vals = [float(v) for v in cols[1:]]
            except ValueError as exc:
                raise ParseError(path, line_no, str(exc)) from None
            if not vals or (rows and len(vals) != len(rows[0])):
                raise ParseError(path, line_no, "inconsistent feature dimension")
            ids.append(cols[0])
            rows.append(vals)
    if not rows:
        raise EmptyDatasetError(f"{path}: no feature rows")
    return ids, np.array(rows, dtype=np.float64)


def write_features_tsv(path, item_ids: Sequence[str], matrix: np.ndarray) -> None:
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        for iid, row in zip(item_ids, matrix):
            fh.write(iid + "\t" + "\t".join(repr(float(v)) for v in row) + "\n")


def load_feature_store(paths: dict[str, str], ds: InteractionDataset,
                       row_ids: Sequence[str] | None = None) -> FeatureStore:
    """Load one feature file per modality and align rows with `ds` items.

    TSV files carry their own item ids.  Binary files are row-ordered by
    `row_ids` when given, otherwise by dataset item index.
    """
    mats = []
    for name, path in paths.items():
        path = Path(path)
        if not path.exists():
            raise DataError(f"feature file for modality {name!r} not found: {path}")
        with path.open("rb") as fh:
            magic = fh.read(4)
        if magic == FEATURE_MAGIC:
            mat = read_features_binary(path)
            ids = list(row_ids) if row_ids is not None else None
        else:
            ids, mat = read_features_tsv(path)
        if ids is None:
            if mat.shape[0] != ds.num_items:
                raise DataError(f"modality {name!r}: {mat.shape[0]} rows for {ds.num_items} items")
            mats.append(mat)
            continue
        if len(ids) != mat.shape[0]:
            raise DataError(f"modality {name!r}: item list length does not match rows")
        row_of = {iid: r for r, iid in enumerate(ids)}
        missing = [iid for iid in ds.item_ids if iid not in row_of]
        if missing:
            raise DataError(f"modality {name!r}: no features for {len(missing)} items, e.g. {missing[0]!r}")
        mats.append(mat[[row_of[iid] for iid in ds.item_ids]])
    return FeatureStore(tuple(paths), tuple(mats))
