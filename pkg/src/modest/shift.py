"""Distribution-shift tooling.

A small MLP estimates how well an item's two modality vectors "match"; test
interactions are then filtered to the items with the weakest (or strongest)
match to build shifted test sets.  Also here: mixing two datasets at
different split ratios, and a synthetic generator with one causal and one
spuriously correlated modality.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy.special import expit

from .data import (DROPPED, TEST, TRAIN, FeatureStore, InteractionDataset, assign_split,
                   _check_ratios)
from .errors import DataError, EmptyDatasetError
from .rng import substream

logger = logging.getLogger(__name__)


# -- match classifier --------------------------------------------------------

@dataclass
class MatchClassifier:
    """Two-layer tanh perceptron over randomly projected modality pairs."""

    proj_a: np.ndarray
    proj_b: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    W1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: float = 0.0
    modalities: tuple[str, str] | None = None
    loss_trace: list[float] = field(default_factory=list)

    def inputs(self, ea: np.ndarray, eb: np.ndarray) -> np.ndarray:
        ea = np.asarray(ea, dtype=np.float64)
        eb = np.asarray(eb, dtype=np.float64)
        if not (np.isfinite(ea).all() and np.isfinite(eb).all()):
            raise ValueError("non-finite features given to the match classifier")
        X = np.hstack([ea @ self.proj_a, eb @ self.proj_b])
        return (X - self.mean) / self.std

    def forward(self, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        h = np.tanh(X @ self.W1 + self.b1)
        return h, h @ self.w2 + self.b2

    def predict(self, ea, eb) -> np.ndarray:
        _, z = self.forward(self.inputs(ea, eb))
        return expit(z)

    def params(self) -> dict[str, np.ndarray]:
        return {"W1": self.W1, "b1": self.b1, "w2": self.w2}

    def loss_and_grads(self, X: np.ndarray, y: np.ndarray) -> tuple[float, dict]:
        """Mean logistic loss and its gradient for every trainable parameter."""
        h, z = self.forward(X)
        loss = float(np.mean(np.logaddexp(0.0, z) - y * z))
        dz = (expit(z) - y) / len(y)
        dh = np.outer(dz, self.w2) * (1.0 - h * h)
        grads = {"W1": X.T @ dh, "b1": dh.sum(axis=0), "w2": h.T @ dz, "b2": float(dz.sum())}
        return loss, grads


def _mismatched(items: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """For every position a different position of `items`, uniformly."""
    n = len(items)
    offset = rng.integers(1, n, size=n)
    return items[(np.arange(n) + offset) % n]


def init_match_classifier(store: FeatureStore, items, rng: np.random.Generator,
                          modalities: tuple[str, str] | None = None, proj_dim: int = 128,
                          hidden: int = 64) -> MatchClassifier:
    ma, mb = modalities or store.modalities[:2]
    Ea, Eb = store[ma], store[mb]
    proj_a = rng.standard_normal((Ea.shape[1], proj_dim)) / math.sqrt(Ea.shape[1])
    proj_b = rng.standard_normal((Eb.shape[1], proj_dim)) / math.sqrt(Eb.shape[1])
    X = np.hstack([Ea[items] @ proj_a, Eb[items] @ proj_b])
    std = X.std(axis=0)
    std[std == 0] = 1.0
    limit = math.sqrt(6.0 / (2 * proj_dim + hidden))
    # zero output layer: an untrained classifier answers exactly 0.5
    return MatchClassifier(proj_a, proj_b, X.mean(axis=0), std,
                           rng.uniform(-limit, limit, size=(2 * proj_dim, hidden)),
                           np.zeros(hidden), np.zeros(hidden), 0.0, (ma, mb))


def train_match_classifier(store: FeatureStore, items=None, epochs: int = 100, seed: int = 0,
                           modalities: tuple[str, str] | None = None, lr: float = 0.01,
                           batch_size: int = 256, proj_dim: int = 128, hidden: int = 64,
                           ) -> MatchClassifier:
    """Fit the matcher: true pairs are positives, one fresh mismatch per item per epoch.

    Trained with Adam on the logistic loss.  The mean loss of each epoch is
    kept in ``loss_trace``.
    """
    if len(store.modalities) < 2:
        raise DataError("match classifier needs at least two modalities")
    items = np.arange(store.num_items) if items is None else np.asarray(items, dtype=np.int64)
    if len(items) < 10:
        raise DataError("match classifier needs at least 10 items")
    ma, mb = modalities or store.modalities[:2]
    rng = substream(seed, "classifier")
    clf = init_match_classifier(store, items, rng, (ma, mb), proj_dim, hidden)
    from .trainer import Adam

    adam = Adam()
    state = {"W1": clf.W1, "b1": clf.b1, "w2": clf.w2, "b2": np.zeros(1)}
    Ea, Eb = store[ma], store[mb]
    for _ in range(epochs):
        neg = _mismatched(items, rng)
        X = np.vstack([clf.inputs(Ea[items], Eb[items]), clf.inputs(Ea[items], Eb[neg])])
        y = np.concatenate([np.ones(len(items)), np.zeros(len(items))])
        order = rng.permutation(len(y))
        total = 0.0
        for lo in range(0, len(y), batch_size):
            idx = order[lo:lo + batch_size]
            loss, grads = clf.loss_and_grads(X[idx], y[idx])
            total += loss * len(idx)
            grads["b2"] = np.array([grads["b2"]])
            adam.step(state, grads, lr)
            clf.b2 = float(state["b2"][0])
        clf.loss_trace.append(total / len(y))
    if clf.loss_trace and clf.loss_trace[-1] > clf.loss_trace[0]:
        logger.warning("match classifier loss rose from %.4f to %.4f",
                       clf.loss_trace[0], clf.loss_trace[-1])
    return clf


def estimate_match_prob(clf: MatchClassifier, store: FeatureStore, items=None) -> np.ndarray:
    """Classifier probability that each item's own modality pair matches."""
    ma, mb = clf.modalities or store.modalities[:2]
    items = np.arange(store.num_items) if items is None else np.asarray(items, dtype=np.int64)
    return clf.predict(store[ma][items], store[mb][items])


def match_accuracy(clf: MatchClassifier, store: FeatureStore, items, seed: int = 0) -> float:
    """Accuracy at threshold 0.5 on true pairs plus one mismatch per item."""
    ma, mb = clf.modalities or store.modalities[:2]
    items = np.asarray(items, dtype=np.int64)
    neg = _mismatched(items, np.random.default_rng(seed))
    p_pos = clf.predict(store[ma][items], store[mb][items])
    p_neg = clf.predict(store[ma][items], store[mb][neg])
    return float((np.sum(p_pos > 0.5) + np.sum(p_neg <= 0.5)) / (2 * len(items)))


# -- OOD split ---------------------------------------------------------------

def select_items(probs: np.ndarray, candidates: np.ndarray, fraction: float, mode: str) -> np.ndarray:
    """The `fraction` of `candidates` with the lowest or highest probability."""
    if not 0 < fraction <= 1:
        raise ValueError("fraction must be in (0, 1]")
    if mode not in ("lowest", "highest"):
        raise ValueError("mode must be 'lowest' or 'highest'")
    candidates = np.asarray(candidates, dtype=np.int64)
    p = np.asarray(probs, dtype=np.float64)[candidates]
    order = np.argsort(p if mode == "lowest" else -p, kind="stable")
    n_keep = max(1, int(math.floor(fraction * len(candidates) + 0.5)))
    return np.sort(candidates[order[:n_keep]])


def build_ood_split(ds: InteractionDataset, store: FeatureStore | None = None,
                    fraction: float = 0.2, mode: str = "lowest", seed: int = 0,
                    probs=None, epochs: int = 100) -> InteractionDataset:
    """Keep only test interactions whose item is in the selected match-probability band.

    Items are ranked among those present in the test split.  Discarded test
    rows are tagged ``dropped``; train and valid rows are untouched.
    """
    test_mask = ds.split == TEST
    if not test_mask.any():
        raise DataError("dataset has no test split")
    if probs is None:
        if store is None:
            raise ValueError("either probs or a feature store is required")
        clf = train_match_classifier(store, epochs=epochs, seed=seed)
        probs = estimate_match_prob(clf, store)
    candidates = np.unique(ds.items[test_mask])
    keep_items = select_items(probs, candidates, fraction, mode)
    split = ds.split.copy()
    split[test_mask & ~np.isin(ds.items, keep_items)] = DROPPED
    if not (split == TEST).any():
        raise DataError("filtered test split is empty")
    return ds.with_split(split)


# -- mixing ------------------------------------------------------------------

def mix_datasets(ds_a: InteractionDataset, ds_b: InteractionDataset | None,
                 ratios_a=(0.8, 0.1, 0.1), ratios_b=(0.8, 0.1, 0.1), seed: int = 0,
                 store_a: FeatureStore | None = None, store_b: FeatureStore | None = None,
                 prefixes=("A", "B")) -> tuple[InteractionDataset, FeatureStore | None]:
    """Split each dataset per user at its own ratios, then take the union.

    Ids are namespaced as ``<prefix>:<id>``.  Feature stores, if given, are
    stacked row-wise with zero padding where modality dimensions differ.
    """
    _check_ratios(ratios_a)
    _check_ratios(ratios_b)
    parts = [(ds_a, ratios_a, prefixes[0], store_a)]
    if ds_b is not None and len(ds_b):
        parts.append((ds_b, ratios_b, prefixes[1], store_b))
    users, items, split, user_ids, item_ids = [], [], [], [], []
    for ds, ratios, prefix, _ in parts:
        rng = substream(seed, f"mix/{prefix}")
        split.append(assign_split(ds.users, ds.num_users, ratios, rng))
        users.append(ds.users + len(user_ids))
        items.append(ds.items + len(item_ids))
        user_ids.extend(f"{prefix}:{u}" for u in ds.user_ids)
        item_ids.extend(f"{prefix}:{i}" for i in ds.item_ids)
    mixed = InteractionDataset(len(user_ids), len(item_ids), np.concatenate(users),
                               np.concatenate(items), np.concatenate(split),
                               tuple(user_ids), tuple(item_ids))
    stores = [s for *_, s in parts]
    if any(s is None for s in stores):
        return mixed, None
    mods = stores[0].modalities
    if any(s.modalities != mods for s in stores):
        raise DataError("feature stores have different modalities")
    mats = []
    for k, m in enumerate(mods):
        width = max(s.dims[k] for s in stores)
        if len({s.dims[k] for s in stores}) > 1:
            logger.warning("modality %r: zero-padding features to %d dims", m, width)
        mats.append(np.vstack([np.pad(s.matrices[k], ((0, 0), (0, width - s.dims[k])))
                               for s in stores]))
    return mixed, FeatureStore(mods, tuple(mats))


# -- synthetic data ----------------------------------------------------------

@dataclass
class SyntheticSpec:
    """Factor-model generator settings.

    Every item has a causal factor and a spurious factor; the spurious one is
    correlated with the causal one at `rho_train` for regular items and at
    `rho_test` for the shifted items.  Users only care about the causal
    factor.  Shifted items are test-only when `cold_shift` is set.
    """

    num_users: int = 2000
    num_items: int = 1000
    dims: tuple[int, int] = (32, 32)
    modalities: tuple[str, str] = ("v", "t")
    causal: str = "t"
    rho_train: float = 0.9
    rho_test: float = 0.0
    interactions_per_user: int = 20
    shift_fraction: float = 0.2
    cold_shift: bool = False
    latent_dim: int = 8
    noise: tuple[float, float] = (0.3, 1.0)
    temperature: float = 2.0
    seed: int = 0

    def validate(self) -> None:
        if self.num_users <= 0 or self.num_items <= 0:
            raise EmptyDatasetError("synthetic spec needs at least one user and one item")
        if self.causal not in self.modalities or len(self.modalities) != 2:
            raise ValueError("exactly two modalities, one of them causal, are required")
        for rho in (self.rho_train, self.rho_test):
            if not -1 <= rho <= 1:
                raise ValueError("correlations must lie in [-1, 1]")
        if not 0 <= self.shift_fraction < 1:
            raise ValueError("shift_fraction must be in [0, 1)")
        if self.interactions_per_user < 1:
            raise ValueError("interactions_per_user must be >= 1")

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = "[" + ", ".join(repr(x) if isinstance(x, str) else str(x) for x in v) + "]"
            elif isinstance(v, str):
                v = f'"{v}"'
            elif isinstance(v, bool):
                v = str(v).lower()
            lines.append(f"{f.name} = {v}\n")
        return "".join(lines)


@dataclass
class SyntheticData:
    dataset: InteractionDataset
    features: FeatureStore
    shifted: np.ndarray
    z_causal: np.ndarray
    z_spurious: np.ndarray


def gen_synthetic(spec: SyntheticSpec) -> SyntheticData:
    """Sample interactions and two-modality item features from the factor model."""
    spec.validate()
    rng = substream(spec.seed, "dataset")
    n, k = spec.num_items, spec.latent_dim
    n_shift = int(round(spec.shift_fraction * n))
    shifted = np.zeros(n, dtype=bool)
    shifted[rng.choice(n, size=n_shift, replace=False)] = True
    rho = np.where(shifted, spec.rho_test, spec.rho_train)[:, None]
    z_c = rng.standard_normal((n, k))
    z_s = rho * z_c + np.sqrt(1.0 - rho**2) * rng.standard_normal((n, k))

    factors = {spec.causal: z_c}
    spurious = [m for m in spec.modalities if m != spec.causal][0]
    factors[spurious] = z_s
    mats = []
    for m, dm, noise in zip(spec.modalities, spec.dims, spec.noise):
        lift = rng.standard_normal((k, dm)) / math.sqrt(k)
        mats.append(factors[m] @ lift + noise * rng.standard_normal((n, dm)))

    taste = rng.standard_normal((spec.num_users, k))
    logits = spec.temperature * (taste @ z_c.T) / math.sqrt(k)
    n_pick = min(spec.interactions_per_user, n)
    gumbel = rng.gumbel(size=logits.shape)
    chosen = np.argsort(-(logits + gumbel), axis=1, kind="stable")[:, :n_pick]
    chosen.sort(axis=1)
    users = np.repeat(np.arange(spec.num_users), n_pick)
    items = chosen.ravel()

    split_rng = substream(spec.seed, "split")
    split = np.full(len(items), TRAIN, dtype=np.int64)
    if spec.cold_shift:
        cold = shifted[items]
        split[cold] = TEST
        warm = np.flatnonzero(~cold)
        split[warm] = assign_split(users[warm], spec.num_users, (0.8, 0.1, 0.1), split_rng)
    else:
        split[:] = assign_split(users, spec.num_users, (0.8, 0.1, 0.1), split_rng)

    ds = InteractionDataset(spec.num_users, n, users, items, split,
                            tuple(f"u{u}" for u in range(spec.num_users)),
                            tuple(f"i{i}" for i in range(n)))
    store = FeatureStore(tuple(spec.modalities), tuple(mats))
    return SyntheticData(ds, store, shifted, z_c, z_s)


def write_provenance(spec: SyntheticSpec, path) -> None:
    Path(path).write_text("[synthetic]\n" + spec.to_text(), encoding="utf-8")
