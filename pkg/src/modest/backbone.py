"""Matrix-factorization and VBPR backbones with analytic BPR gradients."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .data import FeatureStore
from .errors import DataError

MODELS = ("mf", "vbpr")
CKPT_MAGIC = b"MDCK"
CKPT_VERSION = 1


class TrainTriple(NamedTuple):
    user: int
    pos_item: int
    neg_item: int


class Triples(NamedTuple):
    """A batch of (user, positive item, negative item) index arrays."""

    users: np.ndarray
    pos: np.ndarray
    neg: np.ndarray

    @classmethod
    def of(cls, triples: Sequence[TrainTriple]) -> "Triples":
        arr = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
        return cls(arr[:, 0], arr[:, 1], arr[:, 2])

    def __len__(self):
        return len(self.users)


@dataclass
class BackboneParams:
    """Trainable tensors of a backbone.

    ``W[m]`` has shape (d', d_m); ``P[m]`` holds the user preference vectors
    p_u^m for modality m, shape (num_users, d').  An mf model has no
    modalities.
    """

    model: str
    user_embed: np.ndarray
    item_embed: np.ndarray
    modalities: tuple[str, ...] = ()
    W: list[np.ndarray] = field(default_factory=list)
    b: list[np.ndarray] = field(default_factory=list)
    P: list[np.ndarray] = field(default_factory=list)

    @property
    def num_users(self) -> int:
        return self.user_embed.shape[0]

    @property
    def num_items(self) -> int:
        return self.item_embed.shape[0]

    @property
    def dim(self) -> int:
        return self.user_embed.shape[1]

    @property
    def shared_dim(self) -> int:
        return self.W[0].shape[0] if self.W else 0

    def tensors(self) -> dict[str, np.ndarray]:
        """Every trainable tensor by name, in declaration order."""
        out = {"user_embed": self.user_embed, "item_embed": self.item_embed}
        for k, m in enumerate(self.modalities):
            out[f"W/{m}"] = self.W[k]
            out[f"b/{m}"] = self.b[k]
            out[f"P/{m}"] = self.P[k]
        return out

    def copy(self) -> "BackboneParams":
        return BackboneParams(self.model, self.user_embed.copy(), self.item_embed.copy(),
                              self.modalities, [w.copy() for w in self.W],
                              [b.copy() for b in self.b], [p.copy() for p in self.P])

    def check(self, store: FeatureStore | None) -> None:
        if self.model == "mf":
            return
        if store is None:
            raise DataError("vbpr requires item features")
        if tuple(store.modalities) != tuple(self.modalities):
            raise DataError(f"modalities {store.modalities} do not match model {self.modalities}")
        store.check_items(self.num_items)
        for name, W, dm in zip(self.modalities, self.W, store.dims):
            if W.shape[1] != dm:
                raise DataError(f"modality {name!r}: transform expects d_m={W.shape[1]}, features have {dm}")


def xavier_uniform(rng: np.random.Generator, shape: tuple[int, int]) -> np.ndarray:
    limit = np.sqrt(6.0 / (shape[0] + shape[1]))
    return rng.uniform(-limit, limit, size=shape)


def init_params(model: str, num_users: int, num_items: int, rng: np.random.Generator,
                dim: int = 64, shared_dim: int = 64, store: FeatureStore | None = None,
                ) -> BackboneParams:
    if model not in MODELS:
        raise ValueError(f"model must be one of {MODELS}, got {model!r}")
    params = BackboneParams(model, xavier_uniform(rng, (num_users, dim)),
                            xavier_uniform(rng, (num_items, dim)))
    if model == "vbpr":
        if store is None or not store.modalities:
            raise DataError("vbpr requires at least one feature modality")
        store.check_items(num_items)
        params.modalities = tuple(store.modalities)
        for dm in store.dims:
            params.W.append(xavier_uniform(rng, (shared_dim, dm)))
            params.b.append(np.zeros(shared_dim))
            params.P.append(xavier_uniform(rng, (num_users, shared_dim)))
    return params


def transform_features(params: BackboneParams, store: FeatureStore, modality: str,
                       items=None) -> np.ndarray:
    """Shared-space features W_m e_i^m + b_m, one row per item."""
    k = params.modalities.index(modality)
    E = store[modality]
    if E.shape[1] != params.W[k].shape[1]:
        raise DataError(f"modality {modality!r}: feature dim {E.shape[1]} != {params.W[k].shape[1]}")
    if items is not None:
        E = E[items]
    return E @ params.W[k].T + params.b[k]


def shared_features(params: BackboneParams, store: FeatureStore | None, items=None) -> list[np.ndarray]:
    if params.model == "mf":
        return []
    return [transform_features(params, store, m, items) for m in params.modalities]


def score(params: BackboneParams, shared: Sequence[np.ndarray], user: int, item: int) -> float:
    s = float(params.user_embed[user] @ params.item_embed[item])
    if params.model == "vbpr":
        for P, E in zip(params.P, shared):
            s += float(P[user] @ E[item])
    return s


def score_pairs(params: BackboneParams, shared: Sequence[np.ndarray], users, items) -> np.ndarray:
    """Scores for aligned arrays of users and items; `shared` rows align with `items`."""
    s = np.einsum("nd,nd->n", params.user_embed[users], params.item_embed[items])
    if params.model == "vbpr":
        for P, E in zip(params.P, shared):
            s += np.einsum("nd,nd->n", P[users], E)
    return s


def score_matrix(params: BackboneParams, shared: Sequence[np.ndarray], users) -> np.ndarray:
    """Scores of `users` against every item; `shared` holds all item rows."""
    s = params.user_embed[users] @ params.item_embed.T
    if params.model == "vbpr":
        for P, E in zip(params.P, shared):
            s += P[users] @ E.T
    return s


def _batch_reg(params: BackboneParams, t: Triples) -> float:
    total = (np.sum(params.user_embed[t.users] ** 2) + np.sum(params.item_embed[t.pos] ** 2)
             + np.sum(params.item_embed[t.neg] ** 2))
    for P in params.P:
        total += np.sum(P[t.users] ** 2)
    return float(total) / len(t)


def _pos_weights(weights, t: Triples) -> np.ndarray:
    if weights is None:
        return np.ones(len(t))
    return np.asarray(weights, dtype=np.float64)[t.pos]


def weighted_bpr_loss(params: BackboneParams, store: FeatureStore | None, triples: Triples,
                      weights=None, l2_reg: float = 0.0) -> float:
    """mean_b w_pos * softplus(-(y_ui - y_uj)) + l2_reg * mean_b ||theta_b||^2."""
    if len(triples) == 0:
        raise ValueError("empty batch")
    t = triples
    sh_i = shared_features(params, store, t.pos)
    sh_j = shared_features(params, store, t.neg)
    x = score_pairs(params, sh_i, t.users, t.pos) - score_pairs(params, sh_j, t.users, t.neg)
    loss = float(np.mean(_pos_weights(weights, t) * np.logaddexp(0.0, -x)))
    if l2_reg:
        loss += l2_reg * _batch_reg(params, t)
    return loss


def backbone_grads(params: BackboneParams, store: FeatureStore | None, triples: Triples,
                   weights=None, l2_reg: float = 0.0) -> tuple[float, dict[str, np.ndarray]]:
    """Weighted BPR loss and its exact gradient for every tensor in `params`.

    Returns ``(loss, grads)`` with ``grads`` keyed like ``params.tensors()``;
    ``grads["W/<m>"]`` is the BPR gradient of the modality transform, which
    carries no regularization term.
    """
    if len(triples) == 0:
        raise ValueError("empty batch")
    t = triples
    B = len(t)
    w = _pos_weights(weights, t)
    xu, xi, xj = params.user_embed[t.users], params.item_embed[t.pos], params.item_embed[t.neg]
    sh_i = shared_features(params, store, t.pos)
    sh_j = shared_features(params, store, t.neg)
    x = score_pairs(params, sh_i, t.users, t.pos) - score_pairs(params, sh_j, t.users, t.neg)
    loss = float(np.mean(w * np.logaddexp(0.0, -x)))
    # d/dx softplus(-x) = -sigmoid(-x)
    g = -w * np.exp(-np.logaddexp(0.0, x)) / B

    grads: dict[str, np.ndarray] = {}
    gu = np.zeros_like(params.user_embed)
    gi = np.zeros_like(params.item_embed)
    np.add.at(gu, t.users, g[:, None] * (xi - xj))
    np.add.at(gi, t.pos, g[:, None] * xu)
    np.add.at(gi, t.neg, -g[:, None] * xu)
    if l2_reg:
        loss += l2_reg * _batch_reg(params, t)
        c = 2.0 * l2_reg / B
        np.add.at(gu, t.users, c * xu)
        np.add.at(gi, t.pos, c * xi)
        np.add.at(gi, t.neg, c * xj)
    grads["user_embed"] = gu
    grads["item_embed"] = gi

    for k, m in enumerate(params.modalities):
        E = store[m]
        pu = params.P[k][t.users]
        gP = np.zeros_like(params.P[k])
        np.add.at(gP, t.users, g[:, None] * (sh_i[k] - sh_j[k]))
        if l2_reg:
            np.add.at(gP, t.users, (2.0 * l2_reg / B) * pu)
        grads[f"W/{m}"] = (g[:, None] * pu).T @ (E[t.pos] - E[t.neg])
        # the bias cancels in y_ui - y_uj
        grads[f"b/{m}"] = np.zeros_like(params.b[k])
        grads[f"P/{m}"] = gP
    return loss, grads


# -- checkpoints -------------------------------------------------------------

def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def save_checkpoint(params: BackboneParams, path) -> None:
    """Binary checkpoint: header with every shape, then f32 tensors."""
    dims = [W.shape[1] for W in params.W]
    head = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION), _pack_str(params.model),
            struct.pack("<IIIII", params.num_users, params.num_items, params.dim,
                        params.shared_dim, len(params.modalities))]
    for m, dm in zip(params.modalities, dims):
        head.append(_pack_str(m))
        head.append(struct.pack("<I", dm))
    with Path(path).open("wb") as fh:
        fh.write(b"".join(head))
        for arr in params.tensors().values():
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path) -> BackboneParams:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise DataError(f"{path}: not a checkpoint (bad magic)")
    pos = 4

    def take(fmt):
        nonlocal pos
        vals = struct.unpack_from(fmt, raw, pos)
        pos += struct.calcsize(fmt)
        return vals

    def take_str():
        nonlocal pos
        (n,) = take("<I")
        s = raw[pos:pos + n].decode("utf-8")
        pos += n
        return s

    try:
        (version,) = take("<I")
        if version != CKPT_VERSION:
            raise DataError(f"{path}: unsupported checkpoint version {version}")
        model = take_str()
        if model not in MODELS:
            raise DataError(f"{path}: unknown model tag {model!r}")
        nu, ni, d, ds, nm = take("<IIIII")
        mods, dims = [], []
        for _ in range(nm):
            mods.append(take_str())
            dims.append(take("<I")[0])

        def tensor(shape):
            nonlocal pos
            n = int(np.prod(shape))
            arr = np.frombuffer(raw, dtype="<f4", count=n, offset=pos).reshape(shape)
            pos += 4 * n
            return arr.astype(np.float64)

        params = BackboneParams(model, tensor((nu, d)), tensor((ni, d)), tuple(mods))
        for dm in dims:
            params.W.append(tensor((ds, dm)))
            params.b.append(tensor((ds,)))
            params.P.append(tensor((nu, ds)))
    except (struct.error, ValueError) as exc:
        raise DataError(f"{path}: truncated or corrupt checkpoint ({exc})") from None
    if pos != len(raw):
        raise DataError(f"{path}: {len(raw) - pos} trailing bytes in checkpoint")
    return params
