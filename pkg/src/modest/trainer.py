"""Alternating optimization of backbone parameters and item sample weights."""

from __future__ import annotations

import configparser
import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .backbone import BackboneParams, Triples, backbone_grads, init_params, shared_features
from .data import TRAIN, FeatureStore, InteractionDataset, sample_negatives
from .errors import NumericalError
from .hsic import MODES, HsicObjective, penalized_objective_grad, weights_from_logits
from .mask import ImportanceAccumulator, compute_mask
from .metrics import evaluate_topk
from .rng import substream

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    model: str = "vbpr"
    lam: float = 0.0
    epochs_max: int = 100
    batch_size: int = 1024
    lr_theta: float = 0.001
    l2_reg: float = 1e-4
    patience: int = 10
    seed: int = 0
    weight_penalty: float = 1.0
    w_max: float = 2.0
    inner_weight_steps: int = 1
    weight_lr: float = 3.0
    hsic_mode: str = "population"
    mask_temperature: float = 1.0
    dim: int = 64
    shared_dim: int = 64
    neg_exclude: str = "all"
    eval_k: int = 20
    eval_exclude: str = "train"

    # config-file spellings that differ from the attribute name
    ALIASES = {
        "lambda": "lam",
        "hsic.mode": "hsic_mode",
        "mask.temperature": "mask_temperature",
        "gamma": "weight_penalty",
        "inner_steps": "inner_weight_steps",
        "d": "dim",
        "d_shared": "shared_dim",
    }

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs_max < 1:
            raise ValueError("epochs_max must be >= 1")
        if self.w_max <= 1:
            raise ValueError("w_max must exceed 1 so that w = 1 is reachable")
        if self.weight_penalty < 0:
            raise ValueError("weight_penalty must be >= 0")
        if self.inner_weight_steps < 0:
            raise ValueError("inner_weight_steps must be >= 0")
        if self.hsic_mode not in MODES:
            raise ValueError(f"hsic.mode must be one of {MODES}")
        if self.model not in ("mf", "vbpr"):
            raise ValueError("model must be 'mf' or 'vbpr'")
        if self.neg_exclude not in ("train", "all"):
            raise ValueError("neg_exclude must be 'train' or 'all'")

    @classmethod
    def field_name(cls, key: str) -> str:
        key = key.strip().lower()
        key = cls.ALIASES.get(key, key).replace("-", "_").replace(".", "_")
        names = {f.name for f in dataclasses.fields(cls)}
        if key not in names:
            raise KeyError(f"unknown config key {key!r}")
        return key

    @classmethod
    def from_mapping(cls, values: dict, base: "TrainConfig | None" = None) -> "TrainConfig":
        """Apply string or typed values on top of `base` (defaults if None)."""
        current = dataclasses.asdict(base) if base is not None else {}
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        for key, raw in values.items():
            name = cls.field_name(key)
            kind = types[name]
            if isinstance(raw, str):
                raw = raw.strip()
                if kind == "int":
                    raw = int(raw)
                elif kind == "float":
                    raw = float(raw)
            current[name] = raw
        return cls(**current)

    @classmethod
    def from_file(cls, path, base: "TrainConfig | None" = None) -> "TrainConfig":
        """Read a flat `key = value` file (no section headers needed)."""
        parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
        parser.optionxform = str
        text = Path(path).read_text(encoding="utf-8")
        parser.read_string("[config]\n" + text)
        return cls.from_mapping(dict(parser["config"]), base)

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in dataclasses.asdict(self).items())


@dataclass
class SampleWeights:
    """Per-item weights w = w_max * sigmoid(logit), initialised to exactly 1."""

    logits: np.ndarray
    w_max: float = 2.0

    @classmethod
    def ones(cls, num_items: int, w_max: float = 2.0) -> "SampleWeights":
        return cls(np.full(num_items, -math.log(w_max - 1.0)), w_max)

    @property
    def values(self) -> np.ndarray:
        return weights_from_logits(self.logits, self.w_max)

    def copy(self) -> "SampleWeights":
        return SampleWeights(self.logits.copy(), self.w_max)


@dataclass
class EpochReport:
    epoch: int
    weighted_bpr_loss: float
    hsic_loss: float
    valid_recall: float
    valid_ndcg: float
    valid_precision: float
    wall_time: float = 0.0

    TSV_FIELDS = ("epoch", "weighted_bpr_loss", "hsic_loss", "valid_recall", "valid_ndcg",
                  "valid_precision")

    def tsv_row(self) -> str:
        vals = [str(self.epoch)] + [repr(float(getattr(self, f))) for f in self.TSV_FIELDS[1:]]
        return "\t".join(vals)


class Adam:
    """Adam over a dict of named arrays, updated in place."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, g in grads.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _check_finite(value, where: str) -> None:
    if not np.all(np.isfinite(value)):
        raise NumericalError(f"non-finite value in {where}")


def train_theta_epoch(params: BackboneParams, weights: SampleWeights | None, ds: InteractionDataset,
                      store: FeatureStore | None, config: TrainConfig, adam: Adam,
                      rng: np.random.Generator, epoch: int = 0,
                      ) -> tuple[float, dict[str, np.ndarray] | None]:
    """One shuffled pass over the training positives with frozen sample weights.

    Returns the size-weighted mean batch loss and the per-modality importance
    accumulated from the BPR gradients of the transforms (None for mf).
    """
    users, pos = ds.pairs(TRAIN)
    neg = sample_negatives(ds, users, rng, config.neg_exclude)
    order = rng.permutation(len(users))
    w = None if weights is None else weights.values
    acc = ImportanceAccumulator(params.modalities) if params.modalities else None
    tensors = params.tensors()
    total = 0.0
    for b, lo in enumerate(range(0, len(order), config.batch_size)):
        idx = order[lo:lo + config.batch_size]
        batch = Triples(users[idx], pos[idx], neg[idx])
        loss, grads = backbone_grads(params, store, batch, w, config.l2_reg)
        if not math.isfinite(loss):
            raise NumericalError(f"epoch {epoch}, batch {b}: non-finite loss {loss}")
        for name, g in grads.items():
            if not np.isfinite(g).all():
                raise NumericalError(f"epoch {epoch}, batch {b}: non-finite gradient in {name}")
        if acc is not None:
            acc.add({m: grads[f"W/{m}"] for m in params.modalities})
        adam.step(tensors, grads, config.lr_theta)
        total += loss * len(idx)
    return total / len(order), (acc.result() if acc is not None else None)


def update_weights(weights: SampleWeights, params: BackboneParams, store: FeatureStore,
                   mask: dict[str, np.ndarray], items, config: TrainConfig, adam: Adam) -> float:
    """Inner steps on the weight logits against masked weighted HSIC + anchor penalty.

    Step size is lambda * weight_lr.  Returns the unpenalized HSIC value
    before the update.
    """
    shared = shared_features(params, store)
    objective = HsicObjective(shared, [mask[m] for m in params.modalities], items,
                              config.hsic_mode)
    hsic_value = objective.loss(weights.values)
    lr = config.lam * config.weight_lr
    state = {"logits": weights.logits}
    for _ in range(config.inner_weight_steps):
        _, grad = penalized_objective_grad(objective, weights.logits, weights.w_max,
                                           config.weight_penalty)
        if not np.isfinite(grad).all():
            raise NumericalError("non-finite gradient for sample-weight logits")
        adam.step(state, {"logits": grad}, lr)
    return hsic_value


@dataclass
class FitResult:
    params: BackboneParams
    weights: SampleWeights
    best_weights: SampleWeights
    reports: list[EpochReport]
    best_epoch: int
    masks: list[dict[str, np.ndarray]] = field(default_factory=list)


def fit(ds: InteractionDataset, store: FeatureStore | None, config: TrainConfig,
        on_epoch: Callable[[EpochReport, dict | None], None] | None = None) -> FitResult:
    """Alternate backbone epochs and sample-weight updates with early stopping.

    The returned parameters are those of the epoch with the best validation
    Recall@K; training stops after `patience` epochs without improvement.
    """
    config.validate()
    if not (ds.split == 1).any():
        raise ValueError("validation split is empty")
    params = init_params(config.model, ds.num_users, ds.num_items, substream(config.seed, "init"),
                         config.dim, config.shared_dim, store if config.model == "vbpr" else None)
    params.check(store if config.model == "vbpr" else None)
    sampling = substream(config.seed, "sampling")
    weights = SampleWeights.ones(ds.num_items, config.w_max)
    adam_theta, adam_w = Adam(), Adam()
    items = ds.train_items

    best = (-1.0, params.copy(), weights.copy(), 0)
    reports: list[EpochReport] = []
    masks = []
    wait = 0
    for epoch in range(1, config.epochs_max + 1):
        t0 = time.perf_counter()
        loss, alpha = train_theta_epoch(params, weights, ds, store, config, adam_theta, sampling, epoch)
        hsic_value = 0.0
        mask = None
        if alpha is not None:
            mask = compute_mask(alpha, config.mask_temperature)
            masks.append(mask)
            hsic_value = update_weights(weights, params, store, mask, items, config, adam_w)
        shared = shared_features(params, store)
        valid = evaluate_topk(params, shared, ds, "valid", config.eval_k, config.eval_exclude)
        report = EpochReport(epoch, loss, hsic_value, valid.recall, valid.ndcg, valid.precision,
                             time.perf_counter() - t0)
        reports.append(report)
        logger.info("epoch %d loss=%.5f hsic=%.5g valid R@%d=%.4f (%.1fs)", epoch, loss,
                    hsic_value, config.eval_k, valid.recall, report.wall_time)
        if on_epoch is not None:
            on_epoch(report, mask)
        if valid.recall > best[0]:
            best = (valid.recall, params.copy(), weights.copy(), epoch)
            wait = 0
        else:
            wait += 1
            if wait >= config.patience:
                logger.info("early stop after epoch %d (best epoch %d)", epoch, best[3])
                break
    return FitResult(best[1], weights, best[2], reports, best[3], masks)
