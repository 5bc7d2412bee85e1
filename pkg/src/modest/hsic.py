"""RBF kernels, the empirical HSIC statistic and the weighted HSIC objective.

Two objectives are available for the sample-weight step:

``per_item``
    For every item, HSIC is computed between its two masked shared-space
    vectors, treating the d' coordinates as the samples.  The item weight
    scales both vectors, so it enters through the kernel bandwidth.

``population``
    Items are the samples.  Kernels are taken over masked item rows and the
    weights act as probability masses of the empirical distribution, so the
    statistic measures cross-modal dependence of the re-weighted item
    population.  Each modality pair contributes the normalized statistic
    HSIC(X, Y) / sqrt(HSIC(X, X) HSIC(Y, Y)), which lies in [0, 1] and is
    insensitive to kernel scale.
"""

from __future__ import annotations

import itertools
import logging
from typing import Sequence

import numpy as np
from scipy.special import expit

from .errors import NumericalError

logger = logging.getLogger(__name__)

NEG_TOL = 1e-12
MODES = ("per_item", "population")


def _as_vector(U, name="U") -> np.ndarray:
    U = np.asarray(U, dtype=np.float64)
    if U.ndim != 1:
        raise ValueError(f"{name} must be a 1-D vector")
    if not np.isfinite(U).all():
        raise ValueError(f"{name} contains non-finite values")
    return U


def rbf_kernel(U, sigma: float) -> np.ndarray:
    """K[j, k] = exp(-(u_j - u_k)^2 / sigma^2) over the entries of `U`."""
    U = _as_vector(U)
    if len(U) < 2:
        raise ValueError("need at least two values")
    if not (np.isfinite(sigma) and sigma > 0):
        raise ValueError(f"sigma must be positive, got {sigma}")
    # scale before squaring so a tiny sigma cannot underflow to 0
    z = (U[:, None] - U[None, :]) / sigma
    with np.errstate(over="ignore"):
        return np.exp(-(z * z))


def median_heuristic_sigma(U) -> float:
    """Median pairwise absolute difference, or 1.0 if that median is zero."""
    U = _as_vector(U)
    iu = np.triu_indices(len(U), k=1)
    med = float(np.median(np.abs(U[:, None] - U[None, :])[iu]))
    return med if med > 0 else 1.0


def centering_matrix(d: int) -> np.ndarray:
    return np.eye(d) - np.full((d, d), 1.0 / d)


def _center(K: np.ndarray) -> np.ndarray:
    """P K P along the last two axes, without forming P."""
    return (K - K.mean(axis=-1, keepdims=True) - K.mean(axis=-2, keepdims=True)
            + K.mean(axis=(-2, -1), keepdims=True))


def _clamp(values):
    values = np.asarray(values, dtype=np.float64)
    if (values < -NEG_TOL).any():
        raise NumericalError(f"HSIC evaluated to {values.min():.3e} < -{NEG_TOL}")
    return np.maximum(values, 0.0)


def empirical_hsic(U, V, sigma_u: float | None = None, sigma_v: float | None = None) -> float:
    """(d-1)^-2 tr(K_U P K_V P) with RBF kernels.

    Bandwidths default to the median heuristic of each vector.
    """
    U, V = _as_vector(U, "U"), _as_vector(V, "V")
    if len(U) != len(V):
        raise ValueError(f"length mismatch: {len(U)} vs {len(V)}")
    d = len(U)
    if d < 2:
        raise ValueError("need at least two values")
    sigma_u = median_heuristic_sigma(U) if sigma_u is None else sigma_u
    sigma_v = median_heuristic_sigma(V) if sigma_v is None else sigma_v
    K = rbf_kernel(U, sigma_u)
    L = rbf_kernel(V, sigma_v)
    value = float(np.sum(K * _center(L))) / (d - 1) ** 2
    return float(_clamp(value))


# -- batched helpers ---------------------------------------------------------

def _row_median_sigma(X: np.ndarray) -> np.ndarray:
    """Median heuristic applied to every row of `X` independently."""
    d = X.shape[1]
    iu = np.triu_indices(d, k=1)
    out = np.empty(len(X))
    for start in range(0, len(X), 512):
        block = X[start:start + 512]
        diffs = np.abs(block[:, :, None] - block[:, None, :])[:, iu[0], iu[1]]
        out[start:start + 512] = np.median(diffs, axis=1)
    out[out <= 0] = 1.0
    return out


def _sq_dists(X: np.ndarray) -> np.ndarray:
    sq = np.sum(X * X, axis=1)
    D = sq[:, None] + sq[None, :] - 2.0 * (X @ X.T)
    np.maximum(D, 0.0, out=D)
    np.fill_diagonal(D, 0.0)
    return D


def weighted_population_hsic(K: np.ndarray, L: np.ndarray, pi: np.ndarray) -> float:
    """HSIC of the distribution putting mass `pi` on the samples behind K, L."""
    a, b = K @ pi, L @ pi
    return float(pi @ ((K * L) @ pi) - 2.0 * pi @ (a * b) + (pi @ a) * (pi @ b))


def _weighted_population_hsic_grad(K, L, pi):
    """Value and gradient of weighted_population_hsic with respect to `pi`."""
    a, b = K @ pi, L @ pi
    KL = K * L
    klp = KL @ pi
    sK, sL = pi @ a, pi @ b
    value = pi @ klp - 2.0 * pi @ (a * b) + sK * sL
    grad = 2.0 * klp - 2.0 * (a * b + K @ (pi * b) + L @ (pi * a)) + 2.0 * (a * sL + b * sK)
    return float(value), grad


class HsicObjective:
    """Masked, weighted cross-modal HSIC over a fixed set of items.

    Shared features, mask and bandwidths are frozen at construction; only the
    weights vary between calls.

    Parameters
    ----------
    features : per-modality (num_items, d') shared-space matrices
    mask : per-modality length-d' importance vectors, or None for all ones
    items : item indices entering the sum; None means all items
    """

    def __init__(self, features: Sequence[np.ndarray], mask: Sequence[np.ndarray] | None = None,
                 items=None, mode: str = "per_item", chunk: int = 256):
        if mode not in MODES:
            raise ValueError(f"hsic mode must be one of {MODES}, got {mode!r}")
        features = [np.asarray(f, dtype=np.float64) for f in features]
        if len({f.shape for f in features}) > 1:
            raise ValueError("all modalities must share the same (num_items, d') shape")
        self.num_items = features[0].shape[0] if features else 0
        self.items = (np.arange(self.num_items) if items is None
                      else np.asarray(items, dtype=np.int64))
        self.mode = mode
        self.chunk = chunk
        if mask is None:
            mask = [np.ones(f.shape[1]) for f in features]
        self.masked = [f[self.items] * np.asarray(m, dtype=np.float64)[None, :]
                       for f, m in zip(features, mask)]
        self.pairs = list(itertools.combinations(range(len(features)), 2))
        if len(self.items) == 0:
            logger.warning("HSIC objective over an empty item subset is identically 0")
        if mode == "per_item":
            self.sigmas = [_row_median_sigma(X) for X in self.masked]
        else:
            self.kernels = []
            self.sigmas = []
            for X in self.masked:
                D = _sq_dists(X)
                iu = np.triu_indices(len(X), k=1)
                med = float(np.sqrt(np.median(D[iu]))) if len(X) > 1 else 0.0
                sigma = med if med**2 > 0 else 1.0
                self.sigmas.append(sigma)
                self.kernels.append(np.exp(-D / sigma**2))

    # per-item ----------------------------------------------------------------

    def _per_item_block(self, w_sub, lo, hi, with_grad):
        d = self.masked[0].shape[1]
        norm = 1.0 / (d - 1) ** 2
        w = w_sub[lo:hi]
        values = np.zeros(hi - lo)
        grads = np.zeros(hi - lo)
        cache = {}
        for m in {m for pair in self.pairs for m in pair}:
            X = self.masked[m][lo:hi]
            Z = X / self.sigmas[m][lo:hi, None]
            with np.errstate(over="ignore"):
                D = (Z[:, :, None] - Z[:, None, :]) ** 2
            K = np.exp(-(w * w)[:, None, None] * D)
            cache[m] = (D, K, _center(K))
        for m1, m2 in self.pairs:
            D1, K1, K1c = cache[m1]
            D2, K2, K2c = cache[m2]
            values += norm * np.einsum("njk,njk->n", K1, K2c)
            if with_grad:
                # dK/dw = -2 w D K
                dK1 = np.einsum("njk,njk->n", D1 * K1, K2c)
                dK2 = np.einsum("njk,njk->n", K1c, D2 * K2)
                grads += norm * (-2.0 * w) * (dK1 + dK2)
        return values, grads

    def _per_item(self, w_sub, with_grad):
        values = np.zeros(len(w_sub))
        grads = np.zeros(len(w_sub))
        for lo in range(0, len(w_sub), self.chunk):
            hi = min(lo + self.chunk, len(w_sub))
            values[lo:hi], grads[lo:hi] = self._per_item_block(w_sub, lo, hi, with_grad)
        return values, grads

    # population --------------------------------------------------------------

    def _population(self, w_sub, with_grad):
        total = w_sub.sum()
        if total <= 0:
            raise NumericalError("population HSIC needs a positive total weight")
        pi = w_sub / total
        used = sorted({m for pair in self.pairs for m in pair})
        self_terms = {m: _weighted_population_hsic_grad(self.kernels[m], self.kernels[m], pi)
                      for m in used}
        value = 0.0
        g_pi = np.zeros(len(w_sub))
        for m1, m2 in self.pairs:
            h11, g11 = self_terms[m1]
            h22, g22 = self_terms[m2]
            if h11 <= 0 or h22 <= 0:
                continue
            h12, g12 = _weighted_population_hsic_grad(self.kernels[m1], self.kernels[m2], pi)
            scale = 1.0 / np.sqrt(h11 * h22)
            v = h12 * scale
            value += v
            if with_grad:
                g_pi += scale * g12 - 0.5 * v * (g11 / h11 + g22 / h22)
        # pi = w / sum(w)
        g_w = (g_pi - pi @ g_pi) / total
        return value, g_w

    # public ------------------------------------------------------------------

    def _subset_weights(self, weights):
        weights = np.asarray(weights, dtype=np.float64)
        if len(weights) != self.num_items:
            raise ValueError(f"expected {self.num_items} weights, got {len(weights)}")
        return weights[self.items]

    def item_values(self, weights) -> np.ndarray:
        """Per-item HSIC terms (per_item mode only)."""
        if self.mode != "per_item":
            raise ValueError("item_values is defined for per_item mode only")
        values, _ = self._per_item(self._subset_weights(weights), with_grad=False)
        return _clamp(values)

    def loss(self, weights) -> float:
        if len(self.items) == 0 or not self.pairs:
            return 0.0
        w_sub = self._subset_weights(weights)
        if self.mode == "per_item":
            values, _ = self._per_item(w_sub, with_grad=False)
            return float(_clamp(values).sum())
        value, _ = self._population(w_sub, with_grad=False)
        return float(_clamp(value))

    def grad_weights(self, weights) -> tuple[float, np.ndarray]:
        """Loss and its gradient with respect to every item weight."""
        grad = np.zeros(self.num_items)
        if len(self.items) == 0 or not self.pairs:
            return 0.0, grad
        w_sub = self._subset_weights(weights)
        if self.mode == "per_item":
            values, g = self._per_item(w_sub, with_grad=True)
            value = float(_clamp(values).sum())
        else:
            value, g = self._population(w_sub, with_grad=True)
            value = float(_clamp(value))
        grad[self.items] = g
        return value, grad


def weights_from_logits(logits, w_max: float) -> np.ndarray:
    return w_max * expit(np.asarray(logits, dtype=np.float64))


def masked_weighted_hsic_loss(features, mask, weights, item_subset=None, mode: str = "per_item") -> float:
    """Sum of cross-modal HSIC terms between weighted, masked shared features."""
    return HsicObjective(features, mask, item_subset, mode).loss(weights)


def penalized_objective_grad(objective: HsicObjective, logits, w_max: float = 2.0,
                             penalty: float = 0.0) -> tuple[float, np.ndarray]:
    """HSIC + penalty * mean((w - 1)^2) and its gradient w.r.t. the logits.

    Only the objective's items receive a non-zero gradient.
    """
    logits = np.asarray(logits, dtype=np.float64)
    w = weights_from_logits(logits, w_max)
    value, g_w = objective.grad_weights(w)
    items = objective.items
    if len(items) and penalty:
        dev = w[items] - 1.0
        value += penalty * float(np.mean(dev * dev))
        g_w[items] += penalty * 2.0 * dev / len(items)
    # w = w_max * sigmoid(logit)
    dw = w * (1.0 - w / w_max)
    return value, g_w * dw


def hsic_grad_weight_logits(features, mask, logits, item_subset=None, mode: str = "per_item",
                            w_max: float = 2.0, penalty: float = 0.0) -> np.ndarray:
    """Gradient of the penalized weighted HSIC loss with respect to weight logits."""
    objective = HsicObjective(features, mask, item_subset, mode)
    return penalized_objective_grad(objective, logits, w_max, penalty)[1]
