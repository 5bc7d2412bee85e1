"""Task-relevant dimension mask from accumulated transform gradients."""

from __future__ import annotations

from pathlib import Path
from typing import Iterable

import numpy as np


class ImportanceAccumulator:
    """Running sum of |dL/dW_m| over the d_m input columns, per modality."""

    def __init__(self, modalities):
        self.modalities = tuple(modalities)
        self.alpha: dict[str, np.ndarray] = {}
        self.batches = 0

    def add(self, grad_W: dict[str, np.ndarray]) -> None:
        for m in self.modalities:
            rows = np.abs(grad_W[m]).sum(axis=1)
            self.alpha[m] = self.alpha[m] + rows if m in self.alpha else rows
        self.batches += 1

    def result(self) -> dict[str, np.ndarray]:
        if self.batches == 0:
            raise ValueError("no gradient batches accumulated; mask is undefined")
        return {m: a.copy() for m, a in self.alpha.items()}


def accumulate_importance(grad_batches: Iterable[np.ndarray]) -> np.ndarray:
    """alpha_i = sum over batches and columns j of |grad[i, j]|."""
    alpha = None
    for grad in grad_batches:
        rows = np.abs(np.asarray(grad, dtype=np.float64)).sum(axis=1)
        alpha = rows if alpha is None else alpha + rows
    if alpha is None:
        raise ValueError("no gradient batches given; mask is undefined")
    return alpha


def normalize_mask(alpha, temperature: float = 1.0) -> np.ndarray:
    """softmax(alpha / temperature) scaled so the entries sum to len(alpha)."""
    alpha = np.asarray(alpha, dtype=np.float64)
    if not np.isfinite(alpha).all():
        raise ValueError("importance vector has non-finite entries")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    z = alpha / temperature
    e = np.exp(z - z.max())
    return e / e.sum() * len(alpha)


def compute_mask(alpha: dict[str, np.ndarray], temperature: float = 1.0) -> dict[str, np.ndarray]:
    return {m: normalize_mask(a, temperature) for m, a in alpha.items()}


def append_mask_tsv(path, epoch: int, mask: dict[str, np.ndarray]) -> None:
    with Path(path).open("a", encoding="utf-8", newline="\n") as fh:
        for m, vec in mask.items():
            for dim, value in enumerate(vec):
                fh.write(f"{epoch}\t{m}\t{dim}\t{float(value)!r}\n")
