"""Masked categorical distributions for action sampling.

Sampling is plain numpy (no gradients are needed on the rollout path);
log-probabilities for policy updates are recomputed through the autodiff
``masked_log_softmax`` instead.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class MaskedCategorical:
    """Categorical over the unmasked entries; masked entries have probability 0."""

    logits: np.ndarray
    mask: np.ndarray  # True = selectable

    def __post_init__(self):
        self.logits = np.asarray(self.logits, dtype=np.float64).reshape(-1)
        self.mask = np.asarray(self.mask, dtype=bool).reshape(-1)
        if self.logits.shape != self.mask.shape:
            raise ValueError("logits and mask must have equal length")
        if not self.mask.any():
            raise ValueError("all categories are masked")

    def log_probs(self) -> np.ndarray:
        shifted = np.where(self.mask, self.logits - self.logits[self.mask].max(), -np.inf)
        z = np.where(self.mask, np.exp(shifted), 0.0)
        return np.where(self.mask, shifted - np.log(z.sum()), -np.inf)

    def probs(self) -> np.ndarray:
        shifted = np.where(self.mask, self.logits - self.logits[self.mask].max(), -np.inf)
        z = np.where(self.mask, np.exp(shifted), 0.0)
        return z / z.sum()

    def entropy(self) -> float:
        lp = self.log_probs()
        p = np.where(self.mask, np.exp(np.where(self.mask, lp, 0.0)), 0.0)
        return float(-(p * np.where(self.mask, lp, 0.0)).sum())

    def sample(self, rng: np.random.Generator) -> int:
        p = self.probs()
        u = rng.random()
        return int(np.searchsorted(np.cumsum(p), u, side="right").clip(0, len(p) - 1))

    def mode(self) -> int:
        return int(np.where(self.mask, self.logits, -np.inf).argmax())


def masked_sample(dist: MaskedCategorical, rng: np.random.Generator) -> tuple[int, float, float]:
    """Draw one index; returns (index, log_prob, entropy)."""
    idx = dist.sample(rng)
    return idx, float(dist.log_probs()[idx]), dist.entropy()
