"""Generalized advantage estimation."""

from __future__ import annotations

import numpy as np


def gae(
    rewards: np.ndarray,
    values: np.ndarray,
    bootstrap: float = 0.0,
    gamma: float = 0.99,
    lam: float = 0.95,
) -> tuple[np.ndarray, np.ndarray]:
    """Advantages and returns from one finite reward/value sequence.

    ``bootstrap`` is the value estimate beyond the last step (zero at a true
    episode end). Returns are advantages plus values.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if rewards.shape != values.shape or rewards.ndim != 1:
        raise ValueError("rewards and values must be equal-length 1-D sequences")
    n = rewards.shape[0]
    advantages = np.zeros(n)
    next_value = bootstrap
    acc = 0.0
    for t in range(n - 1, -1, -1):
        delta = rewards[t] + gamma * next_value - values[t]
        acc = delta + gamma * lam * acc
        advantages[t] = acc
        next_value = values[t]
    return advantages, advantages + values


def gae_bruteforce(
    rewards: np.ndarray,
    values: np.ndarray,
    bootstrap: float = 0.0,
    gamma: float = 0.99,
    lam: float = 0.95,
) -> np.ndarray:
    """Direct double-sum evaluation of the GAE definition (test oracle)."""
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    n = rewards.shape[0]
    ext_values = np.append(values, bootstrap)
    deltas = rewards + gamma * ext_values[1:] - ext_values[:-1]
    out = np.zeros(n)
    for t in range(n):
        out[t] = sum((gamma * lam) ** l * deltas[t + l] for l in range(n - t))
    return out


def normalize_advantages(adv: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    adv = np.asarray(adv, dtype=np.float64)
    return (adv - adv.mean()) / (adv.std() + eps)
