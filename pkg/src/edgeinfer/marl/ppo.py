"""Clipped surrogate objective."""

from __future__ import annotations

import numpy as np

from ..nn import autodiff as ad
from ..nn.autodiff import Tensor


def ppo_clip_objective(
    logp_new: Tensor,
    logp_old: np.ndarray,
    adv: np.ndarray,
    clip_eps: float = 0.2,
) -> Tensor:
    """Mean of ``min(ratio * A, clip(ratio) * A)`` over the batch.

    ``logp_old`` and ``adv`` are treated as constants; gradients flow only
    through ``logp_new``. Maximize this (the loss negates it).
    """
    old = np.asarray(logp_old, dtype=np.float64).reshape(-1, 1)
    advantage = Tensor(np.asarray(adv, dtype=np.float64).reshape(-1, 1))
    if logp_new.shape != old.shape:
        raise ValueError("logp_new and logp_old must have matching lengths")
    ratio = ad.exp(ad.sub(logp_new, Tensor(old)))
    unclipped = ad.mul(ratio, advantage)
    clipped = ad.mul(ad.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps), advantage)
    return ad.mean_all(ad.minimum(unclipped, clipped))
