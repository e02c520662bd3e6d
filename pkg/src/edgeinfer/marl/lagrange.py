"""Projected dual ascent on the shared delay-constraint multiplier."""

from __future__ import annotations

from dataclasses import dataclass, replace


@dataclass(frozen=True)
class LagrangeState:
    lam: float = 0.01
    alpha: float = 0.01  # dual step size
    bounds: tuple[float, float] = (0.0, 100.0)
    j_bar: float = 3.0  # per-step mean delay threshold, seconds

    def validate(self) -> None:
        lo, hi = self.bounds
        if not lo <= self.lam <= hi:
            raise ValueError(f"multiplier {self.lam} outside bounds {self.bounds}")
        if self.alpha < 0 or self.j_bar < 0:
            raise ValueError("dual step and threshold must be non-negative")


def lagrangian_dual_update(state: LagrangeState, j_hat: float) -> LagrangeState:
    """One projected-gradient step toward penalizing constraint violation.

    ``j_hat`` is the measured mean per-step delay of the latest batch.
    """
    if j_hat < 0:
        raise ValueError("measured constraint cost must be non-negative")
    lo, hi = state.bounds
    lam = min(hi, max(lo, state.lam + state.alpha * (j_hat - state.j_bar)))
    return replace(state, lam=lam)
