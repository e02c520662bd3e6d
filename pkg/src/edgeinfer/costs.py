"""Per-user delay, energy and privacy cost models.

Byte volumes are converted to bits (x8) before dividing by link rates.
Compute delays divide sample-count-scaled FLOPs by FLOPS capacities. A
request whose model is not deployed on the chosen server fails outright
and is charged the large constant ``tau_fail`` instead of a component sum.
"""

from __future__ import annotations

from dataclasses import dataclass

from .profiles import PartitionSummary

BITS_PER_BYTE = 8


class InfeasibleLinkError(ValueError):
    """A positive data volume was routed over a zero-rate link."""


@dataclass(frozen=True)
class CostWeights:
    mu1: float = 5.0  # privacy weight
    mu2: float = 5.0  # energy weight
    mu3: float = 10.0  # delay-violation weight in the user reward
    alpha1: float = 0.31  # baseline privacy coefficient
    alpha2: float = 1.88  # preference-sensitivity coefficient
    tau_bar: float = 3.0  # delay constraint, seconds
    tau_fail: float = 15.0  # service-unavailable delay, seconds
    r_fail: float = -50.0  # cache-miss reward

    def validate(self) -> None:
        non_negative = (self.mu1, self.mu2, self.mu3, self.alpha1, self.alpha2, self.tau_bar)
        if any(w < 0 for w in non_negative):
            raise ValueError("cost weights must be non-negative")
        if self.tau_fail <= self.tau_bar:
            raise ValueError("tau_fail must exceed tau_bar")


@dataclass(frozen=True)
class DelayBreakdown:
    download_s: float
    local_s: float
    upload_s: float
    edge_s: float
    total_s: float
    failed: bool = False


def _transfer_seconds(volume_bytes: float, rate_bps: float, what: str) -> float:
    if volume_bytes == 0:
        return 0.0
    if rate_bps <= 0:
        raise InfeasibleLinkError(f"{what}: {volume_bytes} bytes over a zero-rate link")
    return BITS_PER_BYTE * volume_bytes / rate_bps


def _compute_seconds(flops: float, capacity: float, what: str) -> float:
    if flops == 0:
        return 0.0
    if capacity <= 0:
        raise InfeasibleLinkError(f"{what}: {flops} FLOPs with zero capacity")
    return flops / capacity


def delay_components(
    summary: PartitionSummary,
    batch: int,
    rate_down: float,
    rate_up: float,
    f_user: float,
    f_alloc: float,
    hit: bool,
    tau_fail: float = 15.0,
) -> DelayBreakdown:
    """End-to-end delay split into download, local, upload and edge parts.

    Parameters are downloaded once per request; features are uploaded per
    sample, and compute scales with the batch size.
    """
    if not hit:
        return DelayBreakdown(0.0, 0.0, 0.0, 0.0, tau_fail, failed=True)
    download = _transfer_seconds(summary.download_bytes, rate_down, "downlink")
    local = _compute_seconds(batch * summary.local_flops, f_user, "device compute")
    upload = _transfer_seconds(batch * summary.upload_bytes, rate_up, "uplink")
    edge = _compute_seconds(batch * summary.edge_flops, f_alloc, "edge compute")
    return DelayBreakdown(download, local, upload, edge, download + local + upload + edge)


def energy(
    summary: PartitionSummary, batch: int, eps: float, p_user_w: float, upload_s: float
) -> float:
    """Device-side energy: compute joules-per-FLOP plus uplink radio energy."""
    if min(batch, eps, p_user_w, upload_s) < 0:
        raise ValueError("energy inputs must be non-negative")
    return eps * batch * summary.local_flops + p_user_w * upload_s


def privacy_cost(leakage: float, pre_k: float, batch: int, raw_mb: float, w: CostWeights) -> float:
    """Exposure-weighted leakage cost; raw input size enters in megabytes."""
    if not 0.0 <= leakage <= 1.0:
        raise ValueError("leakage must lie in [0, 1]")
    return (w.alpha1 + w.alpha2 * pre_k) * leakage * batch * raw_mb


def slot_cost(per_user_energy: list[float], per_user_privacy: list[float], w: CostWeights) -> float:
    """Instantaneous system cost: weighted per-user means of privacy and energy."""
    if len(per_user_energy) != len(per_user_privacy):
        raise ValueError("energy and privacy lists must have equal length")
    if not per_user_energy:
        raise ValueError("slot cost needs at least one user")
    k = len(per_user_energy)
    return w.mu1 * sum(per_user_privacy) / k + w.mu2 * sum(per_user_energy) / k
