"""Link gains and Shannon rates.

Log-distance path loss with lognormal shadowing; noise is the -174 dBm/Hz
thermal floor plus a receiver noise figure over the allocated bandwidth.
The same per-user bandwidth grant is used for both uplink and downlink,
so rate asymmetry comes only from the transmit powers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

THERMAL_NOISE_DBM_PER_HZ = -174.0


@dataclass(frozen=True)
class ChannelParams:
    pathloss_exponent: float = 3.5
    ref_loss_db: float = 30.0  # at 1 m
    shadow_sigma_db: float = 8.0
    noise_figure_db: float = 6.0
    carrier_ghz: float = 3.5  # recorded only; ref_loss_db already encodes it
    server_tx_power_dbm: tuple[float, float] = (30.0, 43.0)
    user_tx_power_dbm: tuple[float, float] = (20.0, 30.0)

    def validate(self) -> None:
        if self.pathloss_exponent <= 0:
            raise ValueError("pathloss exponent must be positive")
        if self.shadow_sigma_db < 0:
            raise ValueError("shadow sigma must be non-negative")
        for lo, hi in (self.server_tx_power_dbm, self.user_tx_power_dbm):
            if hi < lo:
                raise ValueError("empty transmit power range")


@dataclass(frozen=True)
class Link:
    gain: float  # linear power ratio
    distance_m: float


def dbm_to_watts(dbm: float) -> float:
    return 10.0 ** ((dbm - 30.0) / 10.0)


def path_gain(distance_m, shadow_db, params: ChannelParams):
    """Linear power gain at ``distance_m`` with a shadowing draw in dB.

    Distances below 1 m are clamped to the reference distance.
    """
    d = np.maximum(np.asarray(distance_m, dtype=float), 1.0)
    loss_db = params.ref_loss_db + 10.0 * params.pathloss_exponent * np.log10(d) + shadow_db
    gain = 10.0 ** (-loss_db / 10.0)
    return float(gain) if np.isscalar(distance_m) or np.ndim(gain) == 0 else gain


def noise_power(bandwidth_hz: float, params: ChannelParams) -> float:
    """Receiver noise power in watts over ``bandwidth_hz``."""
    if bandwidth_hz < 0:
        raise ValueError("bandwidth must be non-negative")
    if bandwidth_hz == 0:
        return 0.0
    dbm = THERMAL_NOISE_DBM_PER_HZ + 10.0 * math.log10(bandwidth_hz) + params.noise_figure_db
    return dbm_to_watts(dbm)


def shannon_rate(bandwidth_hz: float, tx_power_w: float, gain: float, noise_w: float) -> float:
    """Achievable rate in bits/s: B * log2(1 + P*g / sigma^2)."""
    if min(bandwidth_hz, tx_power_w, gain) < 0 or noise_w < 0:
        raise ValueError("rate inputs must be non-negative")
    if bandwidth_hz == 0:
        return 0.0
    if noise_w <= 0:
        raise ValueError("positive bandwidth requires positive noise power")
    return bandwidth_hz * math.log2(1.0 + tx_power_w * gain / noise_w)
