"""Heuristic decision rules and the named baseline/ablation configurations.

The heuristics mirror common edge-computing practice: popularity- and
LRU-driven caching, channel-strongest association, equal resource shares,
and a greedy deepest-feasible partition under equal-share delay estimates.
RL ablations are expressed as flag combinations consumed by the trainer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .channel import noise_power, shannon_rate
from .config import SystemConfig
from .costs import BITS_PER_BYTE
from .profiles import ModelProfile, partition_summary


@dataclass(frozen=True)
class BaselineSpec:
    """Rule combination naming one algorithm variant."""

    name: str
    association: str = "learned"  # learned | channel-strongest | channel-strongest-with-model
    partition: str = "learned"  # learned | full-local | full-edge | greedy-deepest
    allocation: str = "learned"  # learned | equal-share
    deployment: str = "learned"  # learned | popularity | lru
    constraint: str = "lagrangian"  # lagrangian | none
    centralized_critics: bool = True

    @property
    def learned_user(self) -> bool:
        return self.association == "learned"

    @property
    def trains(self) -> bool:
        return self.learned_user or self.allocation == "learned" or self.deployment == "learned"

    def validate(self) -> None:
        if self.name not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.name!r}")
        if (self.association == "learned") != (self.partition == "learned"):
            raise ValueError("association and partition are one joint policy")


ALGORITHMS: dict[str, BaselineSpec] = {
    "hc-mappo-l": BaselineSpec("hc-mappo-l"),
    "h-mappo": BaselineSpec("h-mappo", constraint="none"),
    "hc-ippo-l": BaselineSpec("hc-ippo-l", centralized_critics=False),
    "h-ippo": BaselineSpec("h-ippo", constraint="none", centralized_critics=False),
    "heuristic-mappo-l": BaselineSpec(
        "heuristic-mappo-l", allocation="equal-share", deployment="lru"
    ),
    "local-only": BaselineSpec(
        "local-only",
        association="channel-strongest",
        partition="full-local",
        allocation="equal-share",
        deployment="popularity",
        constraint="none",
    ),
    "edge-only": BaselineSpec(
        "edge-only",
        association="channel-strongest",
        partition="full-edge",
        allocation="equal-share",
        deployment="popularity",
        constraint="none",
    ),
    "greedy": BaselineSpec(
        "greedy",
        association="channel-strongest-with-model",
        partition="greedy-deepest",
        allocation="equal-share",
        deployment="popularity",
        constraint="none",
    ),
}


def algorithm(name: str) -> BaselineSpec:
    try:
        return ALGORITHMS[name]
    except KeyError:
        raise ValueError(f"unknown algorithm {name!r}; choose from {sorted(ALGORITHMS)}") from None


def fixed_policies(kind: str) -> BaselineSpec:
    """The fully fixed rule bundles: everything-on-device or everything-offloaded."""
    if kind not in ("local-only", "edge-only"):
        raise ValueError("kind must be 'local-only' or 'edge-only'")
    return ALGORITHMS[kind]


# ---------------------------------------------------------------------------
# deployment heuristics
# ---------------------------------------------------------------------------

def popularity_deploy(counts: np.ndarray, storage: int, sizes: np.ndarray) -> list[int]:
    """Models in descending request count, greedily packed into storage.

    Ties break toward the lower model id; models that no longer fit are
    skipped rather than stopping the fill.
    """
    counts = np.asarray(counts)
    order = sorted(range(len(counts)), key=lambda i: (-counts[i], i))
    return _greedy_fill(order, storage, sizes)


def lru_deploy(last_used: np.ndarray, storage: int, sizes: np.ndarray) -> list[int]:
    """Most-recently-used models first; never-used models fill by id order."""
    last_used = np.asarray(last_used)
    order = sorted(range(len(last_used)), key=lambda i: (-last_used[i], i))
    return _greedy_fill(order, storage, sizes)


def _greedy_fill(order: list[int], storage: int, sizes: np.ndarray) -> list[int]:
    chosen, used = [], 0
    for model in order:
        size = int(sizes[model])
        if used + size <= storage:
            chosen.append(model)
            used += size
    return chosen


# ---------------------------------------------------------------------------
# association + partition heuristics
# ---------------------------------------------------------------------------

def strongest_server(gains_k: np.ndarray, deployed: np.ndarray | None = None) -> int:
    """Highest-gain server; optionally restricted to servers with the model.

    Falls back to the overall strongest server when none carries the model.
    Ties break toward the lower server index (argmax convention).
    """
    gains_k = np.asarray(gains_k, dtype=np.float64)
    if deployed is not None and np.asarray(deployed).any():
        masked = np.where(np.asarray(deployed, dtype=bool), gains_k, -np.inf)
        return int(masked.argmax())
    return int(gains_k.argmax())


def estimate_delay(
    profile: ModelProfile,
    l: int,
    batch: int,
    rate_down: float,
    rate_up: float,
    f_user: float,
    f_share: float,
) -> float:
    """Equal-share delay estimate at partition point ``l`` (hit assumed)."""
    s = partition_summary(profile, l)
    total = 0.0
    if s.download_bytes:
        total += BITS_PER_BYTE * s.download_bytes / rate_down
    total += batch * s.local_flops / f_user
    if s.upload_bytes:
        total += BITS_PER_BYTE * batch * s.upload_bytes / rate_up
    if s.edge_flops:
        total += batch * s.edge_flops / f_share
    return total


def greedy_split(
    profile: ModelProfile,
    batch: int,
    rate_down: float,
    rate_up: float,
    f_user: float,
    f_share: float,
    tau_bar: float,
) -> int:
    """Deepest partition point whose estimated delay meets the deadline.

    Falls back to the delay-minimizing point when nothing is feasible.
    """
    delays = [
        estimate_delay(profile, l, batch, rate_down, rate_up, f_user, f_share)
        for l in range(profile.layer_count + 1)
    ]
    feasible = [l for l, d in enumerate(delays) if d <= tau_bar]
    if feasible:
        return feasible[-1]
    return int(np.argmin(delays))


def heuristic_user_actions(
    spec: BaselineSpec,
    requests,
    catalog: list[ModelProfile],
    config: SystemConfig,
    gain: np.ndarray,  # (J, K)
    deployment: np.ndarray,  # (J, I)
    f_user: np.ndarray,
    f_server: np.ndarray,
    bandwidth: np.ndarray,
    p_server_w: np.ndarray,
    p_user_w: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Slot-level association and split decisions for the heuristic baselines."""
    num_users = len(requests)
    servers = np.zeros(num_users, dtype=np.int64)
    for req in requests:
        k = req.user
        if spec.association == "channel-strongest-with-model":
            servers[k] = strongest_server(gain[:, k], deployment[:, req.model])
        else:
            servers[k] = strongest_server(gain[:, k])

    splits = np.zeros(num_users, dtype=np.int64)
    share_counts = np.bincount(servers, minlength=config.num_servers)
    for req in requests:
        k = req.user
        profile = catalog[req.model]
        if spec.partition == "full-local":
            splits[k] = profile.layer_count
        elif spec.partition == "full-edge":
            splits[k] = 0
        elif spec.partition == "greedy-deepest":
            j = int(servers[k])
            n = max(1, int(share_counts[j]))
            band = bandwidth[j] / n
            noise = noise_power(band, config.channel)
            rate_down = shannon_rate(band, p_server_w[j], gain[j, k], noise)
            rate_up = shannon_rate(band, p_user_w[k], gain[j, k], noise)
            splits[k] = greedy_split(
                profile,
                req.batch,
                rate_down,
                rate_up,
                f_user[k],
                f_server[j] / n,
                config.weights.tau_bar,
            )
        else:
            raise ValueError(f"not a heuristic partition rule: {spec.partition!r}")
    return servers, splits


def equal_share_weights(servers: np.ndarray, num_servers: int, num_users: int) -> np.ndarray:
    """Uniform weights over each server's associated users; zeros elsewhere."""
    weights = np.zeros((num_servers, num_users))
    for j in range(num_servers):
        members = servers == j
        if members.any():
            weights[j, members] = 1.0
    return weights
