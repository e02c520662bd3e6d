"""Discrete-time environment for collaborative inference with three agent layers.

Each slot: servers refresh their model deployment every ``deploy_interval``
slots (macro decisions), every user picks a server and a partition point for
its request, and each server splits its compute and bandwidth among its
associated users. Outcomes are per-user delay/energy/privacy, per-layer
rewards, and the per-user constraint cost (the raw delay).

The environment is a deterministic function of (seed, episode, action
sequence): all randomness is drawn in ``reset`` and ``sample_slot_requests``.
Topology (positions, capacities, preferences) depends on the seed only;
shadowing and the request stream are re-drawn per episode.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .channel import dbm_to_watts, noise_power, path_gain, shannon_rate
from .config import SystemConfig
from .costs import CostWeights, DelayBreakdown, delay_components, energy, privacy_cost
from .profiles import ModelProfile, partition_summary


class EnvError(RuntimeError):
    """Malformed actions or an internal consistency failure."""


class StorageViolationError(EnvError):
    """A deployment macro-action exceeded server storage (a masking bug)."""


@dataclass(frozen=True)
class Request:
    user: int
    model: int
    batch: int


@dataclass
class SlotState:
    """Decision variables and allocations in effect for one slot."""

    deployment: np.ndarray  # (J, I) binary
    associations: np.ndarray  # (K,) server index per user
    partitions: np.ndarray  # (K,) split point per user
    compute_alloc: np.ndarray  # (J, K) FLOPS
    bandwidth_alloc: np.ndarray  # (J, K) Hz


@dataclass
class SlotOutcome:
    slot: int
    requests: list[Request]
    state: SlotState
    delays: list[DelayBreakdown]
    energies: np.ndarray  # (K,) joules
    privacy: np.ndarray  # (K,)
    hits: np.ndarray  # (K,) bool
    user_rewards: np.ndarray  # (K,)
    costs: np.ndarray  # (K,) constraint cost = raw delay
    alloc_rewards: np.ndarray  # (J,)
    deploy_rewards: np.ndarray | None  # (J,), only on interval-final slots


@dataclass
class ObservationBundle:
    deploy_local: np.ndarray  # (J, 3I)
    deploy_global: np.ndarray  # (J, 3I + IJ)
    user_local: np.ndarray  # (K, d_m + d_s + IJ)
    user_global: np.ndarray  # (2K + IJ,)
    alloc: np.ndarray  # (J, 3K)
    model_ids: np.ndarray  # (K,) raw request features for the policies
    batches: np.ndarray  # (K,)
    deployment_vec: np.ndarray  # (IJ,)


def sample_requests(
    rng: np.random.Generator,
    zipf_s: float,
    num_models: int,
    num_users: int,
    batch_range: tuple[int, int] = (1, 4),
) -> list[Request]:
    """One request per user; model rank follows a Zipf law, batch is uniform."""
    if num_models < 1:
        raise ValueError("need at least one model")
    weights = np.arange(1, num_models + 1, dtype=np.float64) ** (-zipf_s)
    weights /= weights.sum()
    models = rng.choice(num_models, size=num_users, p=weights)
    batches = rng.integers(batch_range[0], batch_range[1] + 1, size=num_users)
    return [Request(k, int(models[k]), int(batches[k])) for k in range(num_users)]


def server_grid_positions(num_servers: int, area: tuple[float, float]) -> np.ndarray:
    """Servers at the cell centers of the smallest grid covering the area."""
    cols = int(np.ceil(np.sqrt(num_servers)))
    rows = int(np.ceil(num_servers / cols))
    positions = []
    for idx in range(num_servers):
        r, c = divmod(idx, cols)
        positions.append(((c + 0.5) * area[0] / cols, (r + 0.5) * area[1] / rows))
    return np.asarray(positions)


def capacity_partition(cap: float, weights: np.ndarray) -> np.ndarray:
    """Split ``cap`` proportionally to ``weights`` without exceeding it.

    The capacity constraint is enforced against the exact (fsum) total, so it
    holds regardless of how downstream code groups the row summation. Any
    float excess is shaved off the largest share, one ulp at a time.
    """
    weights = np.asarray(weights, dtype=np.float64)
    total = weights.sum()
    if not np.isfinite(total) or total <= 0 or (weights < 0).any():
        raise EnvError("allocation weights must be non-negative with positive sum")
    alloc = cap * (weights / total)
    s = math.fsum(alloc)
    if s > cap:
        alloc *= cap / s
        while (s := math.fsum(alloc)) > cap:
            top = int(np.argmax(alloc))
            alloc[top] = np.nextafter(alloc[top], 0.0)
    return alloc


def user_reward(hit: bool, priv: float, en: float, delay: float, w: CostWeights) -> float:
    """Per-user reward: weighted privacy/energy/violation penalty, or the miss reward."""
    if not hit:
        return w.r_fail
    return -(w.mu1 * priv + w.mu2 * en + w.mu3 * max(delay - w.tau_bar, 0.0))


def alloc_reward(delays: np.ndarray, associated: np.ndarray) -> float:
    """Negative mean delay over the associated users; zero when idle."""
    associated = np.asarray(associated, dtype=bool)
    if not associated.any():
        return 0.0
    return float(-np.mean(np.asarray(delays)[associated]))


def deploy_reward(hit_count: float, migration_s: float, mu_hit: float, mu_mig: float) -> float:
    """Interval reward: hit count minus the time cost of fetching new models."""
    return mu_hit * hit_count - mu_mig * migration_s


class FixedObsEncoder:
    """Deterministic, non-learned embeddings used when no policy is wired in."""

    def __init__(self, num_models: int, d_model: int = 8, d_scalar: int = 8, seed: int = 0):
        rng = np.random.default_rng(np.random.SeedSequence((seed, 0x0B5)))
        self.d_model = d_model
        self.d_scalar = d_scalar
        self._table = rng.standard_normal((num_models, d_model)) / np.sqrt(d_model)
        self._w = rng.standard_normal((1, d_scalar)) / np.sqrt(d_scalar)

    def embed_models(self, ids: np.ndarray) -> np.ndarray:
        return self._table[np.asarray(ids, dtype=int)]

    def embed_batches(self, batches: np.ndarray) -> np.ndarray:
        x = np.asarray(batches, dtype=np.float64).reshape(-1, 1)
        return np.tanh(x @ self._w)


TRACE_COLUMNS = ["slot", "user", "server", "split", "delay_s", "energy_j", "privacy", "hit"]


class CollabInferenceEnv:
    """Single simulated system instance; never share one across threads."""

    def __init__(self, config: SystemConfig, catalog: list[ModelProfile], encoder=None):
        config.validate()
        if len(catalog) != config.num_models:
            raise EnvError(
                f"catalog has {len(catalog)} models but config expects {config.num_models}"
            )
        self.config = config
        self.catalog = catalog
        self.encoder = encoder or FixedObsEncoder(config.num_models)
        self.model_sizes = np.array([p.total_bytes for p in catalog], dtype=np.int64)
        self.layer_counts = np.array([p.layer_count for p in catalog], dtype=np.int64)
        self.max_layers = int(self.layer_counts.max())
        self._trace = None
        self._ready = False

    def attach_trace(self, handle) -> None:
        """Stream one CSV row per (slot, user) to an open text handle."""
        self._trace = handle
        handle.write(",".join(TRACE_COLUMNS) + "\n")

    # ------------------------------------------------------------------
    # episode lifecycle
    # ------------------------------------------------------------------

    def reset(self, seed: int, episode: int = 0) -> ObservationBundle:
        cfg = self.config
        topo_rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, seed, 0x7070)))
        epi_rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, seed, episode, 0xE01)))
        self._rng_requests = np.random.default_rng(
            np.random.SeedSequence((cfg.seed, seed, episode, 0x9E9))
        )

        J, K, I = cfg.num_servers, cfg.num_users, cfg.num_models
        self.server_pos = server_grid_positions(J, cfg.area_m)
        self.user_pos = topo_rng.uniform((0.0, 0.0), cfg.area_m, size=(K, 2))
        self.f_user = topo_rng.uniform(*cfg.user_flops_range, size=K)
        self.f_server = topo_rng.uniform(*cfg.server_flops_range, size=J)
        self.bandwidth = topo_rng.uniform(*cfg.server_bandwidth_range_hz, size=J)
        lo, hi = cfg.server_storage_range_bytes
        self.storage = topo_rng.integers(lo, hi + 1, size=J, dtype=np.int64)
        self.c2e_rate = topo_rng.uniform(*cfg.cloud_edge_rate_range_bps, size=J)
        self.p_server_w = dbm_to_watts(topo_rng.uniform(*cfg.channel.server_tx_power_dbm, size=J))
        self.p_user_w = dbm_to_watts(topo_rng.uniform(*cfg.channel.user_tx_power_dbm, size=K))
        self.pre = topo_rng.uniform(*cfg.privacy_pref_range, size=K)
        self.eps = topo_rng.uniform(*cfg.energy_coeff_range, size=K)

        diff = self.server_pos[:, None, :] - self.user_pos[None, :, :]
        distances = np.sqrt((diff**2).sum(axis=2))
        shadow = epi_rng.normal(0.0, cfg.channel.shadow_sigma_db, size=(J, K))
        self.gain = path_gain(distances, shadow, cfg.channel)

        self.t = 0
        self.X = np.zeros((J, I), dtype=np.int8)
        self._req_interval = np.zeros(I, dtype=np.int64)
        self._req_prev = np.zeros(I, dtype=np.int64)
        self._srv_req_interval = np.zeros((J, I), dtype=np.int64)
        self._srv_req_prev = np.zeros((J, I), dtype=np.int64)
        self._hits_interval = np.zeros(J, dtype=np.int64)
        self._mig_seconds = np.zeros(J)
        self._last_req_slot = np.full((J, I), -1, dtype=np.int64)  # for LRU baselines
        self._pending_requests: list[Request] | None = None
        self._ready = True
        return self.build_observations(requests=None)

    @property
    def deployment_due(self) -> bool:
        return self.t % self.config.deploy_interval == 0

    def sample_slot_requests(self) -> list[Request]:
        self._require_ready()
        self._pending_requests = sample_requests(
            self._rng_requests,
            self.config.zipf_s,
            self.config.num_models,
            self.config.num_users,
            self.config.batch_range,
        )
        return self._pending_requests

    # ------------------------------------------------------------------
    # deployment phase (slow timescale)
    # ------------------------------------------------------------------

    def deployment_phase(self, macro_actions: list[list[int]]) -> None:
        """Replace every server's deployed-model set at an interval boundary.

        Storage-violating macros raise instead of being penalized: the
        deployment policy's feasibility mask must make them impossible.
        """
        self._require_ready()
        if not self.deployment_due:
            raise EnvError(f"deployment attempted mid-interval at slot {self.t}")
        if len(macro_actions) != self.config.num_servers:
            raise EnvError("one macro-action required per server")
        new_x = np.zeros_like(self.X)
        for j, macro in enumerate(macro_actions):
            seen: set[int] = set()
            used = 0
            for model in macro:
                model = int(model)
                if not 0 <= model < self.config.num_models:
                    raise EnvError(f"server {j}: model index {model} out of range")
                if model in seen:
                    raise EnvError(f"server {j}: model {model} repeated in macro-action")
                seen.add(model)
                used += int(self.model_sizes[model])
                if used > int(self.storage[j]):
                    raise StorageViolationError(
                        f"server {j}: macro exceeds storage ({used} > {self.storage[j]} bytes)"
                    )
                new_x[j, model] = 1
        old_x = self.X
        newly = (new_x == 1) & (old_x == 0)
        self._mig_seconds = (
            (newly * self.model_sizes[None, :] * 8.0).sum(axis=1) / self.c2e_rate
        )
        self.X = new_x

    # ------------------------------------------------------------------
    # fast timescale step
    # ------------------------------------------------------------------

    def step(
        self,
        requests: list[Request],
        user_actions: tuple[np.ndarray, np.ndarray],
        alloc_actions: tuple[np.ndarray, np.ndarray],
    ) -> SlotOutcome:
        self._require_ready()
        cfg = self.config
        J, K = cfg.num_servers, cfg.num_users
        if len(requests) != K:
            raise EnvError(f"expected {K} requests, got {len(requests)}")
        servers = np.asarray(user_actions[0], dtype=np.int64)
        splits = np.asarray(user_actions[1], dtype=np.int64)
        w_comp = np.asarray(alloc_actions[0], dtype=np.float64)
        w_band = np.asarray(alloc_actions[1], dtype=np.float64)
        if servers.shape != (K,) or splits.shape != (K,):
            raise EnvError("user actions must be (servers, splits) arrays of length K")
        if w_comp.shape != (J, K) or w_band.shape != (J, K):
            raise EnvError("alloc actions must be (J, K) weight matrices")
        if ((servers < 0) | (servers >= J)).any():
            raise EnvError("server index out of range")
        for req, z in zip(requests, splits):
            limit = int(self.layer_counts[req.model])
            if not 0 <= z <= limit:
                raise EnvError(f"user {req.user}: split {z} outside 0..{limit}")

        compute_alloc = np.zeros((J, K))
        bandwidth_alloc = np.zeros((J, K))
        for j in range(J):
            members = np.flatnonzero(servers == j)
            if members.size == 0:
                continue
            compute_alloc[j, members] = capacity_partition(self.f_server[j], w_comp[j, members])
            bandwidth_alloc[j, members] = capacity_partition(self.bandwidth[j], w_band[j, members])

        weights = cfg.weights
        delays: list[DelayBreakdown] = []
        energies = np.zeros(K)
        privacy = np.zeros(K)
        hits = np.zeros(K, dtype=bool)
        rewards = np.zeros(K)
        for req in requests:
            k, i = req.user, req.model
            j = int(servers[k])
            hit = self.X[j, i] == 1
            hits[k] = hit
            if hit:
                summary = partition_summary(self.catalog[i], int(splits[k]))
                band = bandwidth_alloc[j, k]
                noise = noise_power(band, cfg.channel)
                rate_down = shannon_rate(band, self.p_server_w[j], self.gain[j, k], noise)
                rate_up = shannon_rate(band, self.p_user_w[k], self.gain[j, k], noise)
                breakdown = delay_components(
                    summary,
                    req.batch,
                    rate_down,
                    rate_up,
                    self.f_user[k],
                    compute_alloc[j, k],
                    hit=True,
                    tau_fail=weights.tau_fail,
                )
                energies[k] = energy(
                    summary, req.batch, self.eps[k], self.p_user_w[k], breakdown.upload_s
                )
                privacy[k] = privacy_cost(
                    summary.leakage,
                    self.pre[k],
                    req.batch,
                    self.catalog[i].raw_input_bytes / 1e6,
                    weights,
                )
            else:
                breakdown = delay_components(
                    partition_summary(self.catalog[i], 0),
                    req.batch,
                    1.0,
                    1.0,
                    1.0,
                    1.0,
                    hit=False,
                    tau_fail=weights.tau_fail,
                )
            delays.append(breakdown)
            rewards[k] = user_reward(hit, privacy[k], energies[k], breakdown.total_s, weights)

        total_delays = np.array([d.total_s for d in delays])
        alloc_rewards = np.array(
            [alloc_reward(total_delays, servers == j) for j in range(J)]
        )

        for req in requests:
            self._req_interval[req.model] += 1
            self._srv_req_interval[servers[req.user], req.model] += 1
            self._last_req_slot[servers[req.user], req.model] = self.t
        self._hits_interval += np.bincount(servers[hits], minlength=J)

        state = SlotState(self.X.copy(), servers.copy(), splits.copy(), compute_alloc, bandwidth_alloc)
        self._verify_constraints(state)

        self.t += 1
        deploy_rewards = None
        if self.t % cfg.deploy_interval == 0:
            deploy_rewards = np.array(
                [
                    deploy_reward(self._hits_interval[j], self._mig_seconds[j], cfg.mu_hit, cfg.mu_mig)
                    for j in range(J)
                ]
            )
            self._req_prev = self._req_interval
            self._srv_req_prev = self._srv_req_interval
            self._req_interval = np.zeros_like(self._req_prev)
            self._srv_req_interval = np.zeros_like(self._srv_req_prev)
            self._hits_interval = np.zeros(J, dtype=np.int64)
            self._mig_seconds = np.zeros(J)

        if self._trace is not None:
            for req in requests:
                k = req.user
                self._trace.write(
                    f"{self.t - 1},{k},{servers[k]},{splits[k]},{total_delays[k]!r},"
                    f"{energies[k]!r},{privacy[k]!r},{int(hits[k])}\n"
                )

        self._pending_requests = None
        return SlotOutcome(
            slot=self.t - 1,
            requests=requests,
            state=state,
            delays=delays,
            energies=energies,
            privacy=privacy,
            hits=hits,
            user_rewards=rewards,
            costs=total_delays,
            alloc_rewards=alloc_rewards,
            deploy_rewards=deploy_rewards,
        )

    # ------------------------------------------------------------------
    # observations
    # ------------------------------------------------------------------

    def build_observations(
        self,
        requests: list[Request] | None = None,
        user_actions: tuple[np.ndarray, np.ndarray] | None = None,
    ) -> ObservationBundle:
        """Observation vectors for all three agent layers.

        The deployment block reflects the last completed interval and leaves
        the auto-regressive indicator segment zeroed (the policy fills it in
        while decoding). The allocation block needs this slot's user actions;
        without them it is all zeros.
        """
        self._require_ready()
        cfg = self.config
        J, K, I = cfg.num_servers, cfg.num_users, cfg.num_models
        norm = 1.0 / (cfg.deploy_interval * K)
        vec_x = self.X.astype(np.float64).reshape(-1)

        deploy_local = np.concatenate(
            [
                np.tile(self._req_prev * norm, (J, 1)),
                self._srv_req_prev * norm,
                np.zeros((J, I)),
            ],
            axis=1,
        )
        deploy_global = np.concatenate([deploy_local, np.tile(vec_x, (J, 1))], axis=1)

        if requests is None:
            requests = self._pending_requests
        if requests is not None:
            model_ids = np.array([r.model for r in requests], dtype=np.int64)
            batches = np.array([r.batch for r in requests], dtype=np.int64)
        else:
            model_ids = np.zeros(K, dtype=np.int64)
            batches = np.ones(K, dtype=np.int64)

        user_local = np.concatenate(
            [
                self.encoder.embed_models(model_ids),
                self.encoder.embed_batches(batches),
                np.tile(vec_x, (K, 1)),
            ],
            axis=1,
        )
        batch_max = cfg.batch_range[1]
        user_global = np.concatenate(
            [(model_ids + 1) / I, batches / batch_max, vec_x]
        )

        alloc = np.zeros((J, 3 * K))
        if user_actions is not None and requests is not None:
            alloc = self.alloc_observation(requests, user_actions)

        return ObservationBundle(
            deploy_local=deploy_local,
            deploy_global=deploy_global,
            user_local=user_local,
            user_global=user_global,
            alloc=alloc,
            model_ids=model_ids,
            batches=batches,
            deployment_vec=vec_x,
        )

    def alloc_observation(
        self, requests: list[Request], user_actions: tuple[np.ndarray, np.ndarray]
    ) -> np.ndarray:
        cfg = self.config
        J, K, I = cfg.num_servers, cfg.num_users, cfg.num_models
        servers = np.asarray(user_actions[0], dtype=np.int64)
        splits = np.asarray(user_actions[1], dtype=np.int64)
        alloc = np.zeros((J, 3 * K))
        ks = np.arange(K)
        model_ids = np.array([r.model for r in requests], dtype=np.int64)
        batches = np.array([r.batch for r in requests], dtype=np.int64)
        alloc[servers, ks] = (model_ids + 1) / I
        alloc[servers, K + ks] = batches / cfg.batch_range[1]
        alloc[servers, 2 * K + ks] = (splits + 1) / (self.max_layers + 1)
        return alloc

    @property
    def request_counts_prev(self) -> np.ndarray:
        """Per-model request counts over the last completed deployment interval."""
        return self._req_prev.copy()

    @property
    def lru_stamps(self) -> np.ndarray:
        """Last slot each (server, model) pair was requested; -1 if never."""
        return self._last_req_slot.copy()

    # ------------------------------------------------------------------
    # invariants
    # ------------------------------------------------------------------

    def _verify_constraints(self, state: SlotState) -> None:
        # capacity sums use fsum so the check is summation-order independent
        J = self.config.num_servers
        for j in range(J):
            if math.fsum(state.compute_alloc[j]) > self.f_server[j]:
                raise EnvError(f"server {j}: compute allocation exceeds capacity")
            if math.fsum(state.bandwidth_alloc[j]) > self.bandwidth[j]:
                raise EnvError(f"server {j}: bandwidth allocation exceeds capacity")
            stored = int((state.deployment[j] * self.model_sizes).sum())
            if stored > int(self.storage[j]):
                raise EnvError(f"server {j}: deployed bytes exceed storage")
        if (state.compute_alloc < 0).any() or (state.bandwidth_alloc < 0).any():
            raise EnvError("negative resource allocation")

    def _require_ready(self) -> None:
        if not self._ready:
            raise EnvError("reset() must be called before using the environment")
