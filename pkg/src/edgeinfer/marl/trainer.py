"""Hierarchical constrained multi-agent PPO trainer.

One iteration collects N independent episodes, computes per-layer GAE
(user agents carry both reward and delay-cost streams), advances the shared
Lagrange multiplier by projected dual ascent on the measured mean per-step
delay, and then runs clipped-surrogate updates for whichever layers are
learned in the active algorithm variant. Heuristic layers (equal-share
allocation, popularity/LRU deployment, fixed or greedy user rules) slot into
the same episode loop so ablations and baselines share one code path.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

import numpy as np

from ..baselines import (
    BaselineSpec,
    equal_share_weights,
    heuristic_user_actions,
    lru_deploy,
    popularity_deploy,
)
from ..config import SystemConfig
from ..env import CollabInferenceEnv
from ..nn import autodiff as ad
from ..nn.autodiff import Tensor
from ..nn.layers import Adam
from ..profiles import ModelProfile
from .gae import gae, normalize_advantages
from .lagrange import LagrangeState, lagrangian_dual_update
from .policies import AllocPolicy, DeployPolicy, UserPolicy, ValueNet
from .ppo import ppo_clip_objective


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 1000
    steps: int = 200  # slots per episode
    num_envs: int = 4
    lr: float = 3e-4
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_eps: float = 0.2
    entropy_user: float = 0.05
    entropy_deploy: float = 0.25
    entropy_alloc: float = 0.01
    value_coef_deploy: float = 0.5
    ppo_epochs: int = 4
    minibatches: int = 4
    max_grad_norm: float = 0.5
    lr_anneal: bool = True  # linear decay to 10% over `iterations`; damps dual orbits
    lambda0: float = 0.01
    alpha_lambda: float = 0.01
    lambda_bounds: tuple[float, float] = (0.0, 100.0)
    d_model: int = 8
    d_scalar: int = 8
    d_key: int = 32
    hidden_user: int = 256
    hidden_deploy: int = 256
    hidden_alloc: int = 128
    hidden_critic: int = 256

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["lambda_bounds"] = list(self.lambda_bounds)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        if "lambda_bounds" in data:
            data["lambda_bounds"] = tuple(data["lambda_bounds"])
        return cls(**data)


def desk_train_config(**overrides) -> TrainConfig:
    """Laptop-scale trainer defaults: smaller networks, 100-step episodes.

    The learning rate is raised relative to the full-scale default because
    desk batches are ~30x smaller; 300 iterations then suffice for the split
    head to sharpen.
    """
    base = dict(
        iterations=300,
        steps=100,
        lr=1e-3,
        hidden_user=64,
        hidden_deploy=64,
        hidden_alloc=64,
        hidden_critic=64,
        d_key=16,
    )
    base.update(overrides)
    return TrainConfig(**base)


class RunningNorm:
    """Cumulative mean/std tracker for critic target normalization."""

    def __init__(self):
        self.count = 0.0
        self.mean = 0.0
        self.m2 = 0.0

    def update(self, values: np.ndarray) -> None:
        values = np.asarray(values, dtype=np.float64).reshape(-1)
        if values.size == 0:
            return
        n, mean, var = values.size, values.mean(), values.var()
        delta = mean - self.mean
        total = self.count + n
        self.mean += delta * n / total
        self.m2 += var * n + delta * delta * self.count * n / total
        self.count = total

    @property
    def std(self) -> float:
        if self.count < 2:
            return 1.0
        return max(float(np.sqrt(self.m2 / self.count)), 1e-6)

    def normalize(self, values: np.ndarray) -> np.ndarray:
        return (np.asarray(values, dtype=np.float64) - self.mean) / self.std

    def denormalize(self, values: np.ndarray) -> np.ndarray:
        return np.asarray(values, dtype=np.float64) * self.std + self.mean

    def state_dict(self) -> dict:
        return {"count": self.count, "mean": self.mean, "m2": self.m2}

    def load_state_dict(self, state: dict) -> None:
        self.count, self.mean, self.m2 = state["count"], state["mean"], state["m2"]


@dataclass
class TrajectoryBatch:
    """Per-layer rollout storage for one iteration (N envs x T slots)."""

    # user stream, shaped (N, T, K)
    model_ids: np.ndarray
    batches: np.ndarray
    split_limits: np.ndarray
    servers: np.ndarray
    splits: np.ndarray
    user_logp: np.ndarray
    user_rewards: np.ndarray
    costs: np.ndarray
    hits: np.ndarray
    energies: np.ndarray
    privacy: np.ndarray
    # shared per-slot observations, shaped (N, T, ...)
    vec_x: np.ndarray
    user_global: np.ndarray
    # deployment stream, shaped (N, S, J)
    dep_obs_fixed: np.ndarray
    dep_vec_x_prev: np.ndarray
    dep_macros: list  # [env][interval][server] -> tuple of model ids
    dep_logp: np.ndarray
    dep_values: np.ndarray  # denormalized step-value baselines
    dep_rewards: np.ndarray
    dep_entropy_mean: float
    # allocation stream, records flattened over (N, T, J)
    alloc_obs: np.ndarray
    alloc_logp: np.ndarray
    alloc_rewards: np.ndarray  # (N, T, J)
    mem_rec: np.ndarray  # member -> record index
    mem_model: np.ndarray
    mem_batch: np.ndarray
    mem_split: np.ndarray
    mem_act_comp: np.ndarray
    mem_act_band: np.ndarray


class Trainer:
    """Owns the policies, critics, environments and the optimization loop."""

    EVAL_EPISODE_BASE = 1_000_000

    def __init__(
        self,
        config: SystemConfig,
        catalog: list[ModelProfile],
        spec: BaselineSpec,
        train: TrainConfig,
        run_seed: int,
    ):
        if spec.constraint == "none":
            # unconstrained ablations also drop the in-reward violation term
            config = config.replace(
                weights=dataclasses.replace(config.weights, mu3=0.0)
            )
        config.validate()
        self.config = config
        self.catalog = catalog
        self.spec = spec
        self.train_config = train
        self.run_seed = run_seed

        if train.steps % config.deploy_interval != 0:
            raise ValueError("episode length must be a multiple of the deployment interval")

        self.envs = [CollabInferenceEnv(config, catalog) for _ in range(train.num_envs)]
        self.eval_env = CollabInferenceEnv(config, catalog)
        self._env_seeds = [run_seed * 1009 + idx for idx in range(train.num_envs)]

        I, J, K = config.num_models, config.num_servers, config.num_users
        self.max_layers = int(max(p.layer_count for p in catalog))
        self.layer_counts = np.array([p.layer_count for p in catalog], dtype=np.int64)
        self.model_sizes = np.array([p.total_bytes for p in catalog], dtype=np.int64)
        deploy_dim = I * J
        batch_max = config.batch_range[1]

        init_rng = np.random.default_rng(np.random.SeedSequence((run_seed, 0x1417)))
        self.user_policy = UserPolicy(
            I, J, self.max_layers, deploy_dim, train.d_model, train.d_scalar,
            train.hidden_user, batch_max, init_rng,
        )
        self.deploy_policy = DeployPolicy(
            I, deploy_dim, train.hidden_deploy, init_rng, centralized=spec.centralized_critics
        )
        self.alloc_policy = AllocPolicy(
            I, K, self.max_layers, train.d_model, train.d_scalar, train.d_key,
            train.hidden_alloc, batch_max, init_rng,
        )
        if spec.centralized_critics:
            critic_in = 2 * K + deploy_dim
        else:
            critic_in = 2 + deploy_dim  # local request features plus deployment state
        self.reward_critic = ValueNet(critic_in, train.hidden_critic, init_rng, "vr")
        self.cost_critic = ValueNet(critic_in, train.hidden_critic, init_rng, "vc")
        self.alloc_critic = ValueNet(3 * K + J, train.hidden_critic, init_rng, "va")

        opt = lambda store: Adam(store, lr=train.lr, max_grad_norm=train.max_grad_norm)
        self.opt_user = opt(self.user_policy.store)
        self.opt_deploy = opt(self.deploy_policy.store)
        self.opt_alloc = opt(self.alloc_policy.store)
        self.opt_vr = opt(self.reward_critic.store)
        self.opt_vc = opt(self.cost_critic.store)
        self.opt_va = opt(self.alloc_critic.store)

        self.norm_r = RunningNorm()
        self.norm_c = RunningNorm()
        self.norm_a = RunningNorm()
        self.norm_d = RunningNorm()

        self.lagrange = LagrangeState(
            lam=train.lambda0 if spec.constraint == "lagrangian" else 0.0,
            alpha=train.alpha_lambda,
            bounds=train.lambda_bounds,
            j_bar=config.weights.tau_bar,
        )
        self.iteration = 0

    # ------------------------------------------------------------------
    # episode execution (shared by training rollouts and evaluation)
    # ------------------------------------------------------------------

    def _deployment_actions(self, env: CollabInferenceEnv, obs, rng, mode: bool):
        """Macro-action per server from the learned policy or a caching heuristic."""
        J = self.config.num_servers
        decisions = []
        if self.spec.deployment == "learned":
            decisions = self.deploy_policy.act_batch(
                obs.deploy_local[:, : 2 * self.config.num_models],
                np.tile(obs.deployment_vec, (J, 1)),
                self.model_sizes,
                env.storage,
                rng,
                mode=mode,
            )
            macros = [d.macro for d in decisions]
        elif self.spec.deployment == "popularity":
            counts = env.request_counts_prev
            macros = [
                tuple(popularity_deploy(counts, int(env.storage[j]), self.model_sizes))
                for j in range(J)
            ]
        elif self.spec.deployment == "lru":
            stamps = env.lru_stamps
            macros = [
                tuple(lru_deploy(stamps[j], int(env.storage[j]), self.model_sizes))
                for j in range(J)
            ]
        else:
            raise ValueError(f"unknown deployment rule {self.spec.deployment!r}")
        return macros, decisions

    def _user_actions(self, env, requests, obs, rng, mode: bool):
        split_limits = self.layer_counts[obs.model_ids]
        if self.spec.learned_user:
            out = self.user_policy.act(
                obs.model_ids, obs.batches, obs.deployment_vec, split_limits, rng, mode=mode
            )
            return (out.servers, out.splits), out.logps, split_limits
        servers, splits = heuristic_user_actions(
            self.spec, requests, self.catalog, self.config, env.gain, env.X,
            env.f_user, env.f_server, env.bandwidth, env.p_server_w, env.p_user_w,
        )
        return (servers, splits), np.zeros(len(requests)), split_limits

    def _alloc_actions(self, env, obs, servers, splits, rng, explore: bool):
        J, K = self.config.num_servers, self.config.num_users
        if self.spec.allocation == "equal-share":
            weights = equal_share_weights(servers, J, K)
            return (weights, weights.copy()), None
        member_lists = [np.flatnonzero(servers == j) for j in range(J)]
        decisions = self.alloc_policy.act(
            obs.alloc, member_lists, obs.model_ids, obs.batches, splits, rng, explore=explore
        )
        w_comp = np.stack([d.weights_comp for d in decisions])
        w_band = np.stack([d.weights_band for d in decisions])
        return (w_comp, w_band), decisions

    def run_episode(self, env: CollabInferenceEnv, seed: int, episode: int, rng, explore: bool):
        """Roll one episode; returns per-slot record dicts for each layer."""
        env.reset(seed, episode=episode)
        T = self.train_config.steps
        slots, dep_steps = [], []
        mode = not explore
        for _ in range(T):
            if env.deployment_due:
                obs0 = env.build_observations(requests=None)
                macros, decisions = self._deployment_actions(env, obs0, rng, mode)
                env.deployment_phase(macros)
                dep_steps.append(
                    {
                        "t": env.t,
                        "obs_fixed": obs0.deploy_local[:, : 2 * self.config.num_models].copy(),
                        "vec_x_prev": obs0.deployment_vec.copy(),
                        "macros": macros,
                        "decisions": decisions,
                    }
                )
            requests = env.sample_slot_requests()
            obs = env.build_observations(requests)
            user_actions, user_logps, split_limits = self._user_actions(env, requests, obs, rng, mode)
            obs.alloc = env.alloc_observation(requests, user_actions)
            alloc_actions, alloc_decisions = self._alloc_actions(
                env, obs, user_actions[0], user_actions[1], rng, explore
            )
            outcome = env.step(requests, user_actions, alloc_actions)
            slots.append(
                {
                    "obs": obs,
                    "split_limits": split_limits,
                    "user_logps": user_logps,
                    "alloc_decisions": alloc_decisions,
                    "outcome": outcome,
                }
            )
        return slots, dep_steps

    # ------------------------------------------------------------------
    # collection
    # ------------------------------------------------------------------

    def collect(self) -> TrajectoryBatch:
        tc = self.train_config
        cfg = self.config
        N, T, K, J, I = tc.num_envs, tc.steps, cfg.num_users, cfg.num_servers, cfg.num_models
        S = T // cfg.deploy_interval
        deploy_dim = I * J

        model_ids = np.zeros((N, T, K), dtype=np.int64)
        batches = np.zeros((N, T, K), dtype=np.int64)
        split_limits = np.zeros((N, T, K), dtype=np.int64)
        servers = np.zeros((N, T, K), dtype=np.int64)
        splits = np.zeros((N, T, K), dtype=np.int64)
        user_logp = np.zeros((N, T, K))
        user_rewards = np.zeros((N, T, K))
        costs = np.zeros((N, T, K))
        hits = np.zeros((N, T, K), dtype=bool)
        energies = np.zeros((N, T, K))
        privacy = np.zeros((N, T, K))
        vec_x = np.zeros((N, T, deploy_dim))
        user_global = np.zeros((N, T, 2 * K + deploy_dim))
        dep_obs_fixed = np.zeros((N, S, J, 2 * I))
        dep_vec_x_prev = np.zeros((N, S, J, deploy_dim))
        dep_macros = [[None] * S for _ in range(N)]
        dep_logp = np.zeros((N, S, J))
        dep_values = np.zeros((N, S, J))
        dep_rewards = np.zeros((N, S, J))
        dep_entropies = []
        alloc_obs = np.zeros((N, T, J, 3 * K))
        alloc_logp = np.zeros((N, T, J))
        alloc_rewards = np.zeros((N, T, J))
        mem_rec, mem_model, mem_batch, mem_split = [], [], [], []
        mem_act_comp, mem_act_band = [], []

        for e in range(N):
            rng = np.random.default_rng(
                np.random.SeedSequence((self.run_seed, self.iteration, e, 0xAC7))
            )
            slot_rows, dep_steps = self.run_episode(
                self.envs[e], self._env_seeds[e], self.iteration, rng, explore=True
            )
            for s_idx, step in enumerate(dep_steps):
                dep_obs_fixed[e, s_idx] = step["obs_fixed"]
                dep_vec_x_prev[e, s_idx] = step["vec_x_prev"]
                dep_macros[e][s_idx] = [tuple(m) for m in step["macros"]]
                for j, dec in enumerate(step["decisions"]):
                    dep_logp[e, s_idx, j] = dec.logp
                    dep_values[e, s_idx, j] = float(self.norm_d.denormalize(dec.value))
                    dep_entropies.append(dec.entropy)
            for t, row in enumerate(slot_rows):
                obs, outcome = row["obs"], row["outcome"]
                model_ids[e, t] = obs.model_ids
                batches[e, t] = obs.batches
                split_limits[e, t] = row["split_limits"]
                servers[e, t] = outcome.state.associations
                splits[e, t] = outcome.state.partitions
                user_logp[e, t] = row["user_logps"]
                user_rewards[e, t] = outcome.user_rewards
                costs[e, t] = outcome.costs
                hits[e, t] = outcome.hits
                energies[e, t] = outcome.energies
                privacy[e, t] = outcome.privacy
                vec_x[e, t] = obs.deployment_vec
                user_global[e, t] = obs.user_global
                alloc_obs[e, t] = obs.alloc
                alloc_rewards[e, t] = outcome.alloc_rewards
                if outcome.deploy_rewards is not None:
                    s_idx = (t + 1) // cfg.deploy_interval - 1
                    dep_rewards[e, s_idx] = outcome.deploy_rewards
                if row["alloc_decisions"] is not None:
                    for j, dec in enumerate(row["alloc_decisions"]):
                        alloc_logp[e, t, j] = dec.logp
                        rid = (e * T + t) * J + j
                        for m_pos, k in enumerate(dec.members):
                            mem_rec.append(rid)
                            mem_model.append(obs.model_ids[k])
                            mem_batch.append(obs.batches[k])
                            mem_split.append(outcome.state.partitions[k])
                            mem_act_comp.append(dec.action_comp[m_pos])
                            mem_act_band.append(dec.action_band[m_pos])

        return TrajectoryBatch(
            model_ids=model_ids,
            batches=batches,
            split_limits=split_limits,
            servers=servers,
            splits=splits,
            user_logp=user_logp,
            user_rewards=user_rewards,
            costs=costs,
            hits=hits,
            energies=energies,
            privacy=privacy,
            vec_x=vec_x,
            user_global=user_global,
            dep_obs_fixed=dep_obs_fixed,
            dep_vec_x_prev=dep_vec_x_prev,
            dep_macros=dep_macros,
            dep_logp=dep_logp,
            dep_values=dep_values,
            dep_rewards=dep_rewards,
            dep_entropy_mean=float(np.mean(dep_entropies)) if dep_entropies else 0.0,
            alloc_obs=alloc_obs.reshape(N * T * J, 3 * K),
            alloc_logp=alloc_logp.reshape(-1),
            alloc_rewards=alloc_rewards,
            mem_rec=np.array(mem_rec, dtype=np.int64),
            mem_model=np.array(mem_model, dtype=np.int64),
            mem_batch=np.array(mem_batch, dtype=np.int64),
            mem_split=np.array(mem_split, dtype=np.int64),
            mem_act_comp=np.array(mem_act_comp, dtype=np.float64),
            mem_act_band=np.array(mem_act_band, dtype=np.float64),
        )

    # ------------------------------------------------------------------
    # critic inputs
    # ------------------------------------------------------------------

    def _user_critic_rows(self, batch: TrajectoryBatch) -> np.ndarray:
        """(rows, dim) critic inputs; one row per slot (central) or per user (local)."""
        N, T, K = batch.model_ids.shape
        if self.spec.centralized_critics:
            return batch.user_global.reshape(N * T, -1)
        I = self.config.num_models
        ids = (batch.model_ids.reshape(-1, 1) + 1) / I
        b = batch.batches.reshape(-1, 1) / self.config.batch_range[1]
        vec = np.repeat(batch.vec_x.reshape(N * T, -1), K, axis=0)
        return np.concatenate([ids, b, vec], axis=1)

    def _expand_user_values(self, values: np.ndarray, batch: TrajectoryBatch) -> np.ndarray:
        """Critic outputs -> (N, T, K) regardless of critic granularity."""
        N, T, K = batch.model_ids.shape
        if self.spec.centralized_critics:
            return np.repeat(values.reshape(N, T, 1), K, axis=2)
        return values.reshape(N, T, K)

    def _alloc_critic_rows(self, batch: TrajectoryBatch) -> np.ndarray:
        N, T, J = batch.alloc_rewards.shape
        eye = np.tile(np.eye(J), (N * T, 1))
        return np.concatenate([batch.alloc_obs, eye], axis=1)

    # ------------------------------------------------------------------
    # one training iteration
    # ------------------------------------------------------------------

    def train_iteration(self) -> dict:
        tc = self.train_config
        cfg = self.config
        batch = self.collect()
        N, T, K = batch.model_ids.shape
        J = cfg.num_servers
        S = T // cfg.deploy_interval

        # --- user-layer advantages (reward and constraint-cost streams)
        user_rows = self._user_critic_rows(batch)
        v_r = self._expand_user_values(self.norm_r.denormalize(self.reward_critic.values(user_rows)), batch)
        v_c = self._expand_user_values(self.norm_c.denormalize(self.cost_critic.values(user_rows)), batch)
        adv_r = np.zeros((N, T, K))
        ret_r = np.zeros((N, T, K))
        adv_c = np.zeros((N, T, K))
        ret_c = np.zeros((N, T, K))
        for e in range(N):
            for k in range(K):
                adv_r[e, :, k], ret_r[e, :, k] = gae(
                    batch.user_rewards[e, :, k], v_r[e, :, k], 0.0, tc.gamma, tc.gae_lambda
                )
                adv_c[e, :, k], ret_c[e, :, k] = gae(
                    batch.costs[e, :, k], v_c[e, :, k], 0.0, tc.gamma, tc.gae_lambda
                )

        # --- allocation-layer advantages
        alloc_rows = self._alloc_critic_rows(batch)
        v_a = self.norm_a.denormalize(self.alloc_critic.values(alloc_rows)).reshape(N, T, J)
        adv_a = np.zeros((N, T, J))
        ret_a = np.zeros((N, T, J))
        for e in range(N):
            for j in range(J):
                adv_a[e, :, j], ret_a[e, :, j] = gae(
                    batch.alloc_rewards[e, :, j], v_a[e, :, j], 0.0, tc.gamma, tc.gae_lambda
                )

        # --- deployment-layer advantages (one macro-step per interval)
        adv_d = np.zeros((N, S, J))
        ret_d = np.zeros((N, S, J))
        for e in range(N):
            for j in range(J):
                adv_d[e, :, j], ret_d[e, :, j] = gae(
                    batch.dep_rewards[e, :, j], batch.dep_values[e, :, j], 0.0, tc.gamma, tc.gae_lambda
                )

        # --- dual ascent on the shared multiplier
        j_hat = float(batch.costs.mean())
        if self.spec.constraint == "lagrangian":
            self.lagrange = lagrangian_dual_update(self.lagrange, j_hat)
        lam = self.lagrange.lam

        # --- combined user surrogate advantage
        adv_user = (normalize_advantages(adv_r.reshape(-1)) - lam * adv_c.reshape(-1)) / (1.0 + lam)
        adv_alloc = normalize_advantages(adv_a.reshape(-1))
        adv_dep = normalize_advantages(adv_d.reshape(-1))

        rng = np.random.default_rng(np.random.SeedSequence((self.run_seed, self.iteration, 0x06AD)))
        metrics_update = {}
        if self.spec.trains:
            self._set_learning_rate()
            metrics_update = self._update_policies(batch, adv_user, adv_alloc, adv_dep,
                                                   ret_r, ret_c, ret_a, ret_d, rng)

        self.iteration += 1
        miss_delay = cfg.weights.tau_fail
        metrics = {
            "iteration": self.iteration,
            "lambda": lam,
            "j_hat": j_hat,
            "mean_delay": j_hat,
            "mean_energy": float(batch.energies.mean()),
            "mean_privacy": float(batch.privacy.mean()),
            "mean_user_reward": float(batch.user_rewards.mean()),
            "mean_alloc_reward": float(batch.alloc_rewards.mean()),
            "mean_deploy_reward": float(batch.dep_rewards.mean()),
            "hit_rate": float(batch.hits.mean()),
            "deadline_rate": float((batch.hits & (batch.costs <= cfg.weights.tau_bar)).mean()),
            "cost_weighted": float(
                cfg.weights.mu1 * batch.privacy.mean() + cfg.weights.mu2 * batch.energies.mean()
            ),
            "cost_with_violations": float(
                (
                    cfg.weights.mu1 * batch.privacy
                    + cfg.weights.mu2 * batch.energies
                    + cfg.weights.mu3 * np.maximum(batch.costs - cfg.weights.tau_bar, 0.0)
                ).mean()
            ),
            "miss_delay": miss_delay,
        }
        metrics.update(metrics_update)
        return metrics

    def _update_policies(self, batch, adv_user, adv_alloc, adv_dep,
                         ret_r, ret_c, ret_a, ret_d, rng) -> dict:
        tc = self.train_config
        cfg = self.config
        N, T, K = batch.model_ids.shape
        J = cfg.num_servers
        S = T // cfg.deploy_interval

        self.norm_r.update(ret_r)
        self.norm_c.update(ret_c)
        self.norm_a.update(ret_a)
        self.norm_d.update(ret_d)

        # flatten user records; deployment rows are repeated per slot
        u_model = batch.model_ids.reshape(-1)
        u_batch = batch.batches.reshape(-1)
        u_limits = batch.split_limits.reshape(-1)
        u_server = batch.servers.reshape(-1)
        u_split = batch.splits.reshape(-1)
        u_logp = batch.user_logp.reshape(-1)
        u_slot = np.repeat(np.arange(N * T), K)
        vecx_slots = batch.vec_x.reshape(N * T, -1)

        user_rows = self._user_critic_rows(batch)
        if self.spec.centralized_critics:
            tgt_rows = user_rows
            tgt_r = self.norm_r.normalize(ret_r.mean(axis=2).reshape(-1))
            tgt_c = self.norm_c.normalize(ret_c.mean(axis=2).reshape(-1))
        else:
            tgt_rows = user_rows
            tgt_r = self.norm_r.normalize(ret_r.reshape(-1))
            tgt_c = self.norm_c.normalize(ret_c.reshape(-1))

        alloc_rows = self._alloc_critic_rows(batch)
        tgt_a = self.norm_a.normalize(ret_a.reshape(-1))
        tgt_d_flat = self.norm_d.normalize(ret_d.reshape(-1))

        if self.spec.deployment == "learned":
            dep_flat_obs = batch.dep_obs_fixed.reshape(N * S * J, -1)
            dep_flat_prev = batch.dep_vec_x_prev.reshape(N * S * J, -1)
            dep_flat_logp = batch.dep_logp.reshape(-1)
            dep_storages = np.concatenate([np.tile(env.storage, S) for env in self.envs])
            dep_flat_macros = [
                batch.dep_macros[e][s][j]
                for e in range(N)
                for s in range(S)
                for j in range(J)
            ]
            n_dep = len(dep_flat_macros)
        else:
            n_dep = 0

        # allocation records with at least one member take part in the policy update
        order = np.argsort(batch.mem_rec, kind="stable")
        rec_sorted = batch.mem_rec[order]
        uniq, starts = np.unique(rec_sorted, return_index=True)
        bounds = np.append(starts, rec_sorted.size)
        mem_by_rec = {
            int(rid): order[bounds[i] : bounds[i + 1]] for i, rid in enumerate(uniq)
        }
        alive = uniq

        losses = {"loss_user": [], "loss_alloc": [], "loss_deploy": [],
                  "loss_vr": [], "loss_vc": [], "loss_va": []}
        n_user = u_model.size
        n_rows = tgt_rows.shape[0]
        n_alloc_rec = alive.size

        for _ in range(tc.ppo_epochs):
            if self.spec.learned_user:
                for idx in _minibatch_indices(rng, n_user, tc.minibatches):
                    logp, ent = self.user_policy.evaluate(
                        u_model[idx], u_batch[idx], vecx_slots[u_slot[idx]],
                        u_limits[idx], u_server[idx], u_split[idx],
                    )
                    obj = ppo_clip_objective(logp, u_logp[idx], adv_user[idx], tc.clip_eps)
                    loss = ad.sub(Tensor(0.0), ad.add(obj, ad.mul(ad.mean_all(ent), Tensor(tc.entropy_user))))
                    self._step(self.opt_user, self.user_policy.store, loss)
                    losses["loss_user"].append(loss.item())

                for idx in _minibatch_indices(rng, n_rows, tc.minibatches):
                    v = self.reward_critic(tgt_rows[idx])
                    loss = _mse(v, tgt_r[idx])
                    self._step(self.opt_vr, self.reward_critic.store, loss)
                    losses["loss_vr"].append(loss.item())
                    vc = self.cost_critic(tgt_rows[idx])
                    loss_c = _mse(vc, tgt_c[idx])
                    self._step(self.opt_vc, self.cost_critic.store, loss_c)
                    losses["loss_vc"].append(loss_c.item())

            if self.spec.allocation == "learned" and n_alloc_rec:
                for idx in _minibatch_indices(rng, n_alloc_rec, tc.minibatches):
                    recs = alive[idx]
                    members = np.concatenate([mem_by_rec[r] for r in recs])
                    local_rec = np.repeat(np.arange(recs.size), [mem_by_rec[r].size for r in recs])
                    logp, ent = self.alloc_policy.evaluate(
                        batch.alloc_obs[recs], local_rec,
                        batch.mem_model[members], batch.mem_batch[members],
                        batch.mem_split[members],
                        batch.mem_act_comp[members], batch.mem_act_band[members],
                    )
                    obj = ppo_clip_objective(logp, batch.alloc_logp[recs], adv_alloc[recs], tc.clip_eps)
                    loss = ad.sub(Tensor(0.0), ad.add(obj, ad.mul(ad.mean_all(ent), Tensor(tc.entropy_alloc))))
                    self._step(self.opt_alloc, self.alloc_policy.store, loss)
                    losses["loss_alloc"].append(loss.item())

                for idx in _minibatch_indices(rng, alloc_rows.shape[0], tc.minibatches):
                    v = self.alloc_critic(alloc_rows[idx])
                    loss = _mse(v, tgt_a[idx])
                    self._step(self.opt_va, self.alloc_critic.store, loss)
                    losses["loss_va"].append(loss.item())

            if self.spec.deployment == "learned":
                for idx in _minibatch_indices(rng, n_dep, tc.minibatches):
                    logp, ent, values = self.deploy_policy.evaluate(
                        dep_flat_obs[idx], dep_flat_prev[idx], dep_storages[idx],
                        [dep_flat_macros[i] for i in idx], self.model_sizes,
                    )
                    obj = ppo_clip_objective(logp, dep_flat_logp[idx], adv_dep[idx], tc.clip_eps)
                    v_loss = _mse(values, tgt_d_flat[idx])
                    loss = ad.add(
                        ad.sub(Tensor(0.0), ad.add(obj, ad.mul(ad.mean_all(ent), Tensor(tc.entropy_deploy)))),
                        ad.mul(v_loss, Tensor(tc.value_coef_deploy)),
                    )
                    self._step(self.opt_deploy, self.deploy_policy.store, loss)
                    losses["loss_deploy"].append(loss.item())

        return {k: float(np.mean(v)) if v else 0.0 for k, v in losses.items()}

    def _set_learning_rate(self) -> None:
        tc = self.train_config
        lr = tc.lr
        if tc.lr_anneal:
            progress = min(1.0, self.iteration / max(1, tc.iterations))
            lr = tc.lr * (1.0 - 0.9 * progress)
        for opt in (self.opt_user, self.opt_deploy, self.opt_alloc,
                    self.opt_vr, self.opt_vc, self.opt_va):
            opt.lr = lr

    @staticmethod
    def _step(optimizer: Adam, store, loss: Tensor) -> None:
        store.zero_grad()
        loss.backward()
        optimizer.step()

    # ------------------------------------------------------------------
    # training loop and evaluation
    # ------------------------------------------------------------------

    def train(self, iterations: int | None = None, callback=None) -> list[dict]:
        history = []
        for _ in range(iterations if iterations is not None else self.train_config.iterations):
            metrics = self.train_iteration()
            history.append(metrics)
            if callback is not None:
                callback(metrics)
        return history

    def evaluate(self, episodes: int, seed: int = 0) -> dict:
        """Greedy-mode rollouts (mode actions, noise-free allocation)."""
        cfg = self.config
        rows = {
            "delay": [], "energy": [], "privacy": [], "hit": [], "deadline": [],
            "reward": [], "per_user_cost": np.zeros(cfg.num_users), "count": 0,
        }
        rng = np.random.default_rng(np.random.SeedSequence((self.run_seed, seed, 0xEAA)))
        for ep in range(episodes):
            slots, _ = self.run_episode(
                self.eval_env, self._env_seeds[0], self.EVAL_EPISODE_BASE + seed * 10000 + ep,
                rng, explore=False,
            )
            for row in slots:
                outcome = row["outcome"]
                rows["delay"].append(outcome.costs.mean())
                rows["energy"].append(outcome.energies.mean())
                rows["privacy"].append(outcome.privacy.mean())
                rows["hit"].append(outcome.hits.mean())
                rows["deadline"].append((outcome.hits & (outcome.costs <= cfg.weights.tau_bar)).mean())
                rows["reward"].append(outcome.user_rewards.mean())
                rows["per_user_cost"] += (
                    cfg.weights.mu1 * outcome.privacy + cfg.weights.mu2 * outcome.energies
                    + cfg.weights.mu3 * np.maximum(outcome.costs - cfg.weights.tau_bar, 0.0)
                )
                rows["count"] += 1
        per_user = rows["per_user_cost"] / max(rows["count"], 1)
        mean_priv = float(np.mean(rows["privacy"]))
        mean_energy = float(np.mean(rows["energy"]))
        return {
            "eval_episodes": episodes,
            "mean_delay": float(np.mean(rows["delay"])),
            "mean_energy": mean_energy,
            "mean_privacy": mean_priv,
            "mean_user_reward": float(np.mean(rows["reward"])),
            "hit_rate": float(np.mean(rows["hit"])),
            "deadline_rate": float(np.mean(rows["deadline"])),
            "cost_weighted": cfg.weights.mu1 * mean_priv + cfg.weights.mu2 * mean_energy,
            "cost_with_violations": float(np.mean(per_user)),
            "per_user_costs": [float(c) for c in per_user],
            "lambda": self.lagrange.lam,
        }

    # ------------------------------------------------------------------
    # checkpointing
    # ------------------------------------------------------------------

    CHECKPOINT_VERSION = 1

    def save_checkpoint(self, path: str) -> None:
        arrays = {}
        stores = {
            "user": self.user_policy.store,
            "dep": self.deploy_policy.store,
            "alc": self.alloc_policy.store,
            "vr": self.reward_critic.store,
            "vc": self.cost_critic.store,
            "va": self.alloc_critic.store,
        }
        for prefix, store in stores.items():
            for name, value in store.state_dict().items():
                arrays[f"{prefix}:{name}"] = value
        meta = {
            "version": self.CHECKPOINT_VERSION,
            "iteration": self.iteration,
            "run_seed": self.run_seed,
            "algorithm": self.spec.name,
            "lagrange": dataclasses.asdict(self.lagrange),
            "normalizers": {
                "r": self.norm_r.state_dict(),
                "c": self.norm_c.state_dict(),
                "a": self.norm_a.state_dict(),
                "d": self.norm_d.state_dict(),
            },
            "train_config": self.train_config.to_dict(),
            "system_config": self.config.to_dict(),
        }
        arrays["__meta__"] = np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)
        np.savez(path, **arrays)

    def load_checkpoint(self, path: str) -> dict:
        with np.load(path) as data:
            meta = json.loads(bytes(data["__meta__"]).decode("utf-8"))
            if meta["version"] != self.CHECKPOINT_VERSION:
                raise ValueError(f"unsupported checkpoint version {meta['version']}")
            stores = {
                "user": self.user_policy.store,
                "dep": self.deploy_policy.store,
                "alc": self.alloc_policy.store,
                "vr": self.reward_critic.store,
                "vc": self.cost_critic.store,
                "va": self.alloc_critic.store,
            }
            for prefix, store in stores.items():
                state = {
                    key.split(":", 1)[1]: data[key]
                    for key in data.files
                    if key.startswith(f"{prefix}:")
                }
                store.load_state_dict(state)
        lag = meta["lagrange"]
        self.lagrange = LagrangeState(
            lam=lag["lam"], alpha=lag["alpha"], bounds=tuple(lag["bounds"]), j_bar=lag["j_bar"]
        )
        self.norm_r.load_state_dict(meta["normalizers"]["r"])
        self.norm_c.load_state_dict(meta["normalizers"]["c"])
        self.norm_a.load_state_dict(meta["normalizers"]["a"])
        self.norm_d.load_state_dict(meta["normalizers"]["d"])
        self.iteration = meta["iteration"]
        return meta


def trainer_from_checkpoint(path: str, catalog: list[ModelProfile]) -> Trainer:
    """Rebuild a trainer from a checkpoint's stored configuration and weights."""
    from ..baselines import algorithm

    with np.load(path) as data:
        meta = json.loads(bytes(data["__meta__"]).decode("utf-8"))
    config = SystemConfig.from_dict(meta["system_config"])
    train = TrainConfig.from_dict(meta["train_config"])
    trainer = Trainer(config, catalog, algorithm(meta["algorithm"]), train, meta["run_seed"])
    trainer.load_checkpoint(path)
    return trainer


def _minibatch_indices(rng: np.random.Generator, n: int, parts: int) -> list[np.ndarray]:
    if n == 0:
        return []
    perm = rng.permutation(n)
    return [chunk for chunk in np.array_split(perm, parts) if chunk.size]


def _mse(pred: Tensor, target: np.ndarray) -> Tensor:
    diff = ad.sub(pred, Tensor(np.asarray(target, dtype=np.float64).reshape(-1, 1)))
    return ad.mean_all(ad.mul(diff, diff))
