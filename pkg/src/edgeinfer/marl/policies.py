"""The three agent-layer policies and their critics.

All actors share parameters within their layer; trajectories stay per-agent.
Rollout-time action sampling runs under ``no_grad`` (plain numpy forward);
PPO updates re-run the same computations with the graph enabled and the
recorded actions teacher-forced.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..nn import autodiff as ad
from ..nn.autodiff import Tensor
from ..nn.layers import Embedding, GruCell, Mlp, ParamStore, ScalarEncoder, VALUE_HEAD_GAIN

LOG_2PI = float(np.log(2.0 * np.pi))
SCORE_BOUND = 3.0  # allocation mean scores are clipped here; bounds how starved a share can get
WEIGHT_FLOOR = 1.0 / 16.0  # uniform blend keeping every member share representable
LOG_STD_BOUNDS = (-4.0, 1.0)


def rowwise_masked_sample(
    logits: np.ndarray, mask: np.ndarray, rng: np.random.Generator, mode: bool
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Sample one index per row of a masked categorical; returns (idx, logp, entropy)."""
    logits = np.asarray(logits, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    neg_inf = np.where(mask, logits, -np.inf)
    shift = neg_inf.max(axis=1, keepdims=True)
    z = np.where(mask, np.exp(neg_inf - shift), 0.0)
    denom = z.sum(axis=1, keepdims=True)
    probs = z / denom
    log_probs = np.where(mask, neg_inf - shift - np.log(denom), 0.0)
    entropy = -(probs * log_probs).sum(axis=1)
    n, cols = logits.shape
    rows = np.arange(n)
    if mode:
        idx = neg_inf.argmax(axis=1)
    else:
        cum = probs.cumsum(axis=1)
        last_active = cols - 1 - mask[:, ::-1].argmax(axis=1)
        idx = np.minimum((rng.random((n, 1)) > cum).sum(axis=1), last_active)
        bad = ~mask[rows, idx]  # draws landing exactly on a zero-mass boundary
        while bad.any():
            idx = np.minimum(idx + bad, last_active)
            bad = ~mask[rows, idx]
    return idx, log_probs[rows, idx], entropy


def macro_value(step_values: list[float], pre_step_value: float | None = None) -> float:
    """Baseline for a variable-length macro-action: mean of its step values.

    An empty macro falls back to the value of the encoded observation before
    any selection was possible.
    """
    if step_values:
        return float(np.mean(step_values))
    if pre_step_value is None:
        raise ValueError("empty macro-action needs a pre-step value")
    return float(pre_step_value)


class ValueNet:
    """Plain MLP critic over a fixed observation vector."""

    def __init__(self, in_dim: int, hidden: int, rng: np.random.Generator, name: str = "critic"):
        self.store = ParamStore()
        self.net = Mlp(self.store, name, [in_dim, hidden, hidden, 1], rng, head_gain=VALUE_HEAD_GAIN)

    def __call__(self, rows: np.ndarray) -> Tensor:
        return self.net(Tensor(np.asarray(rows, dtype=np.float64)))

    def values(self, rows: np.ndarray) -> np.ndarray:
        with ad.no_grad():
            return self(rows).data.reshape(-1)


# ---------------------------------------------------------------------------
# user association + partitioning policy
# ---------------------------------------------------------------------------

@dataclass
class UserActOut:
    servers: np.ndarray
    splits: np.ndarray
    logps: np.ndarray
    entropies: np.ndarray


class UserPolicy:
    """Two categorical heads (server, split) on a shared embedded trunk."""

    def __init__(
        self,
        num_models: int,
        num_servers: int,
        max_layers: int,
        deploy_dim: int,  # length of the vectorized deployment matrix
        d_model: int,
        d_scalar: int,
        hidden: int,
        batch_max: int,
        rng: np.random.Generator,
    ):
        self.num_servers = num_servers
        self.max_layers = max_layers
        self.store = ParamStore()
        self.embed = Embedding(self.store, "usr.embed", num_models, d_model, rng)
        self.batch_enc = ScalarEncoder(self.store, "usr.batch", d_scalar, rng, scale=1.0 / batch_max)
        in_dim = d_model + d_scalar + deploy_dim
        self.trunk = Mlp(self.store, "usr.trunk", [in_dim, hidden, hidden], rng, head_gain=1.0)
        self.server_head = Mlp(self.store, "usr.server", [hidden, num_servers], rng)
        self.split_head = Mlp(self.store, "usr.split", [hidden, max_layers + 1], rng)

    def _logits(self, model_ids, batches, deploy_rows) -> tuple[Tensor, Tensor]:
        x = ad.concat_cols(
            [self.embed(model_ids), self.batch_enc(batches), Tensor(deploy_rows)]
        )
        h = ad.tanh(self.trunk(x))
        return self.server_head(h), self.split_head(h)

    @staticmethod
    def split_mask(split_limits: np.ndarray, max_layers: int) -> np.ndarray:
        cols = np.arange(max_layers + 1)
        return cols[None, :] <= np.asarray(split_limits, dtype=np.int64)[:, None]

    def act(
        self,
        model_ids: np.ndarray,
        batches: np.ndarray,
        deploy_vec: np.ndarray,
        split_limits: np.ndarray,
        rng: np.random.Generator,
        mode: bool = False,
    ) -> UserActOut:
        n = len(model_ids)
        deploy_rows = np.tile(deploy_vec, (n, 1))
        with ad.no_grad():
            srv_logits, spl_logits = self._logits(model_ids, batches, deploy_rows)
        srv_mask = np.ones((n, self.num_servers), dtype=bool)
        spl_mask = self.split_mask(split_limits, self.max_layers)
        servers, lp_srv, ent_srv = rowwise_masked_sample(srv_logits.data, srv_mask, rng, mode)
        splits, lp_spl, ent_spl = rowwise_masked_sample(spl_logits.data, spl_mask, rng, mode)
        return UserActOut(servers, splits, lp_srv + lp_spl, ent_srv + ent_spl)

    def evaluate(
        self,
        model_ids: np.ndarray,
        batches: np.ndarray,
        deploy_rows: np.ndarray,
        split_limits: np.ndarray,
        servers: np.ndarray,
        splits: np.ndarray,
    ) -> tuple[Tensor, Tensor]:
        """Log-prob and entropy of recorded joint actions under current params."""
        n = len(model_ids)
        srv_logits, spl_logits = self._logits(model_ids, batches, deploy_rows)
        srv_mask = np.ones((n, self.num_servers), dtype=bool)
        spl_mask = self.split_mask(split_limits, self.max_layers)
        ls_srv = ad.masked_log_softmax(srv_logits, srv_mask)
        ls_spl = ad.masked_log_softmax(spl_logits, spl_mask)
        logp = ad.add(ad.take_per_row(ls_srv, servers), ad.take_per_row(ls_spl, splits))
        entropy = ad.add(ad.masked_entropy(ls_srv, srv_mask), ad.masked_entropy(ls_spl, spl_mask))
        return logp, entropy


# ---------------------------------------------------------------------------
# auto-regressive deployment policy (with shared-encoder critic)
# ---------------------------------------------------------------------------

@dataclass
class DeployDecision:
    macro: tuple[int, ...]
    logp: float
    value: float  # macro baseline (mean step value, or pre-step value if empty)
    entropy: float


class DeployPolicy:
    """Sequential masked model selection driven by a recurrent encoder.

    Each decoding step feeds the popularity observation plus the partial
    deployment indicator back through the GRU, masks out already selected
    and oversized models, and stops when nothing feasible remains. The
    critic shares the encoder; when centralized it also sees the previous
    system-wide deployment.
    """

    def __init__(
        self,
        num_models: int,
        deploy_dim: int,
        hidden: int,
        rng: np.random.Generator,
        centralized: bool = True,
    ):
        self.num_models = num_models
        self.hidden = hidden
        self.centralized = centralized
        self.store = ParamStore()
        self.gru = GruCell(self.store, "dep.gru", 3 * num_models, hidden, rng)
        self.head = Mlp(self.store, "dep.head", [hidden, num_models], rng)
        critic_in = hidden + (deploy_dim if centralized else 0)
        self.value_head = Mlp(self.store, "dep.value", [critic_in, hidden, 1], rng, head_gain=VALUE_HEAD_GAIN)

    def _feasible(self, selected: np.ndarray, used: int, sizes: np.ndarray, storage: int) -> np.ndarray:
        return (~selected) & (sizes + used <= storage)

    @staticmethod
    def _feasible_rows(
        selected: np.ndarray, used: np.ndarray, sizes: np.ndarray, storages: np.ndarray
    ) -> np.ndarray:
        return (~selected) & (sizes[None, :] + used[:, None] <= storages[:, None])

    def _value(self, h: Tensor, global_rows: np.ndarray | None) -> Tensor:
        if self.centralized:
            return self.value_head(ad.concat_cols([h, Tensor(global_rows)]))
        return self.value_head(h)

    def act(
        self,
        obs_fixed: np.ndarray,  # popularity counts, length 2I
        vec_x_prev: np.ndarray,
        sizes: np.ndarray,
        storage: int,
        rng: np.random.Generator,
        mode: bool = False,
    ) -> DeployDecision:
        return self.act_batch(
            np.asarray(obs_fixed, dtype=np.float64).reshape(1, -1),
            np.asarray(vec_x_prev, dtype=np.float64).reshape(1, -1),
            sizes,
            np.array([storage], dtype=np.int64),
            rng,
            mode=mode,
        )[0]

    def act_batch(
        self,
        obs_fixed: np.ndarray,  # (n, 2I)
        vec_x_prev: np.ndarray,  # (n, deploy_dim)
        sizes: np.ndarray,
        storages: np.ndarray,  # (n,)
        rng: np.random.Generator,
        mode: bool = False,
    ) -> list[DeployDecision]:
        """Decode macro-actions for several agents in lockstep (one rollout pass)."""
        n = obs_fixed.shape[0]
        with ad.no_grad():
            selected = np.zeros((n, self.num_models), dtype=bool)
            used = np.zeros(n, dtype=np.int64)
            done = np.zeros(n, dtype=bool)
            h = Tensor(np.zeros((n, self.hidden)))
            macros: list[list[int]] = [[] for _ in range(n)]
            step_values: list[list[float]] = [[] for _ in range(n)]
            logp = np.zeros(n)
            entropy = np.zeros(n)
            pre_value = np.zeros(n)
            first = True
            while not done.all():
                x = np.concatenate([obs_fixed, selected.astype(np.float64)], axis=1)
                h = self.gru.step(Tensor(x), h)
                values = self._value(h, vec_x_prev).data.reshape(-1)
                if first:
                    pre_value = values.copy()
                    first = False
                masks = self._feasible_rows(selected, used, sizes, storages) & ~done[:, None]
                feasible_rows = masks.any(axis=1)
                done[~feasible_rows] = True
                active = np.flatnonzero(feasible_rows)
                if active.size == 0:
                    break
                logits = self.head(h)
                idx, lp, ent = rowwise_masked_sample(
                    logits.data[active], masks[active], rng, mode
                )
                for pos, r in enumerate(active):
                    pick = int(idx[pos])
                    macros[r].append(pick)
                    step_values[r].append(float(values[r]))
                    logp[r] += float(lp[pos])
                    entropy[r] += float(ent[pos])
                    selected[r, pick] = True
                    used[r] += int(sizes[pick])
        return [
            DeployDecision(
                tuple(macros[r]),
                float(logp[r]),
                macro_value(step_values[r], float(pre_value[r])),
                float(entropy[r]),
            )
            for r in range(n)
        ]

    def evaluate(
        self,
        obs_fixed: np.ndarray,  # (B, 2I)
        vec_x_prev: np.ndarray,  # (B, deploy_dim)
        storages: np.ndarray,  # (B,)
        macros: list[tuple[int, ...]],
        sizes: np.ndarray,
    ) -> tuple[Tensor, Tensor, Tensor]:
        """Teacher-forced batched replay; returns (seq logp, entropy, macro values).

        Records are processed longest-first so each decoding step runs on a
        shrinking prefix of the batch.
        """
        n = len(macros)
        order = np.argsort([-len(m) for m in macros], kind="stable")
        inverse = np.empty(n, dtype=np.int64)
        inverse[order] = np.arange(n)
        obs_fixed = np.asarray(obs_fixed, dtype=np.float64)[order]
        vec_x_prev = np.asarray(vec_x_prev, dtype=np.float64)[order]
        storages = np.asarray(storages, dtype=np.int64)[order]
        macros_sorted = [macros[i] for i in order]
        lengths = np.array([len(m) for m in macros_sorted], dtype=np.int64)
        max_len = int(lengths.max()) if n else 0

        selected = np.zeros((n, self.num_models), dtype=bool)
        used = np.zeros(n, dtype=np.int64)
        h = Tensor(np.zeros((n, self.hidden)))
        logp = Tensor(np.zeros((n, 1)))
        entropy = Tensor(np.zeros((n, 1)))
        value_sum = Tensor(np.zeros((n, 1)))
        pre_value = Tensor(np.zeros((n, 1)))

        active = n
        for step in range(max_len + 1):
            if active == 0:
                break
            rows = np.arange(active)
            x = np.concatenate([obs_fixed[:active], selected[:active].astype(np.float64)], axis=1)
            h_active = ad.gather_rows(h, rows) if h.shape[0] != active else h
            h_active = self.gru.step(Tensor(x), h_active)
            values = self._value(h_active, vec_x_prev[:active])
            if step == 0:
                pre_value = ad.scatter_add_rows(n, rows, values)
            takers = np.flatnonzero(lengths[:active] > step)
            if takers.size:
                actions = np.array([macros_sorted[r][step] for r in takers], dtype=np.int64)
                mask = self._feasible_rows(
                    selected[takers], used[takers], sizes, storages[takers]
                )
                logits = self.head(ad.gather_rows(h_active, takers))
                ls = ad.masked_log_softmax(logits, mask)
                logp = ad.add(logp, ad.scatter_add_rows(n, takers, ad.take_per_row(ls, actions)))
                entropy = ad.add(entropy, ad.scatter_add_rows(n, takers, ad.masked_entropy(ls, mask)))
                value_sum = ad.add(
                    value_sum, ad.scatter_add_rows(n, takers, ad.gather_rows(values, takers))
                )
                selected[takers, actions] = True
                used[takers] += sizes[actions]
            h = h_active
            active = int((lengths > step).sum())

        inv_len = np.where(lengths > 0, 1.0 / np.maximum(lengths, 1), 0.0).reshape(-1, 1)
        is_empty = (lengths == 0).astype(np.float64).reshape(-1, 1)
        values_mean = ad.add(
            ad.mul(value_sum, Tensor(inv_len)), ad.mul(pre_value, Tensor(is_empty))
        )
        # undo the longest-first ordering
        back = inverse
        return (
            ad.gather_rows(logp, back),
            ad.gather_rows(entropy, back),
            ad.gather_rows(values_mean, back),
        )


# ---------------------------------------------------------------------------
# attention-based allocation policy
# ---------------------------------------------------------------------------

@dataclass
class AllocDecision:
    members: np.ndarray  # user indices associated with the server, in index order
    action_comp: np.ndarray  # sampled pre-softmax scores, one per member
    action_band: np.ndarray
    weights_comp: np.ndarray  # (K,) simplex over members, zeros elsewhere
    weights_band: np.ndarray
    logp: float


class AllocPolicy:
    """Two parallel attention branches score associated users for resource shares.

    The continuous action is the pair of noisy pre-softmax score vectors;
    weights are their softmax. Exploration adds Gaussian noise with a learned
    log-stdev per branch. Mean scores are clipped to +-SCORE_BOUND so a
    starved user still keeps a representable share.
    """

    def __init__(
        self,
        num_models: int,
        num_users: int,
        max_layers: int,
        d_model: int,
        d_scalar: int,
        d_key: int,
        hidden: int,
        batch_max: int,
        rng: np.random.Generator,
    ):
        self.num_users = num_users
        self.d_key = d_key
        self.store = ParamStore()
        self.embed = Embedding(self.store, "alc.embed", num_models, d_model, rng)
        self.batch_enc = ScalarEncoder(self.store, "alc.batch", d_scalar, rng, scale=1.0 / batch_max)
        self.split_enc = ScalarEncoder(self.store, "alc.split", d_scalar, rng, scale=1.0 / (max_layers + 1))
        self.context = Mlp(self.store, "alc.ctx", [3 * num_users, hidden, hidden], rng, head_gain=1.0)
        self.q_comp = Mlp(self.store, "alc.qcomp", [hidden, d_key], rng)
        self.q_band = Mlp(self.store, "alc.qband", [hidden, d_key], rng)
        feat = d_model + 2 * d_scalar
        self.k_comp = Mlp(self.store, "alc.kcomp", [feat, hidden, d_key], rng)
        self.k_band = Mlp(self.store, "alc.kband", [feat, hidden, d_key], rng)
        self.log_std_comp = self.store.add("alc.logstd_comp", np.full((1, 1), -0.7))
        self.log_std_band = self.store.add("alc.logstd_band", np.full((1, 1), -0.7))

    def _queries(self, obs_rows: np.ndarray) -> tuple[Tensor, Tensor]:
        ctx = ad.tanh(self.context(Tensor(obs_rows)))
        return self.q_comp(ctx), self.q_band(ctx)

    def _keys(self, model_ids, batches, splits) -> tuple[Tensor, Tensor]:
        feats = ad.concat_cols(
            [self.embed(model_ids), self.batch_enc(batches), self.split_enc(splits)]
        )
        return self.k_comp(feats), self.k_band(feats)

    def _mean_scores(self, queries: Tensor, keys: Tensor, rec_idx: np.ndarray) -> Tensor:
        """Per-member scores q[rec]·k / sqrt(d), clipped to the stable range."""
        q_rows = ad.gather_rows(queries, rec_idx)
        raw = ad.mul(ad.row_sum(ad.mul(q_rows, keys)), Tensor(1.0 / np.sqrt(self.d_key)))
        return ad.clip(raw, -SCORE_BOUND, SCORE_BOUND)

    def _sigmas(self) -> tuple[Tensor, Tensor]:
        lo, hi = LOG_STD_BOUNDS
        return (
            ad.exp(ad.clip(self.log_std_comp, lo, hi)),
            ad.exp(ad.clip(self.log_std_band, lo, hi)),
        )

    def act(
        self,
        alloc_obs: np.ndarray,  # (J, 3K)
        member_lists: list[np.ndarray],  # per server, associated user indices
        model_ids: np.ndarray,  # (K,) this slot's request features
        batches: np.ndarray,
        splits: np.ndarray,
        rng: np.random.Generator,
        explore: bool = True,
    ) -> list[AllocDecision]:
        J = alloc_obs.shape[0]
        with ad.no_grad():
            q_comp = self._queries(alloc_obs)
            q_c, q_b = q_comp[0].data, q_comp[1].data
            k_c, k_b = (t.data for t in self._keys(model_ids, batches, splits))
            sig_c, sig_b = (t.item() for t in self._sigmas())
        scale = 1.0 / np.sqrt(self.d_key)
        decisions = []
        for j in range(J):
            members = np.asarray(member_lists[j], dtype=np.int64)
            if members.size == 0:
                zero = np.zeros(self.num_users)
                decisions.append(
                    AllocDecision(members, np.zeros(0), np.zeros(0), zero, zero.copy(), 0.0)
                )
                continue
            mean_c = np.clip(k_c[members] @ q_c[j] * scale, -SCORE_BOUND, SCORE_BOUND)
            mean_b = np.clip(k_b[members] @ q_b[j] * scale, -SCORE_BOUND, SCORE_BOUND)
            if explore:
                act_c = mean_c + sig_c * rng.standard_normal(members.size)
                act_b = mean_b + sig_b * rng.standard_normal(members.size)
            else:
                act_c, act_b = mean_c.copy(), mean_b.copy()
            logp = float(
                gaussian_logp(act_c, mean_c, sig_c).sum()
                + gaussian_logp(act_b, mean_b, sig_b).sum()
            )
            decisions.append(
                AllocDecision(
                    members,
                    act_c,
                    act_b,
                    _expand_softmax(act_c, members, self.num_users),
                    _expand_softmax(act_b, members, self.num_users),
                    logp,
                )
            )
        return decisions

    def evaluate(
        self,
        obs_rows: np.ndarray,  # (B, 3K)
        rec_idx: np.ndarray,  # (M,) member -> record map
        model_ids: np.ndarray,  # (M,) member features
        batches: np.ndarray,
        splits: np.ndarray,
        action_comp: np.ndarray,  # (M,)
        action_band: np.ndarray,
    ) -> tuple[Tensor, Tensor]:
        """Log-prob of recorded score vectors and Gaussian entropy per record."""
        n = obs_rows.shape[0]
        q_comp, q_band = self._queries(obs_rows)
        k_comp, k_band = self._keys(model_ids, batches, splits)
        mean_c = self._mean_scores(q_comp, k_comp, rec_idx)
        mean_b = self._mean_scores(q_band, k_band, rec_idx)
        sig_c, sig_b = self._sigmas()
        lp_members = ad.add(
            _gaussian_logp_t(Tensor(action_comp.reshape(-1, 1)), mean_c, sig_c),
            _gaussian_logp_t(Tensor(action_band.reshape(-1, 1)), mean_b, sig_b),
        )
        logp = ad.scatter_add_rows(n, rec_idx, lp_members)
        counts = np.bincount(rec_idx, minlength=n).astype(np.float64).reshape(-1, 1)
        ent_unit = ad.add(
            ad.add(ad.log(sig_c), ad.log(sig_b)), Tensor(np.full((1, 1), LOG_2PI + 1.0))
        )
        entropy = ad.mul(Tensor(counts), ent_unit)
        return logp, entropy


def gaussian_logp(x: np.ndarray, mean: np.ndarray, sigma: float) -> np.ndarray:
    z = (x - mean) / sigma
    return -0.5 * z * z - np.log(sigma) - 0.5 * LOG_2PI


def _gaussian_logp_t(x: Tensor, mean: Tensor, sigma: Tensor) -> Tensor:
    z = ad.div(ad.sub(x, mean), sigma)
    return ad.sub(
        ad.mul(ad.mul(z, z), Tensor(-0.5)),
        ad.add(ad.log(sigma), Tensor(0.5 * LOG_2PI)),
    )


def _expand_softmax(scores: np.ndarray, members: np.ndarray, num_users: int) -> np.ndarray:
    """Softmax over member scores blended with a uniform floor.

    The floor keeps the most starved member at >= WEIGHT_FLOOR / n of the
    resource, which bounds worst-case transfer delays without materially
    restricting the policy.
    """
    out = np.zeros(num_users)
    shifted = np.exp(scores - scores.max())
    n = members.size
    out[members] = (1.0 - WEIGHT_FLOOR) * (shifted / shifted.sum()) + WEIGHT_FLOOR / n
    return out
