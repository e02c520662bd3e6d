import numpy as np
import pytest

from edgeinfer.baselines import algorithm
from edgeinfer.config import DESK_FAMILIES, desk_config
from edgeinfer.marl.gae import gae, gae_bruteforce, normalize_advantages
from edgeinfer.marl.lagrange import LagrangeState, lagrangian_dual_update
from edgeinfer.marl.policies import (
    AllocPolicy,
    DeployPolicy,
    UserPolicy,
    WEIGHT_FLOOR,
    macro_value,
)
from edgeinfer.marl.ppo import ppo_clip_objective
from edgeinfer.marl.trainer import Trainer, desk_train_config
from edgeinfer.nn.autodiff import Tensor
from edgeinfer.profiles import synth_catalog


class TestGae:
    def test_undiscounted_telescoping(self):
        adv, ret = gae([1.0, 1.0], [0.0, 0.0], 0.0, gamma=1.0, lam=1.0)
        assert np.allclose(adv, [2.0, 1.0])
        assert np.allclose(ret, [2.0, 1.0])

    def test_zeros(self):
        adv, _ = gae(np.zeros(5), np.zeros(5), 0.0)
        assert np.all(adv == 0.0)

    def test_single_step(self):
        adv, _ = gae([2.0], [0.5], bootstrap=1.0, gamma=0.9, lam=0.95)
        assert adv[0] == pytest.approx(2.0 + 0.9 * 1.0 - 0.5)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            gae([1.0, 2.0], [0.0], 0.0)

    def test_brute_force_oracle_hundred_sequences(self):
        rng = np.random.default_rng(99)
        for _ in range(100):
            n = int(rng.integers(1, 65))
            rewards = rng.standard_normal(n) * 10
            values = rng.standard_normal(n) * 5
            bootstrap = float(rng.standard_normal())
            fast, _ = gae(rewards, values, bootstrap, gamma=0.99, lam=0.95)
            slow = gae_bruteforce(rewards, values, bootstrap, gamma=0.99, lam=0.95)
            assert np.abs(fast - slow).max() <= 1e-9

    def test_returns_are_advantages_plus_values(self):
        rng = np.random.default_rng(5)
        rewards, values = rng.standard_normal(20), rng.standard_normal(20)
        adv, ret = gae(rewards, values, 0.0)
        assert np.allclose(ret, adv + values)

    def test_normalize(self):
        adv = normalize_advantages(np.array([1.0, 2.0, 3.0, 4.0]))
        assert adv.mean() == pytest.approx(0.0, abs=1e-12)
        assert adv.std() == pytest.approx(1.0, rel=1e-6)


class TestPpoClip:
    def test_identity_ratio_gives_mean_advantage(self):
        logp = Tensor(np.zeros((4, 1)))
        adv = np.array([1.0, -2.0, 3.0, 0.5])
        obj = ppo_clip_objective(logp, np.zeros(4), adv, 0.2)
        assert obj.item() == pytest.approx(adv.mean())

    def test_positive_advantage_clipped_above(self):
        # ratio 2 with A=1 clips to 1.2
        logp_new = Tensor(np.array([[np.log(2.0)]]))
        obj = ppo_clip_objective(logp_new, np.zeros(1), np.array([1.0]), 0.2)
        assert obj.item() == pytest.approx(1.2)

    def test_negative_advantage_takes_clipped_branch(self):
        # ratio 0.5 with A=-1: min(-0.5, -0.8) = -0.8
        logp_new = Tensor(np.array([[np.log(0.5)]]))
        obj = ppo_clip_objective(logp_new, np.zeros(1), np.array([-1.0]), 0.2)
        assert obj.item() == pytest.approx(-0.8)

    def test_gradient_zero_when_clipped_branch_active(self):
        # ratio far above 1+eps with positive advantage: objective constant
        logp_new = Tensor(np.array([[np.log(3.0)]]), requires_grad=True)
        obj = ppo_clip_objective(logp_new, np.zeros(1), np.array([1.0]), 0.2)
        obj.backward()
        assert logp_new.grad[0, 0] == 0.0

    def test_gradient_flows_in_trust_region(self):
        logp_new = Tensor(np.array([[0.05]]), requires_grad=True)
        obj = ppo_clip_objective(logp_new, np.zeros(1), np.array([1.0]), 0.2)
        obj.backward()
        assert logp_new.grad[0, 0] != 0.0

    def test_advantages_are_constants(self):
        # doubling logp_old shifts ratios but advantage array itself has no grad path
        logp_new = Tensor(np.full((3, 1), 0.1), requires_grad=True)
        obj = ppo_clip_objective(logp_new, np.full(3, 0.1), np.array([1.0, 1.0, 1.0]), 0.2)
        assert obj.item() == pytest.approx(1.0)


class TestLagrange:
    def test_hand_update(self):
        state = LagrangeState(lam=0.01, alpha=0.01, j_bar=3.0)
        new = lagrangian_dual_update(state, 5.0)
        assert new.lam == pytest.approx(0.03, abs=1e-12)

    def test_projection_at_zero(self):
        state = LagrangeState(lam=0.01, alpha=0.01, j_bar=3.0)
        assert lagrangian_dual_update(state, 0.0).lam == 0.0

    def test_upper_clamp(self):
        state = LagrangeState(lam=99.9, alpha=0.01, j_bar=3.0, bounds=(0.0, 100.0))
        assert lagrangian_dual_update(state, 103.0).lam == 100.0

    def test_sign_dynamics_inside_bounds(self):
        rng = np.random.default_rng(0)
        state = LagrangeState(lam=50.0, alpha=0.05, j_bar=3.0)
        for _ in range(200):
            j_hat = float(rng.uniform(0.0, 6.0))
            new = lagrangian_dual_update(state, j_hat)
            if 0.0 < state.lam < 100.0:
                assert np.sign(new.lam - state.lam) == np.sign(j_hat - state.j_bar)
            state = new

    def test_negative_measurement_rejected(self):
        with pytest.raises(ValueError):
            lagrangian_dual_update(LagrangeState(), -1.0)


class TestMacroValue:
    def test_mean(self):
        assert macro_value([1.0, 2.0, 3.0]) == 2.0

    def test_singleton(self):
        assert macro_value([5.0]) == 5.0

    def test_empty_uses_pre_step(self):
        assert macro_value([], 7.0) == 7.0

    def test_empty_without_pre_step_rejected(self):
        with pytest.raises(ValueError):
            macro_value([])


@pytest.fixture(scope="module")
def catalog():
    return synth_catalog(DESK_FAMILIES, 2, seed=7)


def make_deploy_policy(num_models=4, deploy_dim=12, hidden=16, seed=0):
    return DeployPolicy(num_models, deploy_dim, hidden, np.random.default_rng(seed))


class TestDeployPolicy:
    def test_forced_single_choice(self):
        policy = make_deploy_policy(num_models=3)
        sizes = np.array([10, 100, 100])
        dec = policy.act(np.zeros(6), np.zeros(12), sizes, 50, np.random.default_rng(0))
        assert dec.macro == (0,)
        assert dec.logp == pytest.approx(0.0, abs=1e-12)

    def test_nothing_fits_empty_macro(self):
        policy = make_deploy_policy(num_models=3)
        sizes = np.array([10, 10, 10])
        dec = policy.act(np.zeros(6), np.zeros(12), sizes, 5, np.random.default_rng(0))
        assert dec.macro == ()
        assert dec.logp == 0.0

    def test_feasibility_over_ten_thousand_samples(self):
        # sizes 2,2,2 with storage 3: every macro has length exactly <= 1
        policy = make_deploy_policy(num_models=3)
        sizes = np.array([2, 2, 2])
        rng = np.random.default_rng(7)
        for _ in range(10_000):
            dec = policy.act(np.zeros(6), np.zeros(12), sizes, 3, rng)
            assert len(dec.macro) <= 1
            assert len(set(dec.macro)) == len(dec.macro)

    def test_macro_never_exceeds_storage_or_repeats(self):
        policy = make_deploy_policy(num_models=6, deploy_dim=18)
        rng = np.random.default_rng(3)
        sizes = np.array([5, 3, 8, 2, 9, 4])
        for _ in range(2000):
            storage = int(rng.integers(1, 25))
            dec = policy.act(rng.standard_normal(12), np.zeros(18), sizes, storage, rng)
            assert sizes[list(dec.macro)].sum() <= storage
            assert len(set(dec.macro)) == len(dec.macro)

    def test_evaluate_matches_act_logp(self):
        policy = make_deploy_policy(num_models=5, deploy_dim=10)
        rng = np.random.default_rng(11)
        sizes = np.array([4, 6, 3, 8, 5])
        obs = rng.standard_normal((3, 10))
        prev = rng.standard_normal((3, 10))
        storages = np.array([12, 7, 20])
        decs = [
            policy.act(obs[r], prev[r], sizes, int(storages[r]), rng) for r in range(3)
        ]
        logp, _, values = policy.evaluate(
            obs, prev, storages, [d.macro for d in decs], sizes
        )
        for r, dec in enumerate(decs):
            assert logp.data[r, 0] == pytest.approx(dec.logp, abs=1e-10)
            assert values.data[r, 0] == pytest.approx(dec.value, abs=1e-10)

    def test_batched_act_matches_sequential_masks(self):
        policy = make_deploy_policy(num_models=4, deploy_dim=8)
        sizes = np.array([3, 3, 3, 3])
        rng = np.random.default_rng(5)
        decs = policy.act_batch(
            np.zeros((2, 8)), np.zeros((2, 8)), sizes, np.array([6, 0]), rng
        )
        assert len(decs[0].macro) == 2  # storage 6 fits exactly two
        assert decs[1].macro == ()


class TestUserPolicy:
    def make(self, num_models=4, num_servers=2, max_layers=5, deploy_dim=8, seed=0):
        return UserPolicy(
            num_models, num_servers, max_layers, deploy_dim, 4, 4, 16, 4,
            np.random.default_rng(seed),
        )

    def test_uniform_logits_joint_probability(self):
        policy = self.make(num_servers=2, max_layers=2)
        for name in policy.store.names():
            policy.store[name].data[:] = 0.0
        rng = np.random.default_rng(0)
        counts = np.zeros((2, 3))
        n = 30_000
        ids = np.zeros(n, dtype=np.int64)
        batches = np.ones(n, dtype=np.int64)
        out = policy.act(ids, batches, np.zeros(8), np.full(n, 2), rng)
        for s, z in zip(out.servers, out.splits):
            counts[s, z] += 1
        assert np.abs(counts / n - 1.0 / 6.0).max() < 0.01
        assert np.allclose(out.logps, np.log(1.0 / 6.0))

    def test_split_mask_blocks_beyond_layer_count(self):
        policy = self.make(max_layers=5)
        rng = np.random.default_rng(1)
        out = policy.act(
            np.zeros(2000, dtype=np.int64), np.ones(2000, dtype=np.int64),
            np.zeros(8), np.full(2000, 2), rng,
        )
        assert out.splits.max() <= 2

    def test_logp_matches_density_recomputation(self):
        policy = self.make()
        rng = np.random.default_rng(3)
        ids = rng.integers(0, 4, size=64)
        batches = rng.integers(1, 5, size=64)
        limits = rng.integers(1, 6, size=64)
        out = policy.act(ids, batches, np.zeros(8), limits, rng)
        logp, _ = policy.evaluate(
            ids, batches, np.tile(np.zeros(8), (64, 1)), limits, out.servers, out.splits
        )
        assert np.abs(logp.data.reshape(-1) - out.logps).max() < 1e-12

    def test_mode_is_deterministic(self):
        policy = self.make()
        ids = np.arange(4, dtype=np.int64) % 4
        batches = np.ones(4, dtype=np.int64)
        a = policy.act(ids, batches, np.zeros(8), np.full(4, 5), np.random.default_rng(0), mode=True)
        b = policy.act(ids, batches, np.zeros(8), np.full(4, 5), np.random.default_rng(9), mode=True)
        assert np.array_equal(a.servers, b.servers)
        assert np.array_equal(a.splits, b.splits)


class TestAllocPolicy:
    def make(self, num_users=6, seed=0):
        return AllocPolicy(4, num_users, 5, 4, 4, 8, 16, 4, np.random.default_rng(seed))

    def test_single_member_gets_everything(self):
        policy = self.make()
        decs = policy.act(
            np.zeros((2, 18)), [np.array([3]), np.array([], dtype=int)],
            np.zeros(6, dtype=np.int64), np.ones(6, dtype=np.int64),
            np.zeros(6, dtype=np.int64), np.random.default_rng(0), explore=False,
        )
        assert decs[0].weights_comp[3] == 1.0
        assert decs[0].weights_comp.sum() == 1.0
        assert decs[1].weights_comp.sum() == 0.0
        assert decs[1].logp == 0.0

    def test_identical_members_split_half(self):
        policy = self.make()
        ids = np.zeros(6, dtype=np.int64)
        batches = np.full(6, 2, dtype=np.int64)
        splits = np.full(6, 1, dtype=np.int64)
        decs = policy.act(
            np.zeros((1, 18)), [np.array([0, 1])], ids, batches, splits,
            np.random.default_rng(0), explore=False,
        )
        assert decs[0].weights_comp[0] == 0.5
        assert decs[0].weights_comp[1] == 0.5
        assert decs[0].weights_band[0] == 0.5

    def test_simplex_and_floor_over_random_draws(self):
        policy = self.make(num_users=8)
        rng = np.random.default_rng(2)
        for _ in range(1000):
            n = int(rng.integers(1, 9))
            members = np.sort(rng.choice(8, size=n, replace=False))
            decs = policy.act(
                rng.standard_normal((1, 24)), [members],
                rng.integers(0, 4, size=8), rng.integers(1, 5, size=8),
                rng.integers(0, 6, size=8), rng, explore=True,
            )
            w = decs[0].weights_comp
            assert abs(w.sum() - 1.0) < 1e-12
            assert (w[members] >= WEIGHT_FLOOR / n - 1e-15).all()
            others = np.setdiff1d(np.arange(8), members)
            assert (w[others] == 0.0).all()

    def test_evaluate_matches_act_logp(self):
        policy = self.make(num_users=5)
        rng = np.random.default_rng(4)
        obs = rng.standard_normal((3, 15))
        ids = rng.integers(0, 4, size=5)
        batches = rng.integers(1, 5, size=5)
        splits = rng.integers(0, 6, size=5)
        member_lists = [np.array([0, 2]), np.array([1, 3, 4]), np.array([], dtype=int)]
        decs = policy.act(obs, member_lists, ids, batches, splits, rng, explore=True)
        rec_idx = np.array([0, 0, 1, 1, 1])
        members = np.array([0, 2, 1, 3, 4])
        logp, _ = policy.evaluate(
            obs[:2], rec_idx, ids[members], batches[members], splits[members],
            np.concatenate([d.action_comp for d in decs[:2]]),
            np.concatenate([d.action_band for d in decs[:2]]),
        )
        assert logp.data[0, 0] == pytest.approx(decs[0].logp, abs=1e-10)
        assert logp.data[1, 0] == pytest.approx(decs[1].logp, abs=1e-10)


class TestTrainerIntegration:
    def test_buffer_record_counts(self, catalog):
        cfg = desk_config()
        tc = desk_train_config(steps=20, num_envs=2)
        tr = Trainer(cfg, catalog, algorithm("hc-mappo-l"), tc, run_seed=0)
        batch = tr.collect()
        n, t, k = batch.model_ids.shape
        assert (n, t, k) == (2, 20, 8)
        assert batch.user_rewards.size == 2 * 20 * 8
        assert batch.alloc_logp.size == 2 * 20 * 3
        s = 20 // cfg.deploy_interval
        assert batch.dep_logp.shape == (2, s, 3)

    def test_zero_learning_rate_keeps_params_but_updates_lambda(self, catalog):
        cfg = desk_config()
        tc = desk_train_config(steps=10, num_envs=1, lr=0.0, iterations=1)
        tr = Trainer(cfg, catalog, algorithm("hc-mappo-l"), tc, run_seed=0)
        before = {
            name: tr.user_policy.store[name].data.copy()
            for name in tr.user_policy.store.names()
        }
        lam0 = tr.lagrange.lam
        metrics = tr.train_iteration()
        for name, data in before.items():
            assert np.array_equal(tr.user_policy.store[name].data, data)
        assert metrics["lambda"] != lam0  # j_hat >> tau_bar at random init

    def test_lambda_non_increasing_when_under_threshold(self, catalog):
        cfg = desk_config()
        tc = desk_train_config(steps=10, num_envs=1, lr=0.0)
        tr = Trainer(cfg, catalog, algorithm("hc-mappo-l"), tc, run_seed=0)
        tr.lagrange = LagrangeState(lam=5.0, alpha=0.001, j_bar=1e4)  # comfortably satisfied
        last = tr.lagrange.lam
        for _ in range(3):
            tr.train_iteration()
            assert tr.lagrange.lam <= last
            last = tr.lagrange.lam
        assert last < 5.0

    def test_unconstrained_spec_freezes_lambda_and_mu3(self, catalog):
        cfg = desk_config()
        tc = desk_train_config(steps=10, num_envs=1)
        tr = Trainer(cfg, catalog, algorithm("h-mappo"), tc, run_seed=0)
        assert tr.config.weights.mu3 == 0.0
        tr.train_iteration()
        assert tr.lagrange.lam == 0.0

    def test_hmappo_equals_hcmappo_with_lambda_zero(self, catalog):
        # operator-level ablation equivalence: with lambda pinned at 0 and
        # mu3 = 0, the constrained update reduces to the unconstrained one
        import dataclasses

        cfg = desk_config()
        cfg_mu3_zero = cfg.replace(weights=dataclasses.replace(cfg.weights, mu3=0.0))
        tc = desk_train_config(steps=10, num_envs=1, lambda0=0.0, alpha_lambda=0.0)
        constrained = Trainer(cfg_mu3_zero, catalog, algorithm("hc-mappo-l"), tc, run_seed=3)
        unconstrained = Trainer(cfg, catalog, algorithm("h-mappo"), tc, run_seed=3)
        for _ in range(2):
            constrained.train_iteration()
            unconstrained.train_iteration()
        for policy in ("user_policy", "deploy_policy", "alloc_policy"):
            store_a = getattr(constrained, policy).store
            store_b = getattr(unconstrained, policy).store
            for name in store_a.names():
                assert np.array_equal(store_a[name].data, store_b[name].data), name

    def test_determinism_same_seed_same_metrics(self, catalog):
        cfg = desk_config()
        tc = desk_train_config(steps=10, num_envs=2)
        a = Trainer(cfg, catalog, algorithm("hc-mappo-l"), tc, run_seed=5)
        b = Trainer(cfg, catalog, algorithm("hc-mappo-l"), tc, run_seed=5)
        ma = [a.train_iteration() for _ in range(2)]
        mb = [b.train_iteration() for _ in range(2)]
        for ra, rb in zip(ma, mb):
            for key in ("mean_delay", "mean_user_reward", "lambda", "loss_user"):
                assert ra[key] == rb[key]

    def test_checkpoint_round_trip(self, catalog, tmp_path):
        cfg = desk_config()
        tc = desk_train_config(steps=10, num_envs=1)
        tr = Trainer(cfg, catalog, algorithm("hc-mappo-l"), tc, run_seed=1)
        tr.train_iteration()
        path = str(tmp_path / "ckpt.npz")
        tr.save_checkpoint(path)
        ev1 = tr.evaluate(1, seed=0)

        from edgeinfer.marl.trainer import trainer_from_checkpoint

        tr2 = trainer_from_checkpoint(path, catalog)
        ev2 = tr2.evaluate(1, seed=0)
        assert ev1["mean_delay"] == ev2["mean_delay"]
        assert ev1["cost_with_violations"] == ev2["cost_with_violations"]
        assert tr2.lagrange.lam == tr.lagrange.lam
