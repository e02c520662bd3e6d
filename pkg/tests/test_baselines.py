import numpy as np
import pytest

from edgeinfer.baselines import (
    ALGORITHMS,
    BaselineSpec,
    algorithm,
    equal_share_weights,
    estimate_delay,
    fixed_policies,
    greedy_split,
    heuristic_user_actions,
    lru_deploy,
    popularity_deploy,
    strongest_server,
)
from edgeinfer.config import DESK_FAMILIES, desk_config
from edgeinfer.env import CollabInferenceEnv, Request
from edgeinfer.profiles import LayerProfile, ModelProfile, synth_catalog


class TestPopularityDeploy:
    def test_greedy_fill_by_count(self):
        counts = np.array([5, 3, 1])
        sizes = np.array([10**9, 10**9, 10**9])
        assert popularity_deploy(counts, 2 * 10**9, sizes) == [0, 1]

    def test_zero_storage(self):
        assert popularity_deploy(np.array([2, 1]), 0, np.array([1, 1])) == []

    def test_tie_breaks_to_lower_id(self):
        counts = np.array([2, 2])
        assert popularity_deploy(counts, 10**9, np.array([10**9, 10**9])) == [0]

    def test_skips_oversized_but_continues(self):
        counts = np.array([9, 5, 1])
        sizes = np.array([10, 3, 2])
        assert popularity_deploy(counts, 5, sizes) == [1, 2]


class TestLruDeploy:
    def test_recency_order(self):
        last_used = np.array([3, 1, 2])
        sizes = np.array([1, 1, 1])
        assert lru_deploy(last_used, 2, sizes) == [0, 2]

    def test_never_used_fills_by_id(self):
        last_used = np.array([-1, -1, -1])
        assert lru_deploy(last_used, 2, np.array([1, 1, 1])) == [0, 1]

    def test_capacity_covers_all(self):
        assert lru_deploy(np.array([5, 1, 9]), 100, np.array([1, 1, 1])) == [2, 0, 1]


class TestStrongestServer:
    def test_plain_argmax(self):
        assert strongest_server(np.array([0.1, 0.9, 0.5])) == 1

    def test_model_aware_restriction(self):
        gains = np.array([0.9, 0.5, 0.1])
        deployed = np.array([False, True, True])
        assert strongest_server(gains, deployed) == 1

    def test_fallback_when_nowhere_deployed(self):
        gains = np.array([0.2, 0.7])
        assert strongest_server(gains, np.array([False, False])) == 1

    def test_tie_breaks_to_lower_index(self):
        assert strongest_server(np.array([0.5, 0.5])) == 0


def two_layer_profile():
    # two layers, 1 GFLOP each, negligible transfer volumes
    layers = (
        LayerProfile("dense", 10**9, 0, (1,)),
        LayerProfile("dense", 10**9, 0, (1,)),
    )
    return ModelProfile(0, layers, 0, 0, (1.0, 0.5, 0.0))


class TestGreedySplit:
    def test_hand_enumerated_example(self):
        # f_user = 1 GFLOPS, f_share = 2 GFLOPS, negligible comm:
        # tau(0) = 1.0, tau(1) = 1.5, tau(2) = 2.0 -> deepest under 1.5 is l=1
        import math

        profile = two_layer_profile()
        assert greedy_split(profile, 1, math.inf, math.inf, 1e9, 2e9, tau_bar=1.5) == 1

    def test_loose_deadline_goes_deepest(self):
        import math

        assert greedy_split(two_layer_profile(), 1, math.inf, math.inf, 1e9, 2e9, tau_bar=100.0) == 2

    def test_infeasible_falls_back_to_argmin(self):
        import math

        assert greedy_split(two_layer_profile(), 1, math.inf, math.inf, 1e9, 2e9, tau_bar=0.5) == 0

    def test_matches_exhaustive_search_hundred_instances(self):
        rng = np.random.default_rng(17)
        catalog = synth_catalog(DESK_FAMILIES, 2, seed=7)
        for _ in range(100):
            profile = catalog[int(rng.integers(0, len(catalog)))]
            batch = int(rng.integers(1, 5))
            rate_down = float(rng.uniform(1e6, 2e8))
            rate_up = float(rng.uniform(1e5, 5e7))
            f_user = float(rng.uniform(1e10, 1e11))
            f_share = float(rng.uniform(1e11, 1e12))
            tau_bar = float(rng.uniform(0.5, 20.0))
            got = greedy_split(profile, batch, rate_down, rate_up, f_user, f_share, tau_bar)
            delays = [
                estimate_delay(profile, l, batch, rate_down, rate_up, f_user, f_share)
                for l in range(profile.layer_count + 1)
            ]
            feasible = [l for l, d in enumerate(delays) if d <= tau_bar]
            expected = feasible[-1] if feasible else int(np.argmin(delays))
            assert got == expected


class TestFixedPolicies:
    def test_local_only_rule(self):
        spec = fixed_policies("local-only")
        assert spec.partition == "full-local"
        assert spec.association == "channel-strongest"
        assert spec.allocation == "equal-share"

    def test_edge_only_rule(self):
        spec = fixed_policies("edge-only")
        assert spec.partition == "full-edge"

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            fixed_policies("cloud-only")


class TestHeuristicSlotDecisions:
    @pytest.fixture()
    def setup(self):
        catalog = synth_catalog(DESK_FAMILIES, 2, seed=7)
        config = desk_config()
        env = CollabInferenceEnv(config, catalog)
        env.reset(0)
        env.deployment_phase([[0, 1, 2], [3], [4]])
        requests = [Request(k, k % 6, 1 + k % 4) for k in range(8)]
        return catalog, config, env, requests

    def run_rules(self, spec, setup):
        catalog, config, env, requests = setup
        return heuristic_user_actions(
            spec, requests, catalog, config, env.gain, env.X,
            env.f_user, env.f_server, env.bandwidth, env.p_server_w, env.p_user_w,
        )

    def test_local_only_splits_are_layer_counts(self, setup):
        catalog, _, _, requests = setup
        _, splits = self.run_rules(ALGORITHMS["local-only"], setup)
        for req in requests:
            assert splits[req.user] == catalog[req.model].layer_count

    def test_edge_only_splits_are_zero(self, setup):
        _, splits = self.run_rules(ALGORITHMS["edge-only"], setup)
        assert (splits == 0).all()

    def test_channel_strongest_ignores_deployment(self, setup):
        catalog, _, env, requests = setup
        servers, _ = self.run_rules(ALGORITHMS["local-only"], setup)
        for req in requests:
            assert servers[req.user] == int(env.gain[:, req.user].argmax())

    def test_greedy_prefers_server_with_model(self, setup):
        catalog, _, env, requests = setup
        servers, _ = self.run_rules(ALGORITHMS["greedy"], setup)
        for req in requests:
            j = servers[req.user]
            if env.X[:, req.model].any():
                assert env.X[j, req.model] == 1

    def test_edge_only_privacy_is_full_leakage_cost(self, setup):
        # with z = 0 the privacy cost is (a1 + a2 Pre) * batch * raw_mb exactly
        catalog, config, env, requests = setup
        servers, splits = self.run_rules(ALGORITHMS["edge-only"], setup)
        weights = equal_share_weights(servers, config.num_servers, config.num_users)
        out = env.step(requests, (servers, splits), (weights, weights.copy()))
        w = config.weights
        for req in requests:
            k = req.user
            if not out.hits[k]:
                continue
            raw_mb = catalog[req.model].raw_input_bytes / 1e6
            expected = (w.alpha1 + w.alpha2 * env.pre[k]) * 1.0 * req.batch * raw_mb
            assert out.privacy[k] == pytest.approx(expected, rel=1e-12)


class TestEqualShare:
    def test_weights_uniform_over_members(self):
        servers = np.array([0, 0, 1, 0])
        w = equal_share_weights(servers, 2, 4)
        assert np.allclose(w[0], [1, 1, 0, 1])
        assert np.allclose(w[1], [0, 0, 1, 0])

    def test_capacity_equality_for_every_nonempty_set(self):
        import math

        from edgeinfer.env import capacity_partition

        rng = np.random.default_rng(3)
        for n in range(1, 9):
            cap = float(rng.uniform(1e6, 1e11))
            alloc = capacity_partition(cap, np.ones(n))
            assert math.fsum(alloc) <= cap
            assert abs(math.fsum(alloc) - cap) <= 8 * np.finfo(float).eps * cap


class TestAblationWiring:
    def test_heuristic_mappo_l(self):
        spec = algorithm("heuristic-mappo-l")
        assert spec.learned_user
        assert spec.allocation == "equal-share"
        assert spec.deployment == "lru"
        assert spec.constraint == "lagrangian"
        assert spec.centralized_critics

    def test_h_mappo_freezes_constraint_machinery(self):
        spec = algorithm("h-mappo")
        assert spec.constraint == "none"
        assert spec.centralized_critics

    def test_ippo_variants_decentralize_critics(self):
        assert not algorithm("h-ippo").centralized_critics
        assert not algorithm("hc-ippo-l").centralized_critics
        assert algorithm("hc-ippo-l").constraint == "lagrangian"
        assert algorithm("h-ippo").constraint == "none"

    def test_seven_baselines_plus_main(self):
        assert len(ALGORITHMS) == 8
        for name, spec in ALGORITHMS.items():
            spec.validate()
            assert spec.name == name

    def test_unknown_algorithm(self):
        with pytest.raises(ValueError):
            algorithm("dqn")

    def test_joint_policy_consistency_enforced(self):
        with pytest.raises(ValueError):
            BaselineSpec("hc-mappo-l", association="learned", partition="full-edge").validate()
