"""Acceptance suite: one test per release criterion, run at pinned tolerances.

The training-dependent criteria (constraint satisfaction, constrained-vs-
unconstrained separation, dual dynamics, weight-ratio trend) share one set
of desk-scale runs collected by a session fixture; the runs execute in
parallel worker processes and are fully seeded.
"""

import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace

import numpy as np
import pytest

from edgeinfer.baselines import algorithm, estimate_delay, greedy_split
from edgeinfer.config import DESK_FAMILIES, desk_config
from edgeinfer.costs import CostWeights, delay_components, energy, privacy_cost
from edgeinfer.env import CollabInferenceEnv
from edgeinfer.harness import run as run_plan
from edgeinfer.marl.gae import gae, gae_bruteforce
from edgeinfer.marl.policies import DeployPolicy
from edgeinfer.marl.trainer import Trainer, desk_train_config
from edgeinfer.nn.distributions import MaskedCategorical
from edgeinfer.nn.layers import orthogonal_init
from edgeinfer.profiles import PartitionSummary, partition_summary, synth_catalog

DESK_SEEDS = (0, 1, 2)
RATIOS = (0.2, 1.0, 5.0)
TAU_BAR = 3.0


def _train_one(job):
    """Worker: train one desk run and return its evaluation and dual trace."""
    kind, seed, ratio = job
    catalog = synth_catalog(DESK_FAMILIES, 2, seed=7)
    config = desk_config()
    iterations = 300
    if ratio != 1.0:
        config = config.replace(weights=replace(config.weights, mu2=config.weights.mu1 * ratio))
        iterations = 150  # trend check; direction is established well before this
    trainer = Trainer(
        config, catalog, algorithm(kind), desk_train_config(iterations=iterations), run_seed=seed
    )
    t0 = time.time()
    trace = []
    for _ in range(iterations):
        metrics = trainer.train_iteration()
        trace.append((metrics["lambda"], metrics["j_hat"]))
    evaluation = trainer.evaluate(5, seed=seed)
    return {
        "kind": kind,
        "seed": seed,
        "ratio": ratio,
        "minutes": (time.time() - t0) / 60.0,
        "trace": trace,
        "eval": evaluation,
        "j_bar": trainer.lagrange.j_bar,
        "bounds": trainer.lagrange.bounds,
        "lambda0": trainer.train_config.lambda0,
    }


@pytest.fixture(scope="session")
def desk_runs():
    jobs = [("hc-mappo-l", s, 1.0) for s in DESK_SEEDS]
    jobs += [("h-mappo", s, 1.0) for s in DESK_SEEDS]
    jobs += [("hc-mappo-l", s, r) for r in RATIOS if r != 1.0 for s in DESK_SEEDS]
    with ProcessPoolExecutor(max_workers=2) as pool:
        results = list(pool.map(_train_one, jobs))
    return {(r["kind"], r["seed"], r["ratio"]): r for r in results}


def _hc(desk_runs, seed):
    return desk_runs[("hc-mappo-l", seed, 1.0)]


def _hm(desk_runs, seed):
    return desk_runs[("h-mappo", seed, 1.0)]


class TestCriterion1ConstraintSatisfaction:
    def test_hc_mappo_l_meets_delay_budget(self, desk_runs):
        # tau-bar binding: unconstrained H-MAPPO must exceed it (seed majority)
        binding = sum(_hm(desk_runs, s)["eval"]["mean_delay"] > TAU_BAR for s in DESK_SEEDS)
        assert binding >= 2, "constraint is not binding: H-MAPPO meets tau-bar untrained"
        passes = 0
        for seed in DESK_SEEDS:
            delay = _hc(desk_runs, seed)["eval"]["mean_delay"]
            ok = delay <= 1.05 * TAU_BAR
            print(f"criterion1 seed {seed}: eval delay {delay:.3f} vs {1.05 * TAU_BAR:.3f} "
                  f"-> {'PASS' if ok else 'FAIL'}")
            passes += ok
        assert passes >= 2, f"only {passes}/3 seeds within 1.05 * tau_bar"

    def test_runtime_budget(self, desk_runs):
        total = sum(_hc(desk_runs, s)["minutes"] for s in DESK_SEEDS)
        print(f"criterion1 runtime: {total:.1f} min for 3 seeds -> "
              f"{'PASS' if total <= 30 else 'FAIL'}")
        assert total <= 30.0


class TestCriterion2ConstrainedVsUnconstrained:
    def test_unconstrained_violates_while_cost_competitive(self, desk_runs):
        exceed_votes, cost_votes = 0, 0
        for seed in DESK_SEEDS:
            hm, hc = _hm(desk_runs, seed)["eval"], _hc(desk_runs, seed)["eval"]
            exceed_votes += hm["mean_delay"] > TAU_BAR
            cost_votes += hm["cost_weighted"] <= 1.10 * hc["cost_weighted"]
            print(f"criterion2 seed {seed}: H-MAPPO delay {hm['mean_delay']:.3f} "
                  f"(> {TAU_BAR}), cost {hm['cost_weighted']:.2f} vs "
                  f"HC {hc['cost_weighted']:.2f}")
        ok = exceed_votes >= 2 and cost_votes >= 2
        print(f"criterion2: exceed {exceed_votes}/3, cost-competitive {cost_votes}/3 -> "
              f"{'PASS' if ok else 'FAIL'}")
        assert exceed_votes >= 2
        assert cost_votes >= 2


class TestCriterion3DualDynamics:
    def test_multiplier_moves_with_constraint_sign(self, desk_runs):
        violations = 0
        checked = 0
        for key, result in desk_runs.items():
            if key[0] != "hc-mappo-l":
                continue
            lam_prev = result["lambda0"]
            lo, hi = result["bounds"]
            for lam, j_hat in result["trace"]:
                if lo < lam_prev < hi and lam != lam_prev:
                    checked += 1
                    if np.sign(lam - lam_prev) != np.sign(j_hat - result["j_bar"]):
                        violations += 1
                lam_prev = lam
        print(f"criterion3: {violations} sign violations over {checked} dual updates -> "
              f"{'PASS' if violations == 0 else 'FAIL'}")
        assert checked > 100
        assert violations == 0


class TestCriterion4FeasibilityExactness:
    def test_env_constraints_over_ten_thousand_random_steps(self):
        catalog = synth_catalog(DESK_FAMILIES, 2, seed=7)
        cfg = desk_config()
        env = CollabInferenceEnv(cfg, catalog)
        rng = np.random.default_rng(2024)
        steps = 0
        episode = 0
        while steps < 10_000:
            env.reset(int(rng.integers(0, 50)), episode=episode)
            episode += 1
            for _ in range(cfg.horizon):
                if env.deployment_due:
                    macros = []
                    for j in range(cfg.num_servers):
                        order = rng.permutation(cfg.num_models)
                        used, macro = 0, []
                        for i in order:
                            if used + env.model_sizes[i] <= env.storage[j] and rng.random() < 0.8:
                                macro.append(int(i))
                                used += int(env.model_sizes[i])
                        macros.append(macro)
                    env.deployment_phase(macros)
                reqs = env.sample_slot_requests()
                servers = rng.integers(0, cfg.num_servers, size=cfg.num_users)
                splits = np.array(
                    [rng.integers(0, env.layer_counts[r.model] + 1) for r in reqs]
                )
                w = rng.random((cfg.num_servers, cfg.num_users)) + 1e-6
                out = env.step(reqs, (servers, splits), (w, w.copy()))
                # C5/C6 exactness re-checked here on top of the env's own check
                for j in range(cfg.num_servers):
                    assert math.fsum(out.state.compute_alloc[j]) <= env.f_server[j]
                    assert math.fsum(out.state.bandwidth_alloc[j]) <= env.bandwidth[j]
                    stored = int((out.state.deployment[j] * env.model_sizes).sum())
                    assert stored <= int(env.storage[j])
                steps += 1
                if steps >= 10_000:
                    break
        print(f"criterion4a: zero C4-C7 violations over {steps} random steps -> PASS")

    def test_macro_feasibility_over_ten_thousand_samples(self):
        policy = DeployPolicy(6, 18, 32, np.random.default_rng(0))
        rng = np.random.default_rng(1)
        sizes = np.array([6, 5, 56, 55, 634, 638]) * 10**6
        count = 0
        while count < 10_000:
            storages = rng.integers(5 * 10**8, 10**9, size=4)
            decisions = policy.act_batch(
                rng.standard_normal((4, 12)), np.zeros((4, 18)), sizes, storages, rng
            )
            for storage, dec in zip(storages, decisions):
                assert sizes[list(dec.macro)].sum() <= storage
                assert len(set(dec.macro)) == len(dec.macro)
                count += 1
        print(f"criterion4b: zero storage/repeat violations over {count} macros -> PASS")


class TestCriterion5OracleEquivalences:
    def test_gae_brute_force(self):
        rng = np.random.default_rng(41)
        worst = 0.0
        for _ in range(100):
            n = int(rng.integers(1, 65))
            rewards = rng.standard_normal(n) * 10
            values = rng.standard_normal(n) * 4
            bootstrap = float(rng.standard_normal())
            fast, _ = gae(rewards, values, bootstrap, 0.99, 0.95)
            slow = gae_bruteforce(rewards, values, bootstrap, 0.99, 0.95)
            worst = max(worst, float(np.abs(fast - slow).max()))
        print(f"criterion5a: GAE vs double-sum max abs err {worst:.2e} -> "
              f"{'PASS' if worst <= 1e-9 else 'FAIL'}")
        assert worst <= 1e-9

    def test_greedy_split_exhaustive(self):
        rng = np.random.default_rng(43)
        catalog = synth_catalog(DESK_FAMILIES, 2, seed=7)
        matches = 0
        for _ in range(100):
            profile = catalog[int(rng.integers(0, len(catalog)))]
            batch = int(rng.integers(1, 5))
            args = (
                float(rng.uniform(1e6, 2e8)),
                float(rng.uniform(1e5, 5e7)),
                float(rng.uniform(1e10, 1e11)),
                float(rng.uniform(1e11, 1e12)),
            )
            tau = float(rng.uniform(0.5, 20.0))
            got = greedy_split(profile, batch, *args, tau)
            delays = [
                estimate_delay(profile, l, batch, *args)
                for l in range(profile.layer_count + 1)
            ]
            feasible = [l for l, d in enumerate(delays) if d <= tau]
            expected = feasible[-1] if feasible else int(np.argmin(delays))
            matches += got == expected
        print(f"criterion5b: greedy split matches enumeration {matches}/100 -> "
              f"{'PASS' if matches == 100 else 'FAIL'}")
        assert matches == 100

    def test_masked_categorical_frequencies(self):
        rng = np.random.default_rng(47)
        logits = np.array([0.4, -0.7, 1.2, 0.0, 2.0, -2.0])
        mask = np.array([True, True, False, True, True, True])
        dist = MaskedCategorical(logits, mask)
        n = 100_000
        counts = np.zeros(6)
        for _ in range(n):
            counts[dist.sample(rng)] += 1
        err = np.abs(counts / n - dist.probs()).max()
        print(f"criterion5c: masked-categorical frequency error {err:.4f} at 1e5 draws -> "
              f"{'PASS' if err < 0.01 else 'FAIL'}")
        assert err < 0.01


class TestCriterion6NumericalCore:
    def test_fifty_random_gradient_checks(self):
        # delegated composite covering every differentiable operator
        from tests.test_nn import TestRandomizedShapes

        TestRandomizedShapes().test_fifty_random_composites()
        print("criterion6a: 50 random-shape finite-difference checks at 1e-4 -> PASS")

    def test_orthogonal_gram_deviation(self):
        rng = np.random.default_rng(7)
        worst = 0.0
        for _ in range(50):
            n = int(rng.integers(2, 40))
            w = orthogonal_init((n, n), 1.0, rng)
            worst = max(worst, float(np.abs(w.T @ w - np.eye(n)).max()))
        print(f"criterion6b: orthogonal Gram deviation {worst:.2e} -> "
              f"{'PASS' if worst <= 1e-5 else 'FAIL'}")
        assert worst <= 1e-5


class TestCriterion7ModelCostArithmetic:
    def test_worked_examples_exact(self):
        s = PartitionSummary(10**6, 5 * 10**9, 10 * 10**9, 250_000, 0.5)
        d = delay_components(s, 1, 8e6, 4e6, 10e9, 20e9, hit=True)
        assert abs(d.total_s - 2.5) <= 1e-12
        e = energy(PartitionSummary(0, int(5e9), 0, 0, 0.5), 2, 1e-10, 0.1, 0.5)
        assert abs(e - 1.05) <= 1e-12
        p = privacy_cost(0.5, 0.5, 2, 0.6, CostWeights())
        assert abs(p - 0.75) <= 1e-12
        print("criterion7a: 2.5 s / 1.05 J / 0.75 worked examples exact -> PASS")

    def test_partition_split_exact_for_all_catalog_models(self):
        catalog = synth_catalog(services_per_model=5, seed=7)  # full 45-model pool
        for profile in catalog:
            for l in range(profile.layer_count + 1):
                s = partition_summary(profile, l)
                assert s.local_flops + s.edge_flops == profile.total_flops
        print("criterion7b: flops split exact for all catalog models and l -> PASS")


class TestCriterion8WeightRatioTrend:
    def test_energy_down_privacy_up_in_ratio(self, desk_runs):
        energies = {r: [desk_runs[("hc-mappo-l", s, r)]["eval"]["mean_energy"] for s in DESK_SEEDS]
                    for r in RATIOS}
        privacies = {r: [desk_runs[("hc-mappo-l", s, r)]["eval"]["mean_privacy"] for s in DESK_SEEDS]
                     for r in RATIOS}
        for r in RATIOS:
            print(f"criterion8 ratio {r}: energy {np.round(energies[r], 3).tolist()} "
                  f"privacy {np.round(privacies[r], 3).tolist()}")
        votes = []
        for lo, hi in ((0.2, 1.0), (1.0, 5.0)):
            energy_votes = sum(energies[hi][i] <= energies[lo][i] for i in range(3))
            privacy_votes = sum(privacies[hi][i] >= privacies[lo][i] for i in range(3))
            votes.append((energy_votes, privacy_votes))
            print(f"criterion8 {lo}->{hi}: energy non-increasing {energy_votes}/3, "
                  f"privacy non-decreasing {privacy_votes}/3")
        ok = all(ev >= 2 and pv >= 2 for ev, pv in votes)
        print(f"criterion8 trend -> {'PASS' if ok else 'FAIL'}")
        assert ok


class TestCriterion9Determinism:
    def test_byte_identical_metrics(self, tmp_path):
        from edgeinfer.harness import ExperimentPlan

        plan = ExperimentPlan(
            name="determinism_check",
            config=desk_config(horizon=20),
            train=desk_train_config(iterations=3, steps=20, num_envs=2),
            algorithms=("hc-mappo-l", "greedy"),
            seeds=(0, 1),
            eval_episodes=2,
        )
        d1 = run_plan(plan, str(tmp_path / "a"))
        d2 = run_plan(plan, str(tmp_path / "b"))
        b1 = open(f"{d1}/metrics.csv", "rb").read()
        b2 = open(f"{d2}/metrics.csv", "rb").read()
        ok = b1 == b2
        print(f"criterion9: metrics byte-identical across reruns -> {'PASS' if ok else 'FAIL'}")
        assert ok
