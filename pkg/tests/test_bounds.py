import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from metarep.bounds import (THEOREMS, advantage_expectation_gap, compute_report, divergence_terms, lift_pair,
                            make_pair, performance_difference, r_robustness, random_instance, run_campaign,
                            sup_constants, surrogate, training_and_generalization_returns, verify_corollary,
                            verify_theorem1, verify_theorem2, verify_theorem3, verify_theorem4, verify_theorem5,
                            visitation_shift)
from metarep.mdp import TabularMdp, discounted_return, random_mdp, solve_values, tv_distance, visitation
from metarep.policy import ObservationPolicy, init_policy
from metarep.rendering import RenderingFamily, RenderingFunction, lift_all, make_family
from metarep.seeding import make_rng

seeds = st.integers(0, 2**31)


def instance_pair(seed, **sizes):
    mdp, family, pi, pi_tilde = random_instance(seed, **sizes)
    return mdp, family, lift_pair(pi, pi_tilde, family, mdp)


def same_pair(mdp, family, pi):
    lifted = lift_all(pi, family)
    return make_pair(mdp, lifted, lifted)


def zero_reward(mdp):
    return TabularMdp(np.zeros_like(mdp.reward), mdp.transition, mdp.rho, mdp.gamma)


def constant_policy(obs_dim, n_actions, seed=0):
    pi = ObservationPolicy("linear-softmax", obs_dim, n_actions)
    pi.block("pi_b")[:] = make_rng(seed).standard_normal(n_actions)
    return pi


class TestReturns:
    def test_single_split_gives_eta_equal_zeta(self):
        mdp = random_mdp(4, 2, 1)
        family = make_family(mdp, "affine", 3, 3, 3, seed=2)
        r = training_and_generalization_returns(same_pair(mdp, family, init_policy("one-hidden-mlp", 3, 2, seed=1)), family)
        assert r["eta_pi"] == r["zeta_pi"]

    def test_single_function_is_per_f_return(self):
        mdp = random_mdp(4, 2, 1)
        family = make_family(mdp, "affine", 1, 1, 3, seed=2)
        pi = init_policy("one-hidden-mlp", 3, 2, seed=1, std=1.0)
        r = training_and_generalization_returns(same_pair(mdp, family, pi), family)
        direct = discounted_return(mdp, lift_all(pi, family)[0])
        assert r["eta_pi"] == pytest.approx(direct, rel=1e-12)
        assert r["zeta_pi"] == pytest.approx(direct, rel=1e-12)

    def test_weighted_average_of_per_function_returns(self):
        mdp = random_mdp(5, 3, 4)
        family = make_family(mdp, "distractor", 4, 2, 7, seed=1, weights=[0.1, 0.2, 0.3, 0.4])
        pi = init_policy("one-hidden-mlp", 7, 3, seed=2, std=1.0)
        per_f = [mdp.rho @ solve_values(mdp, mu).v for mu in lift_all(pi, family)]
        r = training_and_generalization_returns(same_pair(mdp, family, pi), family)
        assert r["eta_pi"] == pytest.approx((0.1 * per_f[0] + 0.2 * per_f[1]) / 0.3, rel=1e-10)
        assert r["zeta_pi"] == pytest.approx(np.dot([0.1, 0.2, 0.3, 0.4], per_f), rel=1e-10)


class TestLemmaIdentities:
    @settings(max_examples=100, deadline=None)
    @given(seeds)
    def test_performance_difference_both_splits(self, seed):
        mdp, family, pair = instance_pair(seed)
        r = training_and_generalization_returns(pair, family)
        scale = max(1.0, abs(r["eta_pi"]))
        assert abs(r["eta_pi_tilde"] - r["eta_pi"] - performance_difference(pair, family, "train")) < 1e-9 * scale
        assert abs(r["zeta_pi_tilde"] - r["zeta_pi"] - performance_difference(pair, family, "all")) < 1e-9 * scale

    @settings(max_examples=100, deadline=None)
    @given(seeds)
    def test_visitation_shift_bound(self, seed):
        _, _, pair = instance_pair(seed)
        lhs, rhs = visitation_shift(pair)
        assert np.all(lhs <= rhs + 1e-9)

    @settings(max_examples=100, deadline=None)
    @given(seeds)
    def test_advantage_expectation_bound(self, seed):
        _, _, pair = instance_pair(seed)
        lhs, rhs = advantage_expectation_gap(pair)
        assert np.all(lhs <= rhs + 1e-9)

    @settings(max_examples=50, deadline=None)
    @given(seeds)
    def test_own_advantage_expectation_vanishes(self, seed):
        _, _, pair = instance_pair(seed)
        assert np.max(np.abs(np.sum(pair.mu * pair.adv, axis=-1))) < 1e-10

    def test_visitation_shift_by_direct_solve(self):
        mdp = random_mdp(4, 3, 8)
        rng = make_rng(2)
        mu, mt = rng.dirichlet(np.ones(3), size=(2, 4))
        pair = make_pair(mdp, mu[None], mt[None])
        lhs, _ = visitation_shift(pair)
        assert lhs[0] == pytest.approx(np.abs(visitation(mdp, mt) - visitation(mdp, mu)).sum(), abs=1e-14)


class TestSurrogate:
    def test_identical_policies(self):
        mdp, family, pi, _ = random_instance(3)
        pair = lift_pair(pi, pi, family, mdp)
        r = training_and_generalization_returns(pair, family)
        assert surrogate(pair, family) == pytest.approx(r["eta_pi"], rel=1e-10, abs=1e-12)

    def test_single_training_function_formula(self):
        mdp = random_mdp(5, 3, 6)
        family = make_family(mdp, "affine", 3, 1, 4, seed=3)
        pi = init_policy("one-hidden-mlp", 4, 3, seed=1, std=1.0)
        pt = init_policy("one-hidden-mlp", 4, 3, seed=2, std=1.0)
        mu, mt = lift_all(pi, family)[0], lift_all(pt, family)[0]
        sol = solve_values(mdp, mu)
        d = visitation(mdp, mu)
        expected = mdp.rho @ sol.v + sum(
            d[s] * sum(mt[s, a] * sol.adv[s, a] for a in range(3)) for s in range(5)) / (1 - mdp.gamma)
        assert surrogate(lift_pair(pi, pt, family, mdp), family) == pytest.approx(expected, rel=1e-10)

    @settings(max_examples=50, deadline=None)
    @given(seeds)
    def test_gap_within_theorem1_term(self, seed):
        mdp, family, pair = instance_pair(seed)
        r = training_and_generalization_returns(pair, family)
        sup, div = sup_constants(pair, family), divergence_terms(pair, family)
        g = mdp.gamma
        gap = 2 * g * sup["eps_train"] / (1 - g) ** 2 * div["D_train"]
        assert r["eta_pi_tilde"] - surrogate(pair, family) >= -gap - 1e-9 * max(1, abs(r["eta_pi_tilde"]))


class TestSupConstants:
    def test_identical_policies(self):
        mdp, family, pi, _ = random_instance(5)
        sup = sup_constants(lift_pair(pi, pi, family, mdp), family)
        assert sup["eps_train"] < 1e-10
        assert sup["sigma_train"] == 0.0 and sup["sigma_eval"] == 0.0

    def test_zero_reward(self):
        mdp, family, pi, pt = random_instance(6)
        sup = sup_constants(lift_pair(pi, pt, family, zero_reward(mdp)), family)
        assert sup["eps_train"] == 0.0 and sup["delta_train"] == 0.0 and sup["delta_eval"] == 0.0

    @settings(max_examples=30, deadline=None)
    @given(seeds)
    def test_reenumeration_action_major(self, seed):
        mdp, family, pair = instance_pair(seed)
        sup = sup_constants(pair, family)
        n_f, n_s, n_a = pair.mu.shape
        best = {k: 0.0 for k in sup}
        for f in range(n_f):
            split = "train" if family.train_mask[f] else "eval"
            e = np.zeros(n_s)
            for a in range(n_a):
                for s in range(n_s):
                    e[s] += pair.mu_tilde[f, s, a] * pair.adv[f, s, a]
                    key = f"delta_{split}"
                    best[key] = max(best[key], abs(pair.adv[f, s, a]))
            for s in range(n_s):
                if split == "train":
                    best["eps_train"] = max(best["eps_train"], abs(e[s]))
                tv = tv_distance(pair.mu_tilde[f, s], pair.mu[f, s])
                best[f"sigma_{split}"] = max(best[f"sigma_{split}"], tv)
        for k in sup:
            assert sup[k] == pytest.approx(best[k], rel=1e-12, abs=1e-14)


class TestDivergences:
    def test_identical_policies(self):
        mdp, family, pi, _ = random_instance(7)
        div = divergence_terms(lift_pair(pi, pi, family, mdp), family)
        assert all(v == 0.0 for v in div.values())

    def test_empty_eval_split(self):
        mdp = random_mdp(4, 2, 0)
        family = make_family(mdp, "affine", 3, 3, 3, seed=0)
        pi, pt = (init_policy("one-hidden-mlp", 3, 2, seed=s, std=1.0) for s in (1, 2))
        div = divergence_terms(lift_pair(pi, pt, family, mdp), family)
        assert div["D_2"] == 0.0 and div["D_eval"] == 0.0
        assert div["D_train"] > 0

    def test_d_train_monte_carlo(self):
        mdp = random_mdp(6, 3, 12)
        family = make_family(mdp, "distractor", 5, 3, 8, seed=4, weights=[0.3, 0.2, 0.1, 0.25, 0.15])
        pi, pt = (init_policy("one-hidden-mlp", 8, 3, seed=s, std=1.0) for s in (3, 4))
        pair = lift_pair(pi, pt, family, mdp)
        rng = make_rng(99)
        n = 100_000
        f = rng.choice(len(family), size=n, p=family.split_weights("train"))
        u = rng.random(n)
        cdf = np.cumsum(pair.d_mu, axis=1)
        s = np.minimum(np.sum(cdf[f] < u[:, None], axis=1), mdp.n_states - 1)
        samples = pair.tv[f, s]
        se = samples.std(ddof=1) / math.sqrt(n)
        assert abs(samples.mean() - divergence_terms(pair, family)["D_train"]) < 3 * se


class TestRobustness:
    def test_single_function(self):
        mdp = random_mdp(3, 2, 0)
        family = make_family(mdp, "affine", 1, 1, 3, seed=0)
        assert r_robustness((init_policy("one-hidden-mlp", 3, 2, seed=1, std=1.0), family)) == 0.0

    def test_observation_independent(self):
        mdp = random_mdp(4, 3, 0)
        family = make_family(mdp, "affine", 5, 2, 3, seed=0)
        assert r_robustness((constant_policy(3, 3), family)) == 0.0

    def test_hand_instance(self):
        e = np.eye(3)
        f1 = RenderingFunction("custom", 0, 3, e[[0, 1]])
        f2 = RenderingFunction("custom", 1, 3, e[[2, 0]])
        family = RenderingFamily([f1, f2], [0.5, 0.5], [True, False])
        table = np.array([[0.9, 0.1], [0.3, 0.7], [0.5, 0.5]])
        pi = ObservationPolicy("linear-softmax", 3, 2)
        pi.block("pi_w")[:] = np.log(table).T
        lifted = lift_all(pi, family)
        enumerated = [tv_distance(lifted[i, s], lifted[j, s]) for s in range(2) for i, j in ((0, 1), (1, 0))]
        assert len(enumerated) == 4
        assert r_robustness(lifted) == max(enumerated)
        assert r_robustness(lifted) == pytest.approx(0.6, abs=1e-12)


class TestTheorems:
    def test_theorem1_equality_for_identical_policies(self):
        mdp, family, pi, _ = random_instance(11)
        pair = lift_pair(pi, pi, family, mdp)
        lhs, rhs, holds = verify_theorem1(pair, family)
        eta = training_and_generalization_returns(pair, family)["eta_pi"]
        assert holds and lhs == pytest.approx(eta) and rhs == pytest.approx(eta, rel=1e-10)

    def test_zero_reward_everything_zero(self):
        mdp, family, pi, pt = random_instance(12)
        pair = lift_pair(pi, pt, family, zero_reward(mdp))
        lhs, rhs, holds = verify_theorem1(pair, family)
        assert (lhs, rhs, holds) == (0.0, 0.0, True)

    def test_theorem2_reduces_to_theorem1_when_z_is_one(self):
        mdp = random_mdp(5, 3, 2)
        family = make_family(mdp, "affine", 4, 4, 3, seed=1)
        pi, pt = (init_policy("one-hidden-mlp", 3, 3, seed=s, std=1.0) for s in (5, 6))
        pair = lift_pair(pi, pt, family, mdp)
        assert verify_theorem2(pair, family) == verify_theorem1(pair, family)

    def test_theorem2_identical_policies_closed_form(self):
        mdp = random_mdp(4, 2, 3)
        family = make_family(mdp, "affine", 2, 1, 3, seed=4)
        pi = init_policy("one-hidden-mlp", 3, 2, seed=1, std=2.0)
        pair = lift_pair(pi, pi, family, mdp)
        r = training_and_generalization_returns(pair, family)
        lhs, rhs, holds = verify_theorem2(pair, family)
        direct = r["eta_pi"] - 2 * mdp.r_max * 0.5 / (1 - mdp.gamma)
        assert holds and lhs >= direct
        assert rhs == pytest.approx(direct, rel=1e-9)

    def test_theorem3_identical_policies(self):
        mdp, family, pi, _ = random_instance(13)
        assert verify_theorem3(lift_pair(pi, pi, family, mdp), family) == (0.0, 0.0, True)

    def test_theorem3_factor_at_least_one_when_renderings_agree(self):
        mdp = random_mdp(4, 3, 0)
        family = make_family(mdp, "affine", 3, 2, 3, seed=0)
        pi, pt = constant_policy(3, 3, 1), constant_policy(3, 3, 2)
        pair = lift_pair(pi, pt, family, mdp)
        lhs, rhs, holds = verify_theorem3(pair, family)
        assert holds and rhs >= divergence_terms(pair, family)["D_train"]

    def test_theorem5_observation_independent(self):
        mdp = random_mdp(4, 3, 0)
        family = make_family(mdp, "affine", 3, 2, 3, seed=0)
        pi = constant_policy(3, 3, 1)
        lhs, rhs, holds = verify_theorem5(lift_pair(pi, pi, family, mdp), family)
        assert (lhs, rhs, holds) == (0.0, 0.0, True)

    def test_theorem5_no_eval_functions(self):
        mdp = random_mdp(4, 3, 0)
        family = make_family(mdp, "affine", 3, 3, 3, seed=0)
        pi, pt = (init_policy("one-hidden-mlp", 3, 3, seed=s, std=1.0) for s in (1, 2))
        lhs, rhs, holds = verify_theorem5(lift_pair(pi, pt, family, mdp), family)
        assert lhs == 0.0 and rhs >= 0 and holds

    def test_theorem4_holds_on_eval_split(self):
        mdp, family, pair = instance_pair(14, n_functions=6, n_train=3)
        assert verify_theorem4(pair, family)[2]

    def test_corollary_equality_for_identical_policies_and_full_split(self):
        mdp = random_mdp(4, 2, 0)
        family = make_family(mdp, "affine", 3, 3, 3, seed=0)
        pi = init_policy("one-hidden-mlp", 3, 2, seed=1, std=1.0)
        lhs, rhs, holds, consts = verify_corollary(lift_pair(pi, pi, family, mdp), family)
        assert holds and lhs == pytest.approx(rhs, rel=1e-10)
        assert consts["C"] == 0.0

    @settings(max_examples=100, deadline=None)
    @given(seeds)
    def test_all_hold_and_corollary_is_loosest(self, seed):
        mdp, family, pair = instance_pair(seed)
        report = compute_report(pair, family, mdp)
        assert report.all_hold, report
        tol = 1e-9 * max(1.0, abs(report.rhs_thm2))
        assert report.rhs_corollary <= report.rhs_thm2 + tol
        assert report.rhs_thm2 <= report.lhs_thm2 + tol

    def test_report_slack_sign_convention(self):
        mdp, family, pair = instance_pair(15)
        report = compute_report(pair, family, mdp)
        assert report.slack("thm1") == report.lhs_thm1 - report.rhs_thm1
        assert report.slack("thm3") == report.rhs_thm3 - report.lhs_thm3


class TestCampaign:
    def test_small_campaign_all_pass(self):
        reports, summary = run_campaign(150, seed=4)
        assert summary["instances"] == 150 and summary["failures"] == 0
        assert set(summary["min_slack_per_theorem"]) == set(THEOREMS)
        for t in THEOREMS:
            assert summary["min_slack_per_theorem"][t] == min(r.slack(t) for r in reports)

    def test_failure_callback(self, monkeypatch):
        import metarep.bounds as b
        original = b.compute_report

        def broken(pair, family, mdp=None):
            report = original(pair, family, mdp)
            report.holds_thm3 = False
            return report

        monkeypatch.setattr(b, "compute_report", broken)
        seen = []
        _, summary = b.run_campaign(3, seed=0, on_failure=lambda i, inst, rep: seen.append(i))
        assert summary["failures"] == 3 and seen == [0, 1, 2]

    def test_instance_sizes_respected(self):
        for seed in range(30):
            mdp, family, pi, pt = random_instance(seed)
            assert mdp.n_states <= 8 and mdp.n_actions <= 4 and len(family) <= 8
        mdp, family, _, _ = random_instance(0, n_states=6, n_actions=3, n_functions=8, n_train=4)
        assert (mdp.n_states, mdp.n_actions, len(family), int(family.train_mask.sum())) == (6, 3, 8, 4)

    def test_instances_deterministic(self):
        a, b = random_instance(77), random_instance(77)
        assert a[0].to_json() == b[0].to_json()
        np.testing.assert_array_equal(a[2].params, b[2].params)
