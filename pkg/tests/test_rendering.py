import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from metarep.bounds import make_pair, training_and_generalization_returns
from metarep.mdp import TabularMdp, random_mdp
from metarep.policy import ObservationPolicy, init_policy
from metarep.rendering import (FAMILY_IDS, EmptySplitError, RenderingFamily, RenderingFunction,
                               coin_gridworld, coin_optimal_values, family_from_dict, generate_episode,
                               invert_observation, lift_all, lift_policy, make_family, min_pairwise_linf,
                               rollout_returns, sample_functions)
from metarep.rendering import RIGHT


def uniform_policy(obs_dim, n_actions):
    return ObservationPolicy("linear-softmax", obs_dim, n_actions)


def eta_zeta(pi, family, mdp):
    lifted = lift_all(pi, family)
    return training_and_generalization_returns(make_pair(mdp, lifted, lifted), family)


class TestMakeFamily:
    def test_single_function_split(self):
        fam = make_family(random_mdp(3, 2, 0), "permute-onehot", 1, 1, 3, seed=0)
        assert fam.Z == 1.0
        assert not fam.eval_mask.any()
        np.testing.assert_array_equal(fam.split_weights("eval"), [0.0])

    def test_uniform_half_split(self):
        fam = make_family(random_mdp(3, 2, 0), "affine", 10, 5, 4, seed=0)
        assert fam.Z == pytest.approx(0.5)
        np.testing.assert_allclose(fam.split_weights("train")[:5], 0.2)

    def test_affine_is_injective(self):
        fam = make_family(random_mdp(5, 2, 0), "affine", 6, 3, 8, seed=4)
        for f in fam.members:
            t = f.obs_table
            dist = np.max(np.abs(t[:, None] - t[None]), axis=-1)
            assert np.all(dist[~np.eye(5, dtype=bool)] > 1e-9)

    @pytest.mark.parametrize("family_id", ["permute-onehot", "affine", "distractor"])
    def test_deterministic_and_round_trips(self, family_id):
        mdp = random_mdp(4, 2, 3)
        fam = make_family(mdp, family_id, 5, 2, 6, seed=9)
        again = make_family(mdp, family_id, 5, 2, 6, seed=9)
        back = family_from_dict(json.loads(fam.to_json()))
        for a, b, c in zip(fam.members, again.members, back.members):
            np.testing.assert_array_equal(a.obs_table, b.obs_table)
            np.testing.assert_array_equal(a.obs_table, c.obs_table)
        np.testing.assert_array_equal(back.train_mask, fam.train_mask)

    def test_coin_family_round_trip(self):
        mdp, sem = coin_gridworld(4, 1, 4)
        fam = make_family(mdp, "distractor-correlated", 6, 3, sem.feature_dim + 2, seed=1, semantics=sem)
        back = family_from_dict(json.loads(fam.to_json()))
        np.testing.assert_array_equal(back.tables(), fam.tables())

    def test_weights_validated(self):
        f = RenderingFunction("custom", 0, 1, [[0.0], [1.0]])
        with pytest.raises(ValueError, match="weights"):
            RenderingFamily([f, f], [0.7, 0.7], [True, False])
        with pytest.raises(ValueError, match="training split"):
            RenderingFamily([f], [1.0], [False])

    def test_bad_arguments(self):
        mdp = random_mdp(4, 2, 0)
        with pytest.raises(ValueError):
            make_family(mdp, "permute-onehot", 3, 0, 4, seed=0)
        with pytest.raises(ValueError, match="obs_dim"):
            make_family(mdp, "permute-onehot", 3, 1, 3, seed=0)
        with pytest.raises(ValueError, match="unknown"):
            make_family(mdp, "pixels", 3, 1, 4, seed=0)
        with pytest.raises(ValueError, match="semantics"):
            make_family(mdp, "distractor-correlated", 3, 1, 6, seed=0)

    @settings(max_examples=40, deadline=None)
    @given(st.sampled_from(FAMILY_IDS[:3]), st.integers(1, 8), st.integers(0, 10_000))
    def test_members_are_bijective_onto_their_image(self, family_id, n_states, seed):
        obs_dim = n_states + 1 if family_id != "affine" else max(2, n_states)
        fam = make_family(random_mdp(n_states, 2, seed), family_id, 3, 2, obs_dim, seed=seed)
        for f in fam.members:
            assert min_pairwise_linf(f.obs_table) > 1e-9
            for s in range(n_states):
                assert invert_observation(f, f(s)) == s


class TestCorrelatedSplit:
    def setup_method(self):
        self.mdp, self.sem = coin_gridworld(5, 1, 4)
        self.fam = make_family(self.mdp, "distractor-correlated", 8, 4, self.sem.feature_dim + 2,
                               seed=2, semantics=self.sem)

    def test_background_predicts_coin_side_on_train(self):
        c = self.sem.feature_dim
        live = self.sem.side != 0
        for f in np.array(self.fam.members)[self.fam.train_mask]:
            bg = f.obs_table[live, c:]
            right = self.sem.side[live] > 0
            assert len({tuple(r) for r in bg[right]}) == 1
            assert len({tuple(r) for r in bg[~right]}) == 1
            assert not np.array_equal(bg[right][0], bg[~right][0])

    def test_background_is_constant_on_eval(self):
        c = self.sem.feature_dim
        for f in np.array(self.fam.members)[self.fam.eval_mask]:
            assert len({tuple(r) for r in f.obs_table[:, c:]}) == 1

    def test_task_features_shared(self):
        c = self.sem.feature_dim
        for f in self.fam.members:
            np.testing.assert_array_equal(f.obs_table[:, :c], self.sem.state_features)


class TestLifting:
    def test_uniform_policy_lifts_to_uniform(self):
        fam = make_family(random_mdp(4, 3, 0), "affine", 3, 2, 5, seed=1)
        np.testing.assert_allclose(lift_all(uniform_policy(5, 3), fam), 1 / 3)

    def test_identical_tables_identical_lifts(self):
        table = np.random.default_rng(0).standard_normal((4, 3))
        f, g = RenderingFunction("x", 0, 3, table), RenderingFunction("y", 1, 3, table.copy())
        pi = init_policy("one-hidden-mlp", 3, 2, seed=3, std=1.0)
        np.testing.assert_array_equal(lift_policy(pi, f), lift_policy(pi, g))

    def test_tabular_lookup_on_permuted_onehots(self):
        n, a, dim = 5, 3, 7
        fam = make_family(random_mdp(n, a, 0), "permute-onehot", 4, 2, dim, seed=5)
        rng = np.random.default_rng(1)
        table = rng.dirichlet(np.ones(a), size=dim)
        pi = ObservationPolicy("linear-softmax", dim, a)
        pi.block("pi_w")[:] = np.log(table).T
        for f in fam.members:
            mu = lift_policy(pi, f)
            for s in range(n):
                slot = int(np.argmax(f(s)))
                np.testing.assert_allclose(mu[s], table[slot], atol=1e-12)

    def test_dimension_mismatch(self):
        fam = make_family(random_mdp(3, 2, 0), "permute-onehot", 2, 1, 3, seed=0)
        with pytest.raises(ValueError, match="obs_dim"):
            lift_policy(uniform_policy(4, 2), fam.members[0])

    def test_invert_unknown_observation(self):
        f = RenderingFunction("x", 0, 2, np.eye(2))
        with pytest.raises(KeyError):
            invert_observation(f, np.array([0.5, 0.5]))


class TestGenerateEpisode:
    def test_forced_single_step(self):
        mdp, sem = coin_gridworld(2, 1, 2)
        fam = make_family(mdp, "permute-onehot", 1, 1, mdp.n_states, seed=0)
        pi = ObservationPolicy("linear-softmax", mdp.n_states, 4)
        pi.block("pi_b")[:] = [-50.0, 50.0, -50.0, -50.0]
        (step,) = generate_episode(mdp, fam, pi, 1, seed=0)
        assert step.action == RIGHT
        s = step.underlying_state
        assert sem.agent_cell[s] == 0 and sem.coin_cell[s] == 1
        assert step.reward == 1.0
        np.testing.assert_array_equal(step.obs, fam.members[0](s))

    def test_reward_free_mdp(self):
        base = random_mdp(4, 2, 0)
        mdp = TabularMdp(np.zeros((4, 2)), base.transition, base.rho, 0.9)
        fam = make_family(mdp, "affine", 3, 2, 4, seed=0)
        steps = generate_episode(mdp, fam, uniform_policy(4, 2), 30, seed=1)
        assert len(steps) == 30 and all(st.reward == 0.0 for st in steps)

    def test_observation_is_render_of_state(self):
        mdp = random_mdp(5, 3, 2)
        fam = make_family(mdp, "affine", 4, 2, 4, seed=3)
        for step in generate_episode(mdp, fam, uniform_policy(4, 3), 20, seed=4):
            assert fam.train_mask[step.f_index]
            np.testing.assert_array_equal(step.obs, fam.members[step.f_index](step.underlying_state))

    def test_eval_split_draws_eval_members(self):
        mdp = random_mdp(3, 2, 0)
        fam = make_family(mdp, "affine", 4, 1, 3, seed=0)
        steps = generate_episode(mdp, fam, uniform_policy(3, 2), 5, seed=9, split="eval")
        assert not fam.train_mask[steps[0].f_index]

    def test_empty_split(self):
        mdp = random_mdp(3, 2, 0)
        fam = make_family(mdp, "affine", 2, 2, 3, seed=0)
        with pytest.raises(EmptySplitError):
            generate_episode(mdp, fam, uniform_policy(3, 2), 5, seed=0, split="eval")

    def test_deterministic(self):
        mdp = random_mdp(4, 2, 0)
        fam = make_family(mdp, "affine", 3, 2, 3, seed=0)
        pi = init_policy("one-hidden-mlp", 3, 2, seed=1, std=1.0)
        a = generate_episode(mdp, fam, pi, 25, seed=5)
        b = generate_episode(mdp, fam, pi, 25, seed=5)
        assert [(s.action, s.underlying_state, s.f_index) for s in a] == \
               [(s.action, s.underlying_state, s.f_index) for s in b]

    def test_bad_horizon(self):
        mdp = random_mdp(2, 2, 0)
        fam = make_family(mdp, "affine", 1, 1, 2, seed=0)
        with pytest.raises(ValueError):
            generate_episode(mdp, fam, uniform_policy(2, 2), 0, seed=0)

    def test_mean_return_matches_exact_eta(self):
        mdp = random_mdp(5, 3, 13)
        fam = make_family(mdp, "distractor", 4, 2, 7, seed=2)
        pi = init_policy("one-hidden-mlp", 7, 3, seed=4, std=1.0)
        exact = eta_zeta(pi, fam, mdp)
        for split, key in (("train", "eta_pi"), ("all", "zeta_pi")):
            r = rollout_returns(mdp, fam, pi, 100_000, seed=7, split=split)
            se = r.std(ddof=1) / math.sqrt(len(r))
            assert abs(r.mean() - exact[key]) < 3 * se


class TestSampleFunctions:
    def test_frequencies_follow_weights(self):
        mdp = random_mdp(3, 2, 0)
        fam = make_family(mdp, "affine", 5, 3, 3, seed=0, weights=[0.1, 0.2, 0.3, 0.15, 0.25])
        n = 60_000
        for split in ("train", "eval", "all"):
            w = fam.split_weights(split)
            idx = sample_functions(fam, split, n, seed=11)
            counts = np.bincount(idx, minlength=5)
            support = w > 0
            assert counts[~support].sum() == 0
            _, p = stats.chisquare(counts[support], n * w[support])
            assert p > 1e-3


class TestCoinGridworld:
    def test_pickup_pays_one(self):
        mdp, sem = coin_gridworld(2, 1)
        s = int(np.nonzero((sem.agent_cell == 0) & (sem.coin_cell == 1))[0][0])
        assert mdp.reward[s, RIGHT] == 1.0
        np.testing.assert_allclose(mdp.transition[s, RIGHT], mdp.rho)

    def test_reset_states_have_no_reward_loop(self):
        mdp, sem = coin_gridworld(3, 2)
        reset = sem.agent_cell == sem.coin_cell
        assert np.all(mdp.rho[reset] == 0)
        assert np.all(mdp.reward[reset] == 0)
        for s in np.nonzero(reset)[0]:
            np.testing.assert_allclose(mdp.transition[s], np.broadcast_to(mdp.rho, (4, mdp.n_states)))

    def test_rewards_bounded(self):
        mdp, _ = coin_gridworld(3, 3)
        assert mdp.r_max == 1.0

    @pytest.mark.parametrize("shape", [(2, 1), (5, 1), (3, 2), (3, 3)])
    def test_value_iteration_matches_shortest_path_closed_form(self, shape):
        mdp, sem = coin_gridworld(*shape, gamma=0.95)
        v = np.zeros(mdp.n_states)
        for _ in range(3000):
            v_new = np.max(mdp.reward + mdp.gamma * mdp.transition @ v, axis=1)
            if np.max(np.abs(v_new - v)) < 1e-13:
                break
            v = v_new
        np.testing.assert_allclose(coin_optimal_values(mdp, sem), v_new, atol=1e-9)

    def test_too_small(self):
        with pytest.raises(ValueError):
            coin_gridworld(1, 1)
