from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import rare_branch_instance, garnet_instance, random_policy, single_state_mdp, supported_random_policy
from sapp.data import OfflineDataset, build_empirical_model, generate_dataset, sample_occupancy_dataset
from sapp.envs import build_garnet
from sapp.mdp import PolicyTable, exact_policy_values, iterative_policy_values, optimal_policy
from sapp.pessimism import (
    DisSpec,
    FTransform,
    PessimismSpec,
    PolicyClass,
    cql_action_penalty,
    dis_gradient,
    dis_vector,
    empirical_occupancy,
    objective_and_gradient,
    optimize_policy,
    penalty_vector,
    proximal_eval,
    raw_state_ratios,
    sa_proximal_eval,
    state_aware_weights,
)

KINDS = ("CQL", "TV", "KL")
seeds = st.integers(0, 10_000)


def _one_state_model(actions, rewards=None, discount=0.5):
    n = len(actions)
    r = rewards if rewards is not None else [1.0] * n
    data = OfflineDataset(s=[0] * n, a=actions, r=r, s_next=[0] * n, is_initial=[True] + [False] * (n - 1))
    return build_empirical_model(data, 1, 2, discount)


class TestDistances:
    def test_cql_deterministic_vs_uniform(self):
        d = dis_vector(DisSpec("CQL"), [[1.0, 0.0]], [[0.5, 0.5]], [True, True])
        assert d.tolist() == [1.0]

    def test_tv_and_kl_examples(self):
        beta, supp = [[0.5, 0.5]], [True, True]
        assert dis_vector(DisSpec("TV"), [[1.0, 0.0]], beta, supp).tolist() == [0.5]
        np.testing.assert_allclose(dis_vector(DisSpec("KL"), [[1.0, 0.0]], beta, supp), [np.log(2)])

    @pytest.mark.parametrize("kind", KINDS)
    def test_zero_at_behavior(self, kind):
        beta = np.array([[0.3, 0.7], [0.5, 0.5]])
        assert np.all(dis_vector(DisSpec(kind), beta, beta, np.ones(4, bool)) <= 1e-12)

    @pytest.mark.parametrize("kind", KINDS)
    def test_unsupported_mass_costs_penalty(self, kind):
        d = dis_vector(DisSpec(kind, 100.0), [[0.0, 1.0]], [[1.0, 0.0]], [True, False])
        # the CQL core alone is -1 when all mass sits off-support
        assert d[0] >= 99.0

    @given(seeds, st.sampled_from(KINDS))
    @settings(max_examples=60, deadline=None)
    def test_nonnegative_and_zero_only_at_behavior(self, seed, kind):
        rng = np.random.default_rng(seed)
        beta = rng.dirichlet(np.ones(3), size=4)
        pi = rng.dirichlet(np.ones(3), size=4)
        d = dis_vector(DisSpec(kind), pi, beta, np.ones(12, bool))
        assert np.all(d >= 0)
        far = np.abs(pi - beta).sum(axis=1) > 1e-3
        assert np.all(d[far] > 0)

    @given(seeds, st.sampled_from(KINDS))
    @settings(max_examples=40, deadline=None)
    def test_gradient_matches_finite_differences(self, seed, kind):
        rng = np.random.default_rng(seed)
        beta = rng.dirichlet(np.ones(3), size=2)
        supp = np.array([[True, True, False], [True, False, True]])
        beta = np.where(supp, beta, 0) / np.where(supp, beta, 0).sum(axis=1, keepdims=True)
        pi = rng.dirichlet(np.ones(3), size=2) * 0.9 + 0.03
        spec = DisSpec(kind, 7.0)
        g = dis_gradient(spec, pi, beta, supp.ravel())
        h = 1e-6
        for s in range(2):
            for a in range(3):
                e = np.zeros_like(pi)
                e[s, a] = h
                if kind == "TV" and supp[s, a] and abs(pi[s, a] - beta[s, a]) < 2 * h:
                    continue
                fd = (dis_vector(spec, pi + e, beta, supp.ravel())[s]
                      - dis_vector(spec, pi - e, beta, supp.ravel())[s]) / (2 * h)
                assert abs(fd - g[s, a]) < 1e-5

    @given(seeds)
    @settings(max_examples=40, deadline=None)
    def test_action_penalty_averages_to_cql(self, seed):
        rng = np.random.default_rng(seed)
        beta = rng.dirichlet(np.ones(3), size=3)
        supp = rng.random((3, 3)) < 0.7
        supp[:, 0] = True
        beta = np.where(supp, beta, 0)
        beta /= beta.sum(axis=1, keepdims=True)
        pi = rng.dirichlet(np.ones(3), size=3)
        pen = cql_action_penalty(pi, beta, supp.ravel(), 50.0)
        np.testing.assert_allclose((pi * pen).sum(axis=1),
                                   dis_vector(DisSpec("CQL", 50.0), pi, beta, supp.ravel()), atol=1e-9)


class TestFTransform:
    def test_normalized_log_range(self):
        f = FTransform("normalized_log", 0.5, 5.0)
        out = f([0.1, 1.0, 10.0])
        np.testing.assert_allclose(out, [0.5, 2.75, 5.0])

    def test_zero_and_constant_inputs(self):
        f = FTransform("normalized_log", 0.5, 5.0)
        assert f([0.0, 2.0, 4.0])[0] == 0.5
        np.testing.assert_allclose(f([3.0, 3.0]), [2.75, 2.75])

    @given(st.lists(st.floats(1e-6, 1e6), min_size=2, max_size=8), st.integers(-20, 20))
    def test_power_of_two_rescaling_is_exact(self, xs, k):
        f = FTransform("normalized_log", 0.5, 5.0)
        x = np.array(xs)
        assert np.array_equal(f(x), f(x * 2.0**k))

    @given(st.lists(st.floats(1e-6, 1e6), min_size=2, max_size=8), st.floats(1e-3, 1e3))
    def test_arbitrary_rescaling_to_rounding(self, xs, c):
        f = FTransform("normalized_log", 0.5, 5.0)
        x = np.array(xs)
        assert np.max(np.abs(f(x) - f(c * x))) <= 1e-9

    def test_clip(self):
        assert FTransform("clip", clip_max=2.0)([1.0, 3.0]).tolist() == [1.0, 2.0]

    @pytest.mark.parametrize("f", [FTransform(), FTransform("clip", clip_max=1.5),
                                   FTransform("normalized_log", 0.5, 5.0)])
    def test_jacobian_matches_finite_differences(self, f):
        x = np.array([0.3, 1.1, 2.0, 0.7])
        J = f.jacobian(x)
        h = 1e-7
        for t in range(4):
            e = np.zeros(4)
            e[t] = h
            np.testing.assert_allclose((f(x + e) - f(x - e)) / (2 * h), J[:, t], atol=1e-6)

    def test_sqrt_floor(self):
        assert FTransform().satisfies_sqrt_floor([1.0, 4.0])
        assert not FTransform().satisfies_sqrt_floor([0.25])

    def test_rejects_bad_parameters(self):
        with pytest.raises(ValueError):
            FTransform("normalized_log", 5.0, 0.5)
        with pytest.raises(ValueError):
            FTransform("softplus")


class TestProximalEval:
    def test_single_state_example(self):
        model = _one_state_model([0, 1])
        spec = PessimismSpec(DisSpec("CQL"), alpha=0.5)
        np.testing.assert_allclose(proximal_eval(model, [[1.0, 0.0]], spec), [1.0])

    def test_alpha_zero_is_plain_evaluation(self):
        mdp, _, model = garnet_instance(3)
        pi = supported_random_policy(np.random.default_rng(3), model)
        v = proximal_eval(model, pi, PessimismSpec(alpha=0.0))
        np.testing.assert_allclose(v, exact_policy_values(model.mdp(), pi).v, atol=1e-10)

    def test_behavior_policy_has_no_penalty(self):
        _, _, model = garnet_instance(4)
        beta = model.behavior_policy()
        v0 = proximal_eval(model, beta, PessimismSpec(alpha=0.0))
        np.testing.assert_allclose(proximal_eval(model, beta, PessimismSpec(alpha=3.0)), v0, atol=1e-10)

    def test_fixed_point_residual_and_iteration(self):
        _, _, model = garnet_instance(5)
        pi = supported_random_policy(np.random.default_rng(5), model)
        spec = PessimismSpec(DisSpec("KL"), alpha=0.7)
        v = proximal_eval(model, pi, spec)
        S, A = model.num_states, model.num_actions
        p = penalty_vector(model, pi, spec)
        rhs = (pi.probs * (model.reward + model.discount * model.transition @ v).reshape(S, A)).sum(1)
        assert np.max(np.abs(v - (rhs - spec.alpha * p))) <= 1e-9
        v_it = iterative_policy_values(model.mdp(), pi, 600, penalty=spec.alpha * p)
        assert np.max(np.abs(v_it - v)) <= 1e-8

    @given(seeds, st.floats(0, 3), st.floats(0, 3))
    @settings(max_examples=30, deadline=None)
    def test_monotone_in_alpha(self, seed, a1, a2):
        _, _, model = garnet_instance(seed % 50)
        pi = random_policy(np.random.default_rng(seed), model.num_states, model.num_actions)
        lo, hi = sorted((a1, a2))
        for sa in (False, True):
            v_lo = proximal_eval(model, pi, PessimismSpec(alpha=lo, state_aware=sa))
            v_hi = proximal_eval(model, pi, PessimismSpec(alpha=hi, state_aware=sa))
            assert np.all(v_hi <= v_lo + 1e-9)

    def test_state_aware_matches_plain_when_weights_are_one(self):
        model = _one_state_model([0, 1])
        # a single state always has ratio exactly 1
        np.testing.assert_array_equal(raw_state_ratios(model, [[1.0, 0.0]]), [1.0])
        spec = PessimismSpec(alpha=0.5)
        assert np.array_equal(sa_proximal_eval(model, [[1.0, 0.0]], spec),
                              proximal_eval(model, [[1.0, 0.0]], spec))


class TestStateAwareWeights:
    def test_on_policy_ratio_near_one(self):
        mdp = build_garnet(4, 2, 4, seed=0)
        beh = PolicyTable.uniform(4, 2)
        data = sample_occupancy_dataset(mdp, beh, 100_000, seed=0)
        model = build_empirical_model(data, 4, 2, mdp.discount, mdp.initial_dist)
        np.testing.assert_allclose(state_aware_weights(model, model.behavior_policy()), 1.0, atol=0.05)

    def test_rare_branch_gets_larger_weight(self):
        _, _, model = rare_branch_instance(1, 9)
        w = state_aware_weights(model, PolicyTable.uniform(5, 2))
        assert w[1] > w[3]

    def test_state_aware_more_pessimistic_on_rare_branch(self):
        _, _, model = rare_branch_instance(1, 9)
        pi = PolicyTable.uniform(5, 2)
        spec = PessimismSpec(alpha=0.01)
        w = state_aware_weights(model, pi)
        assert w[1] > 1 and w[2] > 1
        assert sa_proximal_eval(model, pi, spec)[1] <= proximal_eval(model, pi, spec)[1]

    def test_unvisited_state_uses_half_count_floor(self):
        data = OfflineDataset(s=[0, 0], a=[0, 0], r=[0.0, 0.0], s_next=[0, 0], is_initial=[True, False])
        model = build_empirical_model(data, 2, 1, 0.5, initial_dist=[0.5, 0.5])
        ratios = raw_state_ratios(model, [[1.0], [1.0]])
        # the unvisited state self-loops: normalised occupancy 0.5 against a floor of 0.5 / 2
        np.testing.assert_allclose(ratios[1], 2.0)


class TestOptimizePolicy:
    def test_alpha_zero_full_coverage_matches_optimal(self):
        mdp = build_garnet(4, 2, 4, seed=1)
        data = generate_dataset(mdp, PolicyTable.uniform(4, 2), 200, 20, seed=1)
        model = build_empirical_model(data, 4, 2, mdp.discount, mdp.initial_dist)
        policy, value = optimize_policy(model, PessimismSpec(alpha=0.0), PolicyClass())
        star, sol = optimal_policy(model.mdp())
        assert abs(value - mdp.initial_dist @ sol.v) < 1e-9
        assert np.array_equal(policy.probs, star.probs)

    def test_larger_alpha_never_moves_further_from_data(self):
        _, _, model = garnet_instance(2)

        def own_distance(alpha):
            policy, _ = optimize_policy(model, PessimismSpec(alpha=alpha), PolicyClass())
            d = (1 - model.discount) * empirical_occupancy(model, policy)
            return d @ dis_vector(DisSpec(), policy, model.beta_hat, model.support)

        dists = [own_distance(a) for a in (0.0, 0.1, 1.0, 50.0)]
        assert all(b <= a + 1e-12 for a, b in zip(dists, dists[1:]))

    def test_softmax_matches_enumeration_without_penalty(self):
        _, _, model = garnet_instance(6)
        spec = PessimismSpec(alpha=0.0)
        _, v_enum = optimize_policy(model, spec, PolicyClass())
        _, v_soft = optimize_policy(model, spec, PolicyClass("epsilon_supported_softmax"))
        assert abs(v_soft - v_enum) <= 1e-3

    def test_softmax_no_worse_than_enumeration_with_penalty(self):
        _, _, model = garnet_instance(7)
        spec = PessimismSpec(alpha=0.5, state_aware=True)
        _, v_enum = optimize_policy(model, spec, PolicyClass())
        _, v_soft = optimize_policy(model, spec, PolicyClass("epsilon_supported_softmax", restarts=2,
                                                             steps=1500))
        assert v_soft >= v_enum - 1e-3

    def test_enumeration_limit(self):
        mdp = build_garnet(21, 2, 2, seed=0)
        data = generate_dataset(mdp, PolicyTable.uniform(21, 2), 5, 5, seed=0)
        model = build_empirical_model(data, 21, 2, mdp.discount)
        with pytest.raises(ValueError, match="epsilon_supported_softmax"):
            optimize_policy(model, PessimismSpec(), PolicyClass())

    @pytest.mark.parametrize("state_aware,f", [
        (False, FTransform()), (True, FTransform()), (True, FTransform("clip", clip_max=1.2)),
        (True, FTransform("normalized_log", 0.5, 5.0))])
    def test_objective_gradient_matches_finite_differences(self, state_aware, f):
        _, _, model = garnet_instance(8)
        rng = np.random.default_rng(1)
        probs = rng.dirichlet(np.ones(2), size=4) * 0.8 + 0.1
        spec = PessimismSpec(DisSpec("KL", 3.0), alpha=0.4, state_aware=state_aware, f=f)
        _, g = objective_and_gradient(model, probs, spec)
        h = 1e-6
        for s in range(4):
            for a in range(2):
                e = np.zeros_like(probs)
                e[s, a] = h
                fd = (objective_and_gradient(model, probs + e, spec)[0]
                      - objective_and_gradient(model, probs - e, spec)[0]) / (2 * h)
                assert abs(fd - g[s, a]) <= 1e-5 * max(1.0, abs(fd))


class TestSpecs:
    def test_round_trip(self):
        spec = PessimismSpec(DisSpec("TV", 10.0), 0.3, True, FTransform("clip", clip_max=2.0))
        assert PessimismSpec.from_dict(spec.to_dict()) == spec

    def test_rejects_negative_alpha(self):
        with pytest.raises(ValueError):
            PessimismSpec(alpha=-1.0)

    def test_rejects_unknown_kind(self):
        with pytest.raises(ValueError):
            DisSpec("JS")
        with pytest.raises(ValueError):
            PolicyClass("greedy")

    def test_policy_class_size(self):
        assert PolicyClass().size(4, 2) == 16
        assert PolicyClass("epsilon_supported_softmax").size(4, 2) == np.inf

    def test_single_state_fixture(self):
        mdp = single_state_mdp()
        assert mdp.num_states == 1 and replace(PessimismSpec(), alpha=1.0).alpha == 1.0
