import numpy as np
import pytest

from helpers import rare_branch_instance, garnet_instance
from sapp.data import OfflineDataset, build_empirical_model, generate_dataset, sample_occupancy_dataset
from sapp.dice import (
    DualDiceState,
    exact_pair_ratios,
    omega_state_weights,
    omega_to_csv,
    ratio_policy_value,
    solve_dualdice,
    zeta_to_csv,
)
from sapp.envs import build_garnet
from sapp.mdp import PolicyTable, expected_return, optimal_policy
from sapp.pessimism import raw_state_ratios


def _on_policy(seed, size, num_states=4, branching=4):
    mdp = build_garnet(num_states, 2, branching, seed)
    pi = PolicyTable(np.random.default_rng(seed).dirichlet(np.ones(2), size=num_states))
    data = sample_occupancy_dataset(mdp, pi, size, seed)
    return mdp, pi, data


class TestClosedForm:
    def test_single_state_ratio_is_one(self):
        data = OfflineDataset(s=[0, 0], a=[0, 0], r=[1.0, 1.0], s_next=[0, 0], is_initial=[True, False])
        st = solve_dualdice(data, [[1.0]], 0.9, [1.0])
        np.testing.assert_allclose(st.zeta, [1.0], atol=1e-9)
        assert st.diagnostics["ridge"] is False

    def test_on_policy_ratio_near_one(self):
        mdp, pi, data = _on_policy(0, 100_000)
        st = solve_dualdice(data, pi, mdp.discount, mdp.initial_dist)
        np.testing.assert_allclose(st.zeta, 1.0, atol=0.05)

    def test_data_weighted_mean_is_one(self):
        mdp, _, model = garnet_instance(3, episodes=400, horizon=20, branching=4)
        data = generate_dataset(mdp, PolicyTable.uniform(4, 2), 400, 20, seed=3)
        st = solve_dualdice(data, PolicyTable.uniform(4, 2), mdp.discount, mdp.initial_dist)
        assert abs(np.mean(st.zeta[data.s * 2 + data.a]) - 1.0) <= 0.1

    def test_rare_pairs_get_larger_ratios(self):
        mdp, data, model = rare_branch_instance(1, 9)
        st = solve_dualdice(data, PolicyTable.uniform(5, 2), mdp.discount, model.initial_dist)
        assert st.zeta[1 * 2 + 0] > st.zeta[3 * 2 + 1]

    def test_ridge_fallback_when_target_leaves_support(self):
        mdp, data, model = rare_branch_instance(1, 9)
        target = np.tile([0.0, 1.0], (5, 1))
        st = solve_dualdice(data, target, mdp.discount, model.initial_dist)
        assert st.diagnostics["ridge"] is True
        assert np.all(np.isfinite(st.zeta)) and np.all(st.zeta >= 0)

    def test_error_shrinks_with_more_data(self):
        medians = []
        for size in (1_000, 10_000, 100_000):
            errs = []
            for seed in range(10):
                mdp, pi, data = _on_policy(seed, size)
                model = build_empirical_model(data, 4, 2, mdp.discount, mdp.initial_dist)
                st = solve_dualdice(data, pi, mdp.discount, mdp.initial_dist)
                truth = exact_pair_ratios(mdp, pi, model)
                errs.append(np.nanmax(np.abs(st.zeta - truth)))
            medians.append(np.median(errs))
        assert medians[0] > medians[1] > medians[2]


class TestAlternating:
    def test_agrees_with_closed_form(self):
        mdp = build_garnet(16, 2, 3, seed=1)
        data = generate_dataset(mdp, PolicyTable.uniform(16, 2), 300, 30, seed=1)
        pi = PolicyTable(np.random.default_rng(1).dirichlet(np.ones(2), size=16))
        exact = solve_dualdice(data, pi, mdp.discount, mdp.initial_dist)
        sgd = solve_dualdice(data, pi, mdp.discount, mdp.initial_dist,
                             DualDiceState(solver="alternating_sgd", pretrain_steps=100_000))
        seen = build_empirical_model(data, 16, 2).support
        assert np.max(np.abs(sgd.zeta[seen] - exact.zeta[seen])) <= 1e-3

    def test_seeded_minibatch_runs_are_reproducible(self):
        mdp, pi, data = _on_policy(2, 2_000)
        cfg = DualDiceState(solver="alternating_sgd", pretrain_steps=300, batch_size=64, seed=5)
        a = solve_dualdice(data, pi, mdp.discount, mdp.initial_dist, cfg)
        b = solve_dualdice(data, pi, mdp.discount, mdp.initial_dist, cfg)
        assert np.array_equal(a.zeta, b.zeta)

    def test_warm_start_counts_steps(self):
        mdp, pi, data = _on_policy(2, 2_000)
        cfg = DualDiceState(solver="alternating_sgd", pretrain_steps=50, zeta_steps=7)
        st = solve_dualdice(data, pi, mdp.discount, mdp.initial_dist, cfg)
        st = solve_dualdice(data, pi, mdp.discount, mdp.initial_dist, st)
        assert st.steps_done == 57

    def test_rejects_bad_state(self):
        with pytest.raises(ValueError):
            DualDiceState(solver="adam")
        with pytest.raises(ValueError):
            DualDiceState(zeta=[-1.0])
        with pytest.raises(ValueError):
            DualDiceState(nu=[np.nan])


class TestOmega:
    def test_unit_ratios_at_behavior(self):
        _, _, model = garnet_instance(0)
        st = DualDiceState(zeta=np.ones(8), num_actions=2)
        omega = omega_state_weights(st, model, model.behavior_policy())
        np.testing.assert_allclose(omega[model.visited], 1.0)

    def test_two_action_example(self):
        data = OfflineDataset(s=[0, 0], a=[0, 1], r=[0.0, 0.0], s_next=[0, 0], is_initial=[True, False])
        model = build_empirical_model(data, 1, 2)
        st = DualDiceState(zeta=[3.4, 0.0], num_actions=2)
        np.testing.assert_allclose(omega_state_weights(st, model, [[1.0, 0.0]]), [1.7])

    def test_matches_state_ratio_on_large_data(self):
        mdp = build_garnet(4, 2, 4, seed=4)
        data = generate_dataset(mdp, PolicyTable.uniform(4, 2), 2_000, 30, seed=4)
        model = build_empirical_model(data, 4, 2, mdp.discount, mdp.initial_dist)
        pi = PolicyTable(np.random.default_rng(4).dirichlet(np.ones(2), size=4))
        st = solve_dualdice(data, pi, mdp.discount, mdp.initial_dist)
        np.testing.assert_allclose(omega_state_weights(st, model, pi), raw_state_ratios(model, pi), atol=0.1)

    def test_requires_solution(self):
        _, _, model = garnet_instance(0)
        with pytest.raises(ValueError):
            omega_state_weights(DualDiceState(), model)


class TestRatioValue:
    def test_unit_ratios_give_mean_reward(self):
        data = OfflineDataset(s=[0, 0, 0], a=[0, 1, 0], r=[1.0, -1.0, 0.5], s_next=[0, 0, 0],
                              is_initial=[True, False, False])
        st = DualDiceState(zeta=np.ones(2), num_actions=2)
        assert ratio_policy_value(st, data) == pytest.approx(0.5 / 3)

    def test_on_policy_value(self):
        mdp, pi, data = _on_policy(6, 100_000)
        st = solve_dualdice(data, pi, mdp.discount, mdp.initial_dist)
        est = ratio_policy_value(st, data) / (1 - mdp.discount)
        truth = expected_return(mdp, pi)
        assert abs(est - truth) <= 0.1 * max(1.0, abs(truth))

    def test_preserves_ordering_of_two_policies(self):
        mdp = build_garnet(5, 2, 3, seed=8)
        data = generate_dataset(mdp, PolicyTable.uniform(5, 2), 1_000, 30, seed=8)
        good, _ = optimal_policy(mdp)
        bad = PolicyTable(1.0 - good.probs)
        ests = [ratio_policy_value(solve_dualdice(data, p, mdp.discount, mdp.initial_dist), data)
                for p in (good, bad)]
        assert expected_return(mdp, good) > expected_return(mdp, bad)
        assert ests[0] > ests[1]


def test_csv_dumps(tmp_path):
    zeta_to_csv(tmp_path / "z.csv", np.array([1.0, 2.0, 0.5, 0.0]), 2)
    omega_to_csv(tmp_path / "o.csv", np.array([1.5, 0.25]))
    z = (tmp_path / "z.csv").read_text().splitlines()
    assert z[0] == "s,a,zeta" and z[3] == "1,0,0.5"
    assert (tmp_path / "o.csv").read_text().splitlines() == ["s,omega", "0,1.5", "1,0.25"]
