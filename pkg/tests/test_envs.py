import numpy as np
import pytest

from sapp.envs import (
    ChainLayout,
    balanced_skew_dataset,
    build_chain_mdp,
    build_garnet,
    build_gridworld,
    make_behavior,
    scripted_dataset,
    two_branch_dataset,
)
from sapp.mdp import PolicyTable, expected_return, optimal_policy


class TestChain:
    def test_layout(self):
        lay = ChainLayout(2, 3)
        assert (lay.start, lay.left, lay.right, lay.num_states) == (0, [1, 2], [3, 4, 5], 6)

    def test_optimal_return_of_unit_chain(self):
        # reward 1 arrives from step 1 onward in the absorbing left state
        mdp = build_chain_mdp(1, 1, 1.0, 0.0, 0.9)
        _, sol = optimal_policy(mdp)
        assert abs(sol.v[0] - 9.0) < 1e-9

    def test_start_action_choice(self):
        mdp = build_chain_mdp(2, 2, 1.0, 0.5, 0.9)
        assert mdp.transition[0, 1] == 1.0
        assert mdp.transition[1, 3] == 1.0
        left = PolicyTable(np.tile([1.0, 0.0], (5, 1)))
        right = PolicyTable(np.tile([0.0, 1.0], (5, 1)))
        assert expected_return(mdp, left) > expected_return(mdp, right)

    def test_rejects_empty_segment(self):
        with pytest.raises(ValueError):
            build_chain_mdp(0, 1, 1.0, 0.0, 0.9)


class TestGarnet:
    def test_deterministic_and_valid(self):
        a, b = build_garnet(6, 3, 2, seed=7), build_garnet(6, 3, 2, seed=7)
        assert np.array_equal(a.transition, b.transition)
        assert np.all((a.transition > 0).sum(axis=1) <= 2)
        np.testing.assert_allclose(a.transition.sum(axis=1), 1.0)
        assert np.all(np.abs(a.reward) <= 1.0)

    def test_seeds_differ(self):
        assert not np.array_equal(build_garnet(6, 3, 2, 1).reward, build_garnet(6, 3, 2, 2).reward)

    def test_rejects_bad_branching(self):
        with pytest.raises(ValueError):
            build_garnet(3, 2, 4, seed=0)


class TestGridworld:
    def test_goal_is_absorbing_and_rewarding(self):
        mdp = build_gridworld(3)
        goal = 8
        for a in range(4):
            assert mdp.transition[goal * 4 + a, goal] == 1.0
            assert mdp.reward[goal * 4 + a] == 1.0

    def test_optimal_reaches_goal(self):
        _, sol = optimal_policy(build_gridworld(3, slip=0.0))
        assert abs(sol.v[0] - 0.9**4 / 0.1) < 1e-9


class TestBehavior:
    def test_kinds_are_stochastic(self):
        mdp = build_garnet(4, 3, 2, seed=0)
        for kind in ("uniform", "dirichlet", "epsilon_optimal"):
            np.testing.assert_allclose(make_behavior(kind, mdp).probs.sum(axis=1), 1.0)

    def test_chain_skewed(self):
        mdp = build_chain_mdp(2, 2, 1.0, 0.5, 0.9)
        beh = make_behavior("chain_skewed", mdp, p_left=0.1, num_left=2).probs
        np.testing.assert_allclose(beh[0], [0.1, 0.9])
        assert beh[1, 0] == 1.0 and beh[3, 1] == 1.0

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            make_behavior("greedy", build_garnet(2, 2, 1, seed=0))


class TestScripts:
    def test_two_branch_counts(self):
        mdp = build_chain_mdp(2, 2, 1.0, 0.5, 0.9)
        data = scripted_dataset(mdp, two_branch_dataset(2, 2, 1, 9))
        counts = np.bincount(data.s, minlength=5)
        assert counts[1] * 9 == counts[3]
        assert data.is_initial.sum() == 10

    def test_balanced_skew_keeps_actions_balanced(self):
        mdp = build_chain_mdp(2, 2, 1.0, 0.5, 0.9)
        data = scripted_dataset(mdp, balanced_skew_dataset(2, 2, 2, 18))
        for s in range(5):
            acts = data.a[data.s == s]
            if acts.size:
                assert abs(np.sum(acts == 0) - np.sum(acts == 1)) <= 1

    def test_scripts_need_deterministic_mdp(self):
        with pytest.raises(ValueError):
            scripted_dataset(build_garnet(3, 2, 2, seed=0), [(0, [0, 1])])
