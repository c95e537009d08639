"""Small instance factories shared by the test modules."""

import numpy as np

from sapp.data import build_empirical_model, generate_dataset
from sapp.envs import build_chain_mdp, build_garnet, make_behavior, scripted_dataset, two_branch_dataset
from sapp.mdp import PolicyTable, TabularMdp


def garnet_instance(seed, num_states=4, num_actions=2, branching=2, episodes=20, horizon=10,
                    behavior="dirichlet"):
    mdp = build_garnet(num_states, num_actions, branching, seed)
    beh = make_behavior(behavior, mdp, seed)
    data = generate_dataset(mdp, beh, episodes, horizon, seed)
    model = build_empirical_model(data, num_states, num_actions, mdp.discount, mdp.initial_dist)
    return mdp, data, model


def rare_branch_instance(m=1, n=9, discount=0.9):
    """Two-branch chain where the left branch is rare in the data (m : n)."""
    mdp = build_chain_mdp(2, 2, 1.0, 0.5, discount)
    data = scripted_dataset(mdp, two_branch_dataset(2, 2, m, n))
    model = build_empirical_model(data, mdp.num_states, mdp.num_actions, discount, mdp.initial_dist)
    return mdp, data, model


def single_state_mdp(rewards=(1.0,), discount=0.5):
    A = len(rewards)
    return TabularMdp(1, A, np.ones((A, 1)), list(rewards), discount, [1.0])


def two_state_mdp():
    """s0 -> s1 (absorbing); reward 1 in s0 only."""
    P = np.array([[0.0, 1.0], [0.0, 1.0]])
    return TabularMdp(2, 1, P, [1.0, 0.0], 0.9, [1.0, 0.0])


def random_policy(rng, num_states, num_actions):
    return PolicyTable(rng.dirichlet(np.ones(num_actions), size=num_states))


def supported_random_policy(rng, model):
    """Random stochastic policy with mass only on supported actions (uniform on unvisited states)."""
    S, A = model.num_states, model.num_actions
    raw = rng.dirichlet(np.ones(A), size=S)
    allowed = model.support_sa | ~model.visited[:, None]
    probs = np.where(allowed, raw + 1e-3, 0.0)
    return PolicyTable(probs / probs.sum(axis=1, keepdims=True))
