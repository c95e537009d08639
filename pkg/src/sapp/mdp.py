"""Exact finite MDPs and their solvers.

State-action pairs are flattened row-major: pair ``(s, a)`` lives at index
``s * num_actions + a``.  The transition matrix therefore has shape
``(S*A, S)`` and the reward vector length ``S*A``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

ROW_TOL = 1e-12


def _frozen(x, dtype=float) -> np.ndarray:
    arr = np.array(x, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class TabularMdp:
    num_states: int
    num_actions: int
    transition: np.ndarray
    reward: np.ndarray
    discount: float
    initial_dist: np.ndarray

    def __post_init__(self):
        S, A = int(self.num_states), int(self.num_actions)
        if S < 1 or A < 1:
            raise ValueError("num_states and num_actions must be positive")
        object.__setattr__(self, "num_states", S)
        object.__setattr__(self, "num_actions", A)
        P = _frozen(self.transition).reshape(S * A, S)
        P.setflags(write=False)
        r = _frozen(self.reward).reshape(S * A)
        r.setflags(write=False)
        rho = _frozen(self.initial_dist).reshape(S)
        rho.setflags(write=False)
        if np.any(P < 0) or np.any(np.abs(P.sum(axis=1) - 1.0) > ROW_TOL):
            raise ValueError("transition rows must be nonnegative and sum to 1")
        if np.any(rho < 0) or abs(rho.sum() - 1.0) > ROW_TOL:
            raise ValueError("initial_dist must be a probability vector")
        if np.any(np.abs(r) > 1.0):
            raise ValueError("rewards must lie in [-1, 1]")
        if not 0.0 <= float(self.discount) < 1.0:
            raise ValueError("discount must lie in [0, 1)")
        object.__setattr__(self, "transition", P)
        object.__setattr__(self, "reward", r)
        object.__setattr__(self, "initial_dist", rho)
        object.__setattr__(self, "discount", float(self.discount))

    @property
    def num_pairs(self) -> int:
        return self.num_states * self.num_actions

    def to_dict(self) -> dict:
        return {
            "num_states": self.num_states,
            "num_actions": self.num_actions,
            "transition": self.transition.ravel().tolist(),
            "reward": self.reward.tolist(),
            "discount": self.discount,
            "initial_dist": self.initial_dist.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "TabularMdp":
        return cls(
            num_states=doc["num_states"],
            num_actions=doc["num_actions"],
            transition=doc["transition"],
            reward=doc["reward"],
            discount=doc["discount"],
            initial_dist=doc["initial_dist"],
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "TabularMdp":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class PolicyTable:
    probs: np.ndarray

    def __post_init__(self):
        p = _frozen(self.probs)
        if p.ndim != 2:
            raise ValueError("policy table must be a (num_states, num_actions) matrix")
        if np.any(p < 0) or np.any(np.abs(p.sum(axis=1) - 1.0) > ROW_TOL):
            raise ValueError("policy rows must be nonnegative and sum to 1")
        object.__setattr__(self, "probs", p)

    @property
    def num_states(self) -> int:
        return self.probs.shape[0]

    @property
    def num_actions(self) -> int:
        return self.probs.shape[1]

    @classmethod
    def uniform(cls, num_states: int, num_actions: int) -> "PolicyTable":
        return cls(np.full((num_states, num_actions), 1.0 / num_actions))

    @classmethod
    def deterministic(cls, actions, num_actions: int) -> "PolicyTable":
        actions = np.asarray(actions, dtype=int)
        probs = np.zeros((actions.size, num_actions))
        probs[np.arange(actions.size), actions] = 1.0
        return cls(probs)


def as_probs(policy) -> np.ndarray:
    """Return the probability matrix of a PolicyTable or a raw array."""
    if isinstance(policy, PolicyTable):
        return policy.probs
    return np.asarray(policy, dtype=float)


@dataclass(frozen=True)
class ValueSolution:
    q: np.ndarray
    v: np.ndarray
    occupancy_raw: np.ndarray
    occupancy_norm: np.ndarray = field(repr=False)


def activity_matrix(policy, num_states: int, num_actions: int) -> np.ndarray:
    """Matrix mapping state-action vectors to state vectors under ``policy``.

    Entry ``(s, s*A + a)`` holds ``pi(a|s)``; all other entries are zero.
    """
    pi = as_probs(policy)
    if pi.shape != (num_states, num_actions):
        raise ValueError(
            f"policy has shape {pi.shape}, expected ({num_states}, {num_actions})"
        )
    out = np.zeros((num_states, num_states * num_actions))
    rows = np.repeat(np.arange(num_states), num_actions)
    out[rows, np.arange(num_states * num_actions)] = pi.ravel()
    return out


def state_kernel(transition: np.ndarray, pi: np.ndarray) -> np.ndarray:
    """``A^pi P``: the state-to-state kernel of ``pi`` (shape S x S)."""
    S, A = pi.shape
    return np.einsum("sa,sat->st", pi, transition.reshape(S, A, S))


def solve_values(transition, reward_pairs, pi, discount, penalty=None):
    """Solve ``v = A^pi (r + gamma P v) - penalty`` by a dense LU solve."""
    S, A = pi.shape
    K = state_kernel(transition, pi)
    b = np.einsum("sa,sa->s", pi, reward_pairs.reshape(S, A))
    if penalty is not None:
        b = b - penalty
    M = np.eye(S) - discount * K
    try:
        return np.linalg.solve(M, b)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - impossible for gamma < 1
        raise RuntimeError(
            f"singular Bellman system (discount={discount}, cond={np.linalg.cond(M):.3g})"
        ) from exc


def occupancy(transition, pi, discount, initial_dist) -> np.ndarray:
    """Raw discounted state occupancy ``rho (I - gamma A^pi P)^-1``; sums to 1/(1-gamma)."""
    S = pi.shape[0]
    M = np.eye(S) - discount * state_kernel(transition, pi)
    return np.linalg.solve(M.T, initial_dist)


def exact_policy_values(mdp: TabularMdp, policy) -> ValueSolution:
    pi = as_probs(policy)
    activity_matrix(pi, mdp.num_states, mdp.num_actions)  # shape check
    v = solve_values(mdp.transition, mdp.reward, pi, mdp.discount)
    q = mdp.reward + mdp.discount * mdp.transition @ v
    d_raw = occupancy(mdp.transition, pi, mdp.discount, mdp.initial_dist)
    return ValueSolution(q=q, v=v, occupancy_raw=d_raw, occupancy_norm=(1 - mdp.discount) * d_raw)


def iterative_policy_values(mdp: TabularMdp, policy, num_iters: int = 500,
                            penalty: np.ndarray | None = None) -> np.ndarray:
    """State values by repeated application of the Bellman expectation operator.

    ``penalty`` (per state) is subtracted at every application.
    """
    pi = as_probs(policy)
    K = state_kernel(mdp.transition, pi)
    r_pi = np.einsum("sa,sa->s", pi, mdp.reward.reshape(pi.shape))
    if penalty is not None:
        r_pi = r_pi - np.asarray(penalty, dtype=float)
    v = np.zeros(mdp.num_states)
    for _ in range(num_iters):
        v = r_pi + mdp.discount * K @ v
    return v


def greedy_policy(q: np.ndarray, num_states: int, num_actions: int) -> PolicyTable:
    # np.argmax returns the first maximiser: lowest action index wins ties
    return PolicyTable.deterministic(q.reshape(num_states, num_actions).argmax(axis=1), num_actions)


def optimal_policy(mdp: TabularMdp, tol: float = 1e-10) -> tuple[PolicyTable, ValueSolution]:
    if tol <= 0:
        raise ValueError("tol must be positive")
    S, A, g = mdp.num_states, mdp.num_actions, mdp.discount
    threshold = tol * (1 - g) / (2 * g) if g > 0 else np.inf
    v = np.zeros(S)
    while True:
        q = mdp.reward + g * mdp.transition @ v
        v_new = q.reshape(S, A).max(axis=1)
        done = np.max(np.abs(v_new - v)) <= threshold
        v = v_new
        if done:
            break
    q = mdp.reward + g * mdp.transition @ v
    # snap near-ties so the lowest index wins despite round-off
    qm = q.reshape(S, A)
    qm = np.where(qm >= qm.max(axis=1, keepdims=True) - 1e-12 * (1 + np.abs(qm)), 1.0, 0.0)
    policy = PolicyTable.deterministic(qm.argmax(axis=1), A)
    return policy, exact_policy_values(mdp, policy)


def expected_return(mdp: TabularMdp, policy) -> float:
    return float(mdp.initial_dist @ exact_policy_values(mdp, policy).v)


def default_horizon(discount: float, eps: float = 1e-4) -> int:
    """Rollout length whose truncation error ``gamma^H / (1 - gamma)`` is at most ``eps``."""
    if discount == 0:
        return 1
    return max(1, math.ceil(math.log(eps * (1 - discount)) / math.log(discount)))


def sample_categorical(rng: np.random.Generator, probs: np.ndarray) -> np.ndarray:
    """One draw per row of ``probs`` by inverse-CDF sampling."""
    cdf = np.cumsum(probs, axis=1)
    u = rng.random(probs.shape[0]) * cdf[:, -1]
    idx = (u[:, None] >= cdf).sum(axis=1)
    return np.minimum(idx, probs.shape[1] - 1)


class RowSampler:
    """Draws from the categorical rows of a fixed probability table.

    Row ``i`` owns the interval ``[i, i + 1)`` of one flattened, offset CDF,
    so a batch of draws is a single ``searchsorted``.
    """

    def __init__(self, table: np.ndarray):
        table = np.asarray(table, dtype=float)
        self.width = table.shape[1]
        cdf = np.cumsum(table, axis=1)
        cdf = cdf / cdf[:, -1:]
        cdf[:, -1] = 1.0
        self._flat = (cdf + np.arange(table.shape[0])[:, None]).ravel()

    def __call__(self, rng: np.random.Generator, rows: np.ndarray) -> np.ndarray:
        u = rows + rng.random(rows.shape[0])
        idx = np.searchsorted(self._flat, u, side="right") - rows * self.width
        return np.minimum(idx, self.width - 1)


def monte_carlo_return(
    mdp: TabularMdp,
    policy,
    num_rollouts: int,
    horizon: int | None = None,
    seed: int = 0,
    start_dist: np.ndarray | None = None,
) -> tuple[float, float]:
    """Mean and standard error of truncated discounted returns.

    Rollouts start from ``start_dist`` (default: the MDP's initial
    distribution) and run for ``horizon`` steps.
    """
    if num_rollouts < 1:
        raise ValueError("num_rollouts must be at least 1")
    pi = as_probs(policy)
    S, A = pi.shape
    H = default_horizon(mdp.discount) if horizon is None else int(horizon)
    rho = mdp.initial_dist if start_dist is None else np.asarray(start_dist, dtype=float)
    rng = np.random.default_rng(seed)
    n = int(num_rollouts)
    s = RowSampler(rho[None])(rng, np.zeros(n, dtype=np.int64))
    pick_action, step = RowSampler(pi), RowSampler(mdp.transition)
    total = np.zeros(n)
    disc = 1.0
    for _ in range(H):
        z = s * A + pick_action(rng, s)
        total += disc * mdp.reward[z]
        s = step(rng, z)
        disc *= mdp.discount
    stderr = float(total.std(ddof=1) / math.sqrt(n)) if n > 1 else float("inf")
    return float(total.mean()), stderr
