"""Environment generators, behaviour policies and scripted chain datasets."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import OfflineDataset
from .mdp import PolicyTable, TabularMdp, optimal_policy

BEHAVIOR_KINDS = ("uniform", "dirichlet", "epsilon_optimal", "chain_skewed")


@dataclass(frozen=True)
class ChainLayout:
    """State indices of a two-branch chain: start, then the left and right segments."""

    num_left: int
    num_right: int

    @property
    def start(self) -> int:
        return 0

    @property
    def left(self) -> list[int]:
        return list(range(1, 1 + self.num_left))

    @property
    def right(self) -> list[int]:
        return list(range(1 + self.num_left, 1 + self.num_left + self.num_right))

    @property
    def num_states(self) -> int:
        return 1 + self.num_left + self.num_right


def build_chain_mdp(num_left: int, num_right: int, reward_left: float, reward_right: float,
                    discount: float, num_actions: int = 2) -> TabularMdp:
    """Two-branch chain starting at state 0.

    Action 0 at the start enters the left segment, any other action the
    right one. Inside a segment every action moves one step along it; the
    last state of each segment is absorbing and pays its branch reward on
    every step spent there. All other rewards are 0.
    """
    if num_left < 1 or num_right < 1:
        raise ValueError("segment lengths must be at least 1")
    if num_actions < 2:
        raise ValueError("a chain needs at least two actions")
    lay = ChainLayout(num_left, num_right)
    S, A = lay.num_states, num_actions
    P = np.zeros((S * A, S))
    r = np.zeros(S * A)
    P[0 * A + 0, lay.left[0]] = 1.0
    for a in range(1, A):
        P[a, lay.right[0]] = 1.0
    for seg, reward in ((lay.left, reward_left), (lay.right, reward_right)):
        for i, s in enumerate(seg):
            nxt = seg[min(i + 1, len(seg) - 1)]
            for a in range(A):
                P[s * A + a, nxt] = 1.0
                if i == len(seg) - 1:
                    r[s * A + a] = reward
    rho = np.zeros(S)
    rho[0] = 1.0
    return TabularMdp(S, A, P, r, discount, rho)


def build_garnet(num_states: int, num_actions: int, branching: int, seed: int,
                 discount: float = 0.9) -> TabularMdp:
    """Random MDP: each pair reaches ``branching`` distinct states with Dirichlet(1) weights.

    Rewards are uniform on [-1, 1]; the initial distribution is uniform.
    """
    if not 1 <= branching <= num_states:
        raise ValueError("branching must lie in [1, num_states]")
    rng = np.random.default_rng(seed)
    S, A = num_states, num_actions
    P = np.zeros((S * A, S))
    for z in range(S * A):
        nxt = rng.choice(S, size=branching, replace=False)
        P[z, nxt] = rng.dirichlet(np.ones(branching))
    r = rng.uniform(-1.0, 1.0, size=S * A)
    return TabularMdp(S, A, P, r, discount, np.full(S, 1.0 / S))


def build_gridworld(size: int, slip: float = 0.1, discount: float = 0.9) -> TabularMdp:
    """``size`` x ``size`` grid; start top-left, absorbing goal bottom-right paying 1 per step.

    Actions are up, down, left, right; with probability ``slip`` the agent
    stays put. Moves into a wall also stay put.
    """
    if size < 2 or not 0 <= slip < 1:
        raise ValueError("need size >= 2 and slip in [0, 1)")
    S, A = size * size, 4
    moves = [(-1, 0), (1, 0), (0, -1), (0, 1)]
    goal = S - 1
    P = np.zeros((S * A, S))
    r = np.zeros(S * A)
    for s in range(S):
        row, col = divmod(s, size)
        for a, (dr, dc) in enumerate(moves):
            z = s * A + a
            if s == goal:
                P[z, s] = 1.0
                r[z] = 1.0
                continue
            nr, nc = row + dr, col + dc
            nxt = nr * size + nc if 0 <= nr < size and 0 <= nc < size else s
            P[z, nxt] += 1.0 - slip
            P[z, s] += slip
    rho = np.zeros(S)
    rho[0] = 1.0
    return TabularMdp(S, A, P, r, discount, rho)


def make_behavior(kind: str, mdp: TabularMdp, seed: int = 0, epsilon: float = 0.3,
                  p_left: float = 0.1, num_left: int | None = None) -> PolicyTable:
    """Behaviour policies used to generate offline data.

    ``chain_skewed`` takes the left branch with probability ``p_left`` at the
    start and then keeps playing the branch's own action (0 on the left,
    1 on the right), so each segment state has a single supported action.
    """
    S, A = mdp.num_states, mdp.num_actions
    if kind == "uniform":
        return PolicyTable.uniform(S, A)
    if kind == "dirichlet":
        return PolicyTable(np.random.default_rng(seed).dirichlet(np.ones(A), size=S))
    if kind == "epsilon_optimal":
        star, _ = optimal_policy(mdp)
        return PolicyTable((1 - epsilon) * star.probs + epsilon / A)
    if kind == "chain_skewed":
        if num_left is None:
            raise ValueError("chain_skewed behaviour needs num_left")
        probs = np.zeros((S, A))
        probs[0, 0] = p_left
        probs[0, 1] = 1 - p_left
        probs[1:1 + num_left, 0] = 1.0
        probs[1 + num_left:, 1] = 1.0
        return PolicyTable(probs)
    raise ValueError(f"unknown behaviour kind {kind!r}; expected one of {BEHAVIOR_KINDS}")


def _next_state(mdp: TabularMdp, s: int, a: int) -> int:
    row = mdp.transition[s * mdp.num_actions + a]
    if row.max() < 1.0:
        raise ValueError("scripted rollouts need deterministic transitions")
    return int(row.argmax())


def scripted_dataset(mdp: TabularMdp, episodes, source_seed: int = -1) -> OfflineDataset:
    """Dataset from explicit ``(start_state, actions)`` scripts on a deterministic MDP."""
    cols = {k: [] for k in ("s", "a", "r", "s_next", "is_initial")}
    for start, actions in episodes:
        s = int(start)
        for t, a in enumerate(actions):
            nxt = _next_state(mdp, s, a)
            cols["s"].append(s)
            cols["a"].append(int(a))
            cols["r"].append(float(mdp.reward[s * mdp.num_actions + a]))
            cols["s_next"].append(nxt)
            cols["is_initial"].append(t == 0)
            s = nxt
    return OfflineDataset(**cols, source_seed=source_seed)


def two_branch_dataset(num_left: int, num_right: int, m: int, n: int,
                       horizon: int | None = None) -> list[tuple[int, list[int]]]:
    """Scripts for ``m`` left and ``n`` right trajectories from the start state.

    Each trajectory plays its branch's own action throughout, so the left
    segment only ever sees action 0 and the right segment action 1.
    """
    H = horizon or max(num_left, num_right) + 1
    return [(0, [0] * H)] * m + [(0, [1] * H)] * n


def balanced_skew_dataset(num_left: int, num_right: int, m: int, n: int,
                          horizon: int = 3) -> list[tuple[int, list[int]]]:
    """Scripts with a balanced empirical policy but a skewed state distribution.

    ``m`` trajectories go left and ``m`` go right from the start state; the
    remaining ``n - m`` start inside the right segment. Actions at every
    state alternate with the state's visit count, so each visited state
    sees both actions equally often (up to one count).
    """
    if n < m:
        raise ValueError("need n >= m")
    lay = ChainLayout(num_left, num_right)
    visits: dict[int, int] = {}
    scripts = []

    def play(start, first):
        s, acts = start, []
        for t in range(horizon):
            if t == 0 and first is not None:
                a = first
            else:
                a = visits.get(s, 0) % 2
            visits[s] = visits.get(s, 0) + 1
            acts.append(a)
            s = _chain_step(lay, s, a)
        return acts

    for i in range(m):
        scripts.append((0, play(0, 0)))
        scripts.append((0, play(0, 1)))
    for _ in range(n - m):
        scripts.append((lay.right[0], play(lay.right[0], None)))
    return scripts


def _chain_step(lay: ChainLayout, s: int, a: int) -> int:
    if s == lay.start:
        return lay.left[0] if a == 0 else lay.right[0]
    for seg in (lay.left, lay.right):
        if s in seg:
            i = seg.index(s)
            return seg[min(i + 1, len(seg) - 1)]
    raise ValueError(f"state {s} outside the chain")
