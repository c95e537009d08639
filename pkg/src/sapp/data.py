"""Offline datasets and the empirical model built from their counts."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .mdp import PolicyTable, TabularMdp, as_probs, sample_categorical

CSV_HEADER = ["s", "a", "r", "s_next", "is_initial"]


@dataclass(frozen=True)
class OfflineDataset:
    """A transition log ``(s, a, r, s_next, is_initial)``, stored column-wise."""

    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    is_initial: np.ndarray
    source_seed: int = -1

    def __post_init__(self):
        cols = {
            "s": np.array(self.s, dtype=np.int64),
            "a": np.array(self.a, dtype=np.int64),
            "r": np.array(self.r, dtype=np.float64),
            "s_next": np.array(self.s_next, dtype=np.int64),
            "is_initial": np.array(self.is_initial, dtype=bool),
        }
        n = cols["s"].size
        if n < 1:
            raise ValueError("dataset must contain at least one transition")
        for name, col in cols.items():
            if col.shape != (n,):
                raise ValueError(f"column {name!r} has shape {col.shape}, expected ({n},)")
            col.setflags(write=False)
            object.__setattr__(self, name, col)
        if min(cols["s"].min(), cols["a"].min(), cols["s_next"].min()) < 0:
            raise ValueError("negative index in dataset")

    @property
    def size(self) -> int:
        return int(self.s.size)

    def __len__(self) -> int:
        return self.size

    def check_bounds(self, num_states: int, num_actions: int) -> None:
        if self.s.max() >= num_states or self.s_next.max() >= num_states:
            raise ValueError("state index out of range")
        if self.a.max() >= num_actions:
            raise ValueError("action index out of range")

    @classmethod
    def concat(cls, parts, source_seed: int = -1) -> "OfflineDataset":
        parts = list(parts)
        return cls(
            s=np.concatenate([p.s for p in parts]),
            a=np.concatenate([p.a for p in parts]),
            r=np.concatenate([p.r for p in parts]),
            s_next=np.concatenate([p.s_next for p in parts]),
            is_initial=np.concatenate([p.is_initial for p in parts]),
            source_seed=source_seed,
        )

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_HEADER)
            for row in zip(self.s, self.a, self.r, self.s_next, self.is_initial):
                w.writerow([int(row[0]), int(row[1]), repr(float(row[2])), int(row[3]), int(row[4])])

    @classmethod
    def from_csv(cls, path, source_seed: int = -1) -> "OfflineDataset":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if header != CSV_HEADER:
                raise ValueError(f"unexpected CSV header {header}")
            rows = list(reader)
        cols = list(zip(*rows))
        return cls(
            s=[int(x) for x in cols[0]],
            a=[int(x) for x in cols[1]],
            r=[float(x) for x in cols[2]],
            s_next=[int(x) for x in cols[3]],
            is_initial=[bool(int(x)) for x in cols[4]],
            source_seed=source_seed,
        )

    def to_dict(self) -> dict:
        return {
            "source_seed": int(self.source_seed),
            "s": self.s.tolist(),
            "a": self.a.tolist(),
            "r": self.r.tolist(),
            "s_next": self.s_next.tolist(),
            "is_initial": self.is_initial.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "OfflineDataset":
        return cls(doc["s"], doc["a"], doc["r"], doc["s_next"], doc["is_initial"],
                   source_seed=doc.get("source_seed", -1))

    def save_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load_json(cls, path) -> "OfflineDataset":
        return cls.from_dict(json.loads(Path(path).read_text()))


def generate_dataset(
    mdp: TabularMdp,
    behavior,
    num_episodes: int,
    horizon: int,
    seed: int,
    start_dist: np.ndarray | None = None,
) -> OfflineDataset:
    """Roll out ``behavior`` for exactly ``horizon`` steps per episode.

    Episodes start from ``start_dist`` when given (the data's own state
    distribution), otherwise from the MDP's initial distribution.
    """
    if num_episodes < 1 or horizon < 1:
        raise ValueError("num_episodes and horizon must be at least 1")
    pi = as_probs(behavior)
    if pi.shape != (mdp.num_states, mdp.num_actions):
        raise ValueError("behavior policy has the wrong shape")
    if np.any(pi.sum(axis=1) <= 0):
        raise ValueError("behavior policy has a zero row")
    rho = mdp.initial_dist if start_dist is None else np.asarray(start_dist, dtype=float)
    rng = np.random.default_rng(seed)
    n, H, A = int(num_episodes), int(horizon), mdp.num_actions
    S_ = np.empty((n, H), dtype=np.int64)
    A_ = np.empty((n, H), dtype=np.int64)
    N_ = np.empty((n, H), dtype=np.int64)
    s = sample_categorical(rng, np.broadcast_to(rho, (n, rho.size)))
    for t in range(H):
        a = sample_categorical(rng, pi[s])
        nxt = sample_categorical(rng, mdp.transition[s * A + a])
        S_[:, t], A_[:, t], N_[:, t] = s, a, nxt
        s = nxt
    init = np.zeros((n, H), dtype=bool)
    init[:, 0] = True
    z = S_ * A + A_
    return OfflineDataset(
        s=S_.ravel(), a=A_.ravel(), r=mdp.reward[z].ravel(), s_next=N_.ravel(),
        is_initial=init.ravel(), source_seed=seed,
    )


def sample_occupancy_dataset(mdp: TabularMdp, policy, size: int, seed: int) -> OfflineDataset:
    """Draw ``size`` i.i.d. transitions from the normalised discounted occupancy of ``policy``.

    Each sample runs a rollout from the initial distribution and keeps the
    transition taken at a Geometric(1 - gamma) stopping time.
    """
    if size < 1:
        raise ValueError("size must be at least 1")
    pi = as_probs(policy)
    rng = np.random.default_rng(seed)
    A = mdp.num_actions
    stop = rng.geometric(1.0 - mdp.discount, size=size) - 1 if mdp.discount > 0 else np.zeros(size, int)
    s = sample_categorical(rng, np.broadcast_to(mdp.initial_dist, (size, mdp.num_states)))
    for t in range(int(stop.max())):
        live = stop > t
        if not live.any():
            break
        idx = np.flatnonzero(live)
        a = sample_categorical(rng, pi[s[idx]])
        s[idx] = sample_categorical(rng, mdp.transition[s[idx] * A + a])
    a = sample_categorical(rng, pi[s])
    nxt = sample_categorical(rng, mdp.transition[s * A + a])
    return OfflineDataset(s=s, a=a, r=mdp.reward[s * A + a], s_next=nxt,
                          is_initial=stop == 0, source_seed=seed)


@dataclass(frozen=True)
class EmpiricalModel:
    """Counts and the empirical MDP induced by a dataset.

    ``p_hat`` and ``r_hat`` are zero on unsupported pairs; :meth:`mdp`
    substitutes a worst-case self-loop with reward -1 there.
    """

    num_states: int
    num_actions: int
    size: int
    count_s: np.ndarray
    count_sa: np.ndarray          # (S, A)
    count_sas: np.ndarray         # (S*A, S)
    beta_hat: np.ndarray          # (S, A); uniform on unvisited states
    d_data: np.ndarray            # (S,)
    p_hat: np.ndarray             # (S*A, S)
    r_hat: np.ndarray             # (S*A,)
    support: np.ndarray           # (S*A,) bool
    discount: float
    initial_dist: np.ndarray

    @property
    def visited(self) -> np.ndarray:
        return self.count_s > 0

    @property
    def support_sa(self) -> np.ndarray:
        return self.support.reshape(self.num_states, self.num_actions)

    @property
    def transition(self) -> np.ndarray:
        """Transition matrix with the unsupported-pair substitution applied."""
        return self._substituted[0]

    @property
    def reward(self) -> np.ndarray:
        return self._substituted[1]

    @property
    def _substituted(self):
        cached = self.__dict__.get("_subst_cache")
        if cached is None:
            P = self.p_hat.copy()
            r = self.r_hat.copy()
            for z in np.flatnonzero(~self.support):
                P[z] = 0.0
                P[z, z // self.num_actions] = 1.0
                r[z] = -1.0
            P.setflags(write=False)
            r.setflags(write=False)
            cached = (P, r)
            object.__setattr__(self, "_subst_cache", cached)
        return cached

    def mdp(self) -> TabularMdp:
        return TabularMdp(self.num_states, self.num_actions, self.transition, self.reward,
                          self.discount, self.initial_dist)

    def behavior_policy(self) -> PolicyTable:
        return PolicyTable(self.beta_hat)


def build_empirical_model(
    dataset: OfflineDataset,
    num_states: int,
    num_actions: int,
    discount: float = 0.9,
    initial_dist: np.ndarray | None = None,
) -> EmpiricalModel:
    """Counts, empirical behaviour policy, state distribution and MDP.

    ``initial_dist`` defaults to the empirical distribution of episode-start
    states (or of all states if no transition is flagged initial).
    """
    dataset.check_bounds(num_states, num_actions)
    S, A = num_states, num_actions
    z = dataset.s * A + dataset.a
    count_sas = np.zeros((S * A, S), dtype=np.int64)
    np.add.at(count_sas, (z, dataset.s_next), 1)
    count_z = count_sas.sum(axis=1)
    count_sa = count_z.reshape(S, A)
    count_s = count_sa.sum(axis=1)
    support = count_z > 0
    visited = count_s > 0

    beta = np.full((S, A), 1.0 / A)
    beta[visited] = count_sa[visited] / count_s[visited, None]
    d_data = count_s / dataset.size

    p_hat = np.zeros((S * A, S))
    p_hat[support] = count_sas[support] / count_z[support, None]
    r_sum = np.zeros(S * A)
    np.add.at(r_sum, z, dataset.r)
    r_hat = np.zeros(S * A)
    r_hat[support] = r_sum[support] / count_z[support]

    if initial_dist is None:
        starts = dataset.s[dataset.is_initial] if dataset.is_initial.any() else dataset.s
        initial_dist = np.bincount(starts, minlength=S) / starts.size
    rho = np.asarray(initial_dist, dtype=float)

    fields = dict(count_s=count_s, count_sa=count_sa, count_sas=count_sas, beta_hat=beta,
                  d_data=d_data, p_hat=p_hat, r_hat=r_hat, support=support, initial_dist=rho)
    for arr in fields.values():
        arr.setflags(write=False)
    return EmpiricalModel(num_states=S, num_actions=A, size=dataset.size,
                          discount=float(discount), **fields)


def uncertainty_vector(model: EmpiricalModel, policy, cap: float = 1.0) -> np.ndarray:
    """Policy-averaged inverse square-root counts, ``sum_a pi(a|s) min(n(s,a)^-1/2, cap)``.

    Pairs never seen in the data contribute ``cap``.
    """
    if cap <= 0:
        raise ValueError("cap must be positive")
    pi = as_probs(policy)
    return np.einsum("sa,sa->s", pi, inv_sqrt_counts(model, cap))


def inv_sqrt_counts(model: EmpiricalModel, cap: float = 1.0) -> np.ndarray:
    n = model.count_sa.astype(float)
    with np.errstate(divide="ignore"):
        out = np.where(n > 0, 1.0 / np.sqrt(np.maximum(n, 1.0)), cap)
    return np.minimum(out, cap)
