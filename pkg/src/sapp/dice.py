"""Tabular DualDICE: occupancy ratios, state weights and ratio-based value estimates.

The saddle objective is

    J(nu, zeta) = E_D[(nu(s,a) - gamma E_{a'~pi} nu(s',a')) zeta(s,a) - zeta(s,a)^2 / 2]
                  - (1 - gamma) E_{s~rho, a~pi}[nu(s,a)].

Writing ``B = I - gamma P_hat Pi`` and ``D = diag(d_D(s,a))`` the inner
maximiser is ``zeta = B nu`` and the outer problem is the least-squares
system ``B^T D B nu = (1 - gamma) mu0``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from .data import EmpiricalModel, OfflineDataset, build_empirical_model
from .mdp import TabularMdp, activity_matrix, as_probs, exact_policy_values

SOLVERS = ("closed_form", "alternating_sgd")
RIDGE = 1e-8


@dataclass(frozen=True)
class DualDiceState:
    """Solver settings plus the current ``(nu, zeta)`` iterate.

    ``pretrain_steps`` is used on the first solve from a cold start;
    ``zeta_steps`` on every warm-started solve after that.
    """

    solver: str = "closed_form"
    nu: np.ndarray | None = None
    zeta: np.ndarray | None = None
    pretrain_steps: int = 100_000
    zeta_steps: int = 1_000
    lr_nu: float = 0.2
    lr_zeta: float = 0.5
    batch_size: int | None = None
    seed: int = 0
    steps_done: int = 0
    num_actions: int = 0
    diagnostics: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.solver not in SOLVERS:
            raise ValueError(f"unknown solver {self.solver!r}; expected one of {SOLVERS}")
        for name in ("nu", "zeta"):
            v = getattr(self, name)
            if v is not None:
                v = np.array(v, dtype=float)
                if not np.all(np.isfinite(v)):
                    raise ValueError(f"{name} must be finite")
                object.__setattr__(self, name, v)
        if self.zeta is not None and np.any(self.zeta < 0):
            raise ValueError("zeta must be nonnegative")


def _system(dataset: OfflineDataset, pi: np.ndarray, discount: float, initial_dist):
    S, A = pi.shape
    model = build_empirical_model(dataset, S, A, discount)
    B = np.eye(S * A) - discount * model.p_hat @ activity_matrix(pi, S, A)
    d = model.count_sa.ravel() / model.size
    mu0 = (np.asarray(initial_dist, dtype=float)[:, None] * pi).ravel()
    return B, d, mu0


def solve_dualdice(dataset: OfflineDataset, target_policy, discount: float, initial_dist,
                   state: DualDiceState | None = None) -> DualDiceState:
    """Estimate ``zeta = d^pi(s,a) / d_D(s,a)`` from ``dataset`` for ``target_policy``."""
    state = DualDiceState() if state is None else state
    pi = as_probs(target_policy)
    B, d, mu0 = _system(dataset, pi, discount, initial_dist)
    state = replace(state, num_actions=pi.shape[1])
    if state.solver == "closed_form":
        return _closed_form(B, d, mu0, discount, state)
    return _alternating(B, d, mu0, discount, state)


def _closed_form(B, d, mu0, discount, state):
    H = B.T @ (d[:, None] * B)
    rhs = (1 - discount) * mu0
    n = H.shape[0]
    ridge = np.linalg.matrix_rank(H) < n
    if ridge:
        H = H + RIDGE * np.eye(n)
    nu = np.linalg.solve(H, rhs)
    zeta = np.maximum(B @ nu, 0.0)
    diag = {"ridge": bool(ridge), "ridge_lambda": RIDGE if ridge else 0.0,
            "cond": float(np.linalg.cond(H))}
    return replace(state, nu=nu, zeta=zeta, diagnostics=diag)


def _alternating(B, d, mu0, discount, state):
    """Two-timescale gradient descent on nu / ascent on zeta.

    Both updates are scaled by the inverse data frequency of each pair so
    rarely-seen pairs move at the same pace as common ones.
    """
    n = B.shape[0]
    warm = state.nu is not None and state.zeta is not None
    steps = state.zeta_steps if warm else state.pretrain_steps
    nu = state.nu.copy() if warm else np.zeros(n)
    zeta = state.zeta.copy() if warm else np.ones(n)
    seen = d > 0
    inv_d = np.where(seen, 1.0 / np.where(seen, d, 1.0), 0.0)
    scale = d.max() if seen.any() else 1.0
    rhs = (1 - discount) * mu0
    rng = np.random.default_rng(state.seed + state.steps_done)
    pairs = np.flatnonzero(seen)
    for _ in range(int(steps)):
        if state.batch_size:
            w = np.zeros(n)
            np.add.at(w, rng.choice(pairs, size=state.batch_size, p=d[pairs] / d[pairs].sum()), 1.0)
            w /= state.batch_size
        else:
            w = d
        resid = B @ nu
        zeta = np.maximum(zeta + state.lr_zeta * np.where(seen, resid - zeta, 0.0) * (w * inv_d), 0.0)
        grad_nu = B.T @ (w * zeta) - rhs
        nu = nu - state.lr_nu * grad_nu / scale
    zeta = np.where(seen, zeta, np.maximum(B @ nu, 0.0))
    diag = {"ridge": False, "ridge_lambda": 0.0,
            "residual": float(np.max(np.abs(B.T @ (d * (B @ nu)) - rhs)))}
    return replace(state, nu=nu, zeta=zeta, steps_done=state.steps_done + int(steps),
                   diagnostics=diag)


def omega_state_weights(state: DualDiceState, model: EmpiricalModel, target_policy=None) -> np.ndarray:
    """State weights ``omega(s) = sum_a beta_hat(a|s) zeta(s,a)`` over supported actions.

    When ``zeta`` equals the exact pair ratio this is exactly the state
    occupancy ratio ``d^pi(s) / d_D(s)`` times the policy's mass on
    supported actions, i.e. the ``pi``-expectation of
    ``zeta * beta_hat / pi``. Unvisited states get 0 (they carry no data
    weight downstream). ``target_policy`` is accepted for interface symmetry.
    """
    if state.zeta is None:
        raise ValueError("state has not been solved")
    S, A = model.num_states, model.num_actions
    zeta = state.zeta.reshape(S, A)
    omega = np.where(model.support_sa, model.beta_hat * zeta, 0.0).sum(axis=1)
    return np.where(model.visited, omega, 0.0)


def ratio_policy_value(state: DualDiceState, dataset: OfflineDataset) -> float:
    """Ratio-weighted mean reward ``(1/|D|) sum zeta(s,a) r``; divide by ``1 - gamma`` for a return."""
    if state.zeta is None:
        raise ValueError("state has not been solved")
    zeta = state.zeta[dataset.s * state.num_actions + dataset.a]
    return float(np.mean(zeta * dataset.r))


def exact_pair_ratios(mdp: TabularMdp, policy, model: EmpiricalModel) -> np.ndarray:
    """True normalised occupancy ``d^pi(s,a)`` over the data frequency; NaN on unseen pairs."""
    pi = as_probs(policy)
    d_pi = (exact_policy_values(mdp, pi).occupancy_norm[:, None] * pi).ravel()
    d = model.count_sa.ravel() / model.size
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(d > 0, d_pi / d, np.nan)


def zeta_to_csv(path, zeta: np.ndarray, num_actions: int) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["s", "a", "zeta"])
        for z, val in enumerate(zeta):
            w.writerow([z // num_actions, z % num_actions, repr(float(val))])


def omega_to_csv(path, omega: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["s", "omega"])
        for s, val in enumerate(omega):
            w.writerow([s, repr(float(val))])
