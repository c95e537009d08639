"""Tabular SA-CQL: state-weighted conservative Q-iteration with soft policy improvement."""

from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .data import EmpiricalModel, OfflineDataset, build_empirical_model
from .dice import DualDiceState, omega_state_weights, solve_dualdice
from .mdp import PolicyTable, TabularMdp, as_probs, expected_return
from .pessimism import FTransform, cql_action_penalty, raw_state_ratios

WEIGHT_MODES = ("exact_ratio", "dualdice", "constant_one", "random_uniform")
IMPROVEMENT_MODES = ("full", "mirror")
TRACE_COLUMNS = ["iter", "true_return", "est_return", "omega_min", "omega_mean", "omega_max"]


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 5.0
    f: FTransform = field(default_factory=lambda: FTransform("normalized_log", 0.5, 5.0))
    weight_mode: str = "exact_ratio"
    temperature: float = 0.1
    steps: int = 100
    q_steps: int = 10
    lr_q: float = 0.5
    improvement: str = "full"
    pi_steps: int = 1
    lr_pi: float = 1.0
    dice_solver: str = "closed_form"
    pretrain_steps: int = 20_000
    zeta_steps: int = 500
    out_of_support_penalty: float = 1e6
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be at least 1")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if self.weight_mode not in WEIGHT_MODES:
            raise ValueError(f"unknown weight_mode {self.weight_mode!r}; expected one of {WEIGHT_MODES}")
        if self.improvement not in IMPROVEMENT_MODES:
            raise ValueError(f"unknown improvement {self.improvement!r}")
        if self.alpha < 0:
            raise ValueError("alpha must be nonnegative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["f"] = {"kind": self.f.kind, "b0": self.f.b0, "b1": self.f.b1,
                  "clip_max": None if np.isinf(self.f.clip_max) else self.f.clip_max}
        return d

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        doc = dict(doc)
        if "f" in doc:
            f = dict(doc["f"])
            if f.get("clip_max") is None:
                f.pop("clip_max", None)
            doc["f"] = FTransform(**f)
        return cls(**doc)


def _softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _logsumexp(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1)
    return m + np.log(np.exp(x - m[:, None]).sum(axis=-1))


def sacql_q_step(q: np.ndarray, policy, model: EmpiricalModel, weights: np.ndarray,
                 alpha: float, out_of_support_penalty: float = 1e6) -> np.ndarray:
    """One synchronous state-weighted conservative backup of the whole Q-table.

    ``Q'(s,a) = r(s,a) + gamma P(s,a) A^pi Q - alpha w(s) (pi(a|s) - beta(a|s)) / beta(a|s)``
    on the substituted empirical MDP. Averaging ``Q'`` over ``pi`` gives the
    state-aware pessimistic value backup.
    """
    pi = as_probs(policy)
    S, A = pi.shape
    v = np.einsum("sa,sa->s", pi, np.asarray(q).reshape(S, A))
    backup = model.reward + model.discount * model.transition @ v
    pen = cql_action_penalty(pi, model.beta_hat, model.support, out_of_support_penalty)
    return backup - alpha * (np.asarray(weights)[:, None] * pen).ravel()


def td_target(q_prev: np.ndarray, policy, model: EmpiricalModel) -> np.ndarray:
    pi = as_probs(policy)
    S, A = pi.shape
    v = np.einsum("sa,sa->s", pi, np.asarray(q_prev).reshape(S, A))
    return model.reward + model.discount * model.transition @ v


def sacql_h_loss(q: np.ndarray, policy_k, model: EmpiricalModel, omega: np.ndarray,
                 alpha: float, q_target: np.ndarray | None = None):
    """Weighted logsumexp regulariser plus squared TD error, with its gradient.

    ``alpha sum_s d(s) omega(s) (logsumexp Q(s,.) - E_beta Q(s,.))
    + 1/2 sum_{s,a} d(s,a) (Q(s,a) - y(s,a))^2``, where the target
    ``y = r + gamma P A^{pi_k} Q_target`` is held fixed (``Q_target``
    defaults to ``q``).
    """
    S, A = model.num_states, model.num_actions
    Q = np.asarray(q, dtype=float).reshape(S, A)
    y = td_target(q if q_target is None else q_target, policy_k, model).reshape(S, A)
    d_s = model.d_data
    d_sa = model.count_sa / model.size
    beta = np.where(model.support_sa, model.beta_hat, 0.0)
    coef = alpha * d_s * np.asarray(omega, dtype=float)
    reg = _logsumexp(Q) - (beta * Q).sum(axis=1)
    resid = Q - y
    loss = float(coef @ reg + 0.5 * np.sum(d_sa * resid**2))
    grad = coef[:, None] * (_softmax(Q) - beta) + d_sa * resid
    return loss, grad.ravel()


def _curvature(q: np.ndarray, model: EmpiricalModel, omega: np.ndarray, alpha: float) -> np.ndarray:
    """Diagonal of the loss Hessian, used to precondition Q steps."""
    S, A = model.num_states, model.num_actions
    sm = _softmax(np.asarray(q).reshape(S, A))
    d_sa = model.count_sa / model.size
    h = alpha * (model.d_data * omega)[:, None] * sm * (1 - sm) + d_sa
    return h.ravel()


def policy_improvement_step(q: np.ndarray, policy, temperature: float,
                            eta_pi: float | None = None) -> PolicyTable:
    """Soft improvement toward ``softmax(Q / temperature)``.

    ``eta_pi=None`` jumps straight to the target; otherwise the logits take
    one mirror-ascent step ``logits += eta_pi (Q - temperature (log pi + 1))``.
    """
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    pi = as_probs(policy)
    Q = np.asarray(q, dtype=float).reshape(pi.shape)
    if eta_pi is None:
        return PolicyTable(_softmax(Q / temperature))
    logits = np.log(np.maximum(pi, 1e-300))
    logits = logits + eta_pi * (Q - temperature * (logits + 1.0))
    probs = _softmax(logits)
    return PolicyTable(probs / probs.sum(axis=1, keepdims=True))


def soft_objective(q: np.ndarray, policy, temperature: float) -> float:
    """``sum_s E_pi[Q] - temperature E_pi[log pi]``."""
    pi = as_probs(policy)
    Q = np.asarray(q, dtype=float).reshape(pi.shape)
    ent = np.where(pi > 0, pi * np.log(np.where(pi > 0, pi, 1.0)), 0.0)
    return float(np.sum(pi * Q) - temperature * np.sum(ent))


@dataclass
class TrainTrace:
    checkpoints: list[dict] = field(default_factory=list)
    final_policy: PolicyTable | None = field(default=None, repr=False)
    final_q: np.ndarray | None = field(default=None, repr=False)

    @property
    def final_return(self) -> float:
        return self.checkpoints[-1]["true_return"]

    def hashes(self) -> list[str]:
        return [c["q_hash"] for c in self.checkpoints]

    def to_csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for c in self.checkpoints:
            w.writerow([c["iter"]] + [repr(float(c[k])) for k in TRACE_COLUMNS[1:]])
        return buf.getvalue()

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv_text())

    def to_dict(self) -> dict:
        return {"checkpoints": self.checkpoints,
                "final_policy": None if self.final_policy is None else self.final_policy.probs.tolist()}

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=1)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text


class _WeightSource:
    """Produces the per-state weights for each outer iteration."""

    def __init__(self, config: TrainConfig, model: EmpiricalModel, dataset: OfflineDataset):
        self.config = config
        self.model = model
        self.dataset = dataset
        self.rng = np.random.default_rng(config.seed)
        self.dice = DualDiceState(solver=config.dice_solver, pretrain_steps=config.pretrain_steps,
                                  zeta_steps=config.zeta_steps, seed=config.seed)

    def __call__(self, pi: np.ndarray) -> np.ndarray:
        cfg, m = self.config, self.model
        if cfg.weight_mode == "constant_one":
            return np.ones(m.num_states)
        if cfg.weight_mode == "random_uniform":
            return self.rng.uniform(cfg.f.b0, cfg.f.b1, size=m.num_states)
        if cfg.weight_mode == "exact_ratio":
            return cfg.f(raw_state_ratios(m, pi))
        self.dice = solve_dualdice(self.dataset, pi, m.discount, m.initial_dist, self.dice)
        omega = omega_state_weights(self.dice, m, pi)
        return np.where(m.visited, cfg.f(omega), 0.0)


def initial_q(model: EmpiricalModel) -> np.ndarray:
    """Zero on supported pairs and the worst possible value elsewhere."""
    return np.where(model.support, 0.0, -1.0 / (1 - model.discount))


def initial_policy(model: EmpiricalModel) -> PolicyTable:
    return PolicyTable(model.beta_hat)


def train(mdp_for_eval: TabularMdp, dataset: OfflineDataset, config: TrainConfig,
          initial_dist=None) -> TrainTrace:
    """Alternate weight estimation, conservative Q regression and soft improvement.

    ``mdp_for_eval`` only scores checkpoints; the learner sees the dataset
    alone. ``initial_dist`` defaults to the dataset's episode-start states.
    """
    S, A = mdp_for_eval.num_states, mdp_for_eval.num_actions
    dataset.check_bounds(S, A)
    model = build_empirical_model(dataset, S, A, mdp_for_eval.discount, initial_dist)
    if not model.visited.any():
        raise ValueError("dataset visits no state")
    weights_for = _WeightSource(config, model, dataset)
    q = initial_q(model)
    pi = initial_policy(model)
    every = max(1, config.steps // 10)
    trace = TrainTrace()
    for k in range(1, config.steps + 1):
        w = weights_for(pi.probs)
        q_prev = q.copy()
        for _ in range(config.q_steps):
            _, g = sacql_h_loss(q, pi, model, w, config.alpha, q_target=q_prev)
            h = _curvature(q, model, w, config.alpha)
            step = np.where(h > 0, g / np.where(h > 0, h, 1.0), 0.0)
            q = q - config.lr_q * step
        if config.improvement == "full":
            pi = policy_improvement_step(q, pi, config.temperature)
        else:
            for _ in range(config.pi_steps):
                pi = policy_improvement_step(q, pi, config.temperature, config.lr_pi)
        if k % every == 0 or k == config.steps:
            trace.checkpoints.append(_checkpoint(k, q, pi, w, model, mdp_for_eval))
    trace.final_policy, trace.final_q = pi, q
    return trace


def _checkpoint(k, q, pi, w, model, mdp):
    S, A = model.num_states, model.num_actions
    v_est = np.einsum("sa,sa->s", pi.probs, q.reshape(S, A))
    vis = w[model.visited] if model.visited.any() else w
    return {
        "iter": k,
        "q_hash": hashlib.sha256(np.ascontiguousarray(q).tobytes()).hexdigest(),
        "true_return": expected_return(mdp, pi),
        "est_return": float(model.initial_dist @ v_est),
        "omega_min": float(vis.min()),
        "omega_mean": float(vis.mean()),
        "omega_max": float(vis.max()),
    }
