"""Proximal pessimism: policy distances, state-aware weights, pessimistic evaluation.

A pessimistic evaluation of ``pi`` on the empirical model is the unique
solution of ``v = A^pi (r_hat + gamma P_hat v) - alpha * p`` where the
penalty ``p`` is either the distance vector ``Dis(pi, beta_hat)`` or the
state-aware ``f(w) * Dis`` with ``w`` the ratio between the policy's
discounted state occupancy in the empirical MDP and the data's state
distribution.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace

import numpy as np

from .data import EmpiricalModel
from .mdp import PolicyTable, as_probs, solve_values

DIS_KINDS = ("CQL", "TV", "KL")
F_KINDS = ("identity", "normalized_log", "clip")
CLASS_KINDS = ("deterministic_enumeration", "epsilon_supported_softmax")
MAX_ENUMERATION = 10**6


@dataclass(frozen=True)
class DisSpec:
    kind: str = "CQL"
    out_of_support_penalty: float = 1e6

    def __post_init__(self):
        if self.kind not in DIS_KINDS:
            raise ValueError(f"unknown distance kind {self.kind!r}; expected one of {DIS_KINDS}")
        if not self.out_of_support_penalty > 0:
            raise ValueError("out_of_support_penalty must be positive")


@dataclass(frozen=True)
class FTransform:
    """Monotone reshaping of raw state ratios.

    ``normalized_log`` maps the positive entries of a ratio vector affinely in
    log-space onto ``[b0, b1]``; zero entries map to ``b0`` and a constant
    vector maps to the midpoint.
    """

    kind: str = "identity"
    b0: float = 0.5
    b1: float = 5.0
    clip_max: float = np.inf

    def __post_init__(self):
        if self.kind not in F_KINDS:
            raise ValueError(f"unknown f kind {self.kind!r}; expected one of {F_KINDS}")
        if self.b1 < self.b0:
            raise ValueError("b1 must be >= b0")
        if not self.clip_max > 0:
            raise ValueError("clip_max must be positive")

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.kind == "identity":
            return x.copy()
        if self.kind == "clip":
            return np.minimum(x, self.clip_max)
        return self._normalized_log(x)

    def _normalized_log(self, x: np.ndarray) -> np.ndarray:
        pos = x > 0
        big = np.where(pos, x, np.inf)
        lo = big.min(axis=-1, keepdims=True)
        hi = np.where(pos, x, 0.0).max(axis=-1, keepdims=True)
        # ratios to the minimum keep the map exactly invariant under power-of-two rescaling
        with np.errstate(divide="ignore", invalid="ignore"):
            span = np.log(hi / lo)
            frac = np.log(np.where(pos, x, lo) / lo) / span
        frac = np.where(span > 0, frac, 0.5)
        out = self.b0 + (self.b1 - self.b0) * frac
        return np.where(pos, out, self.b0)

    def jacobian(self, x: np.ndarray) -> np.ndarray:
        """``d f(x)_s / d x_t`` for a single ratio vector (S x S)."""
        x = np.asarray(x, dtype=float)
        n = x.size
        if self.kind == "identity":
            return np.eye(n)
        if self.kind == "clip":
            return np.diag((x < self.clip_max).astype(float))
        pos = x > 0
        J = np.zeros((n, n))
        if pos.sum() < 2:
            return J
        idx = np.flatnonzero(pos)
        i_lo = idx[np.argmin(x[idx])]
        i_hi = idx[np.argmax(x[idx])]
        span = np.log(x[i_hi] / x[i_lo])
        if span <= 0:
            return J
        scale = self.b1 - self.b0
        ell = np.zeros(n)
        ell[idx] = np.log(x[idx] / x[i_lo])
        for s in idx:
            row = np.zeros(n)
            row[s] += 1.0 / span
            row[i_lo] -= 1.0 / span
            row[i_hi] -= ell[s] / span**2
            row[i_lo] += ell[s] / span**2
            J[s] = scale * row / np.where(x > 0, x, 1.0)
        return J

    def satisfies_sqrt_floor(self, x: np.ndarray) -> bool:
        """Whether ``f(x) >= sqrt(x)`` on every entry of ``x``."""
        x = np.asarray(x, dtype=float)
        return bool(np.all(self(x) >= np.sqrt(np.maximum(x, 0.0)) - 1e-12))


@dataclass(frozen=True)
class PessimismSpec:
    dis: DisSpec = field(default_factory=DisSpec)
    alpha: float = 5.0
    state_aware: bool = False
    f: FTransform = field(default_factory=FTransform)

    def __post_init__(self):
        if not (np.isfinite(self.alpha) and self.alpha >= 0):
            raise ValueError("alpha must be finite and nonnegative")

    def to_dict(self) -> dict:
        return {
            "dis": {"kind": self.dis.kind, "out_of_support_penalty": self.dis.out_of_support_penalty},
            "alpha": self.alpha,
            "state_aware": self.state_aware,
            "f": {"kind": self.f.kind, "b0": self.f.b0, "b1": self.f.b1,
                  "clip_max": None if np.isinf(self.f.clip_max) else self.f.clip_max},
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "PessimismSpec":
        f = dict(doc.get("f", {}))
        if f.get("clip_max") is None:
            f.pop("clip_max", None)
        return cls(dis=DisSpec(**doc.get("dis", {})), alpha=doc.get("alpha", 5.0),
                   state_aware=doc.get("state_aware", False), f=FTransform(**f))


@dataclass(frozen=True)
class PolicyClass:
    kind: str = "deterministic_enumeration"
    epsilon_beta: float = 0.05
    steps: int = 2000
    learning_rate: float = 0.05
    restarts: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.kind not in CLASS_KINDS:
            raise ValueError(f"unknown policy class {self.kind!r}")
        if not 0 < self.epsilon_beta < 1:
            raise ValueError("epsilon_beta must lie in (0, 1)")

    def size(self, num_states: int, num_actions: int) -> float:
        if self.kind == "deterministic_enumeration":
            return float(num_actions) ** num_states
        return np.inf


# ---------------------------------------------------------------------------
# distances


def _masked_beta(beta_hat, support_mask):
    beta = np.asarray(beta_hat, dtype=float)
    supp = np.asarray(support_mask, dtype=bool).reshape(beta.shape[-2:])
    return np.where(supp, beta, 0.0), supp


def dis_vector(spec: DisSpec, policy, beta_hat, support_mask) -> np.ndarray:
    """State-wise distance between ``policy`` and ``beta_hat``.

    Probability mass on unsupported actions costs ``out_of_support_penalty``
    per unit. Accepts a leading batch axis on ``policy``.
    """
    pi = as_probs(policy)
    beta, supp = _masked_beta(beta_hat, support_mask)
    mass_out = np.where(supp, 0.0, pi).sum(axis=-1)
    safe = np.where(supp, beta, 1.0)
    if spec.kind == "CQL":
        core = np.where(supp, pi**2 / safe, 0.0).sum(axis=-1) - 1.0
    elif spec.kind == "TV":
        core = 0.5 * np.abs(pi - beta).sum(axis=-1)
    else:
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(supp & (pi > 0), pi * np.log(pi / safe), 0.0)
        core = terms.sum(axis=-1)
    return np.maximum(core + spec.out_of_support_penalty * mass_out, 0.0)


def dis_gradient(spec: DisSpec, policy, beta_hat, support_mask) -> np.ndarray:
    """Partial derivatives ``d Dis(s) / d pi(a|s)`` (same shape as the policy)."""
    pi = as_probs(policy)
    beta, supp = _masked_beta(beta_hat, support_mask)
    P = spec.out_of_support_penalty
    safe = np.where(supp, beta, 1.0)
    if spec.kind == "CQL":
        inner = 2.0 * pi / safe
    elif spec.kind == "TV":
        inner = 0.5 * np.sign(pi - beta)
    else:
        inner = np.log(np.maximum(pi, 1e-300) / safe) + 1.0
    outer = P + (0.5 if spec.kind == "TV" else 0.0)
    return np.where(supp, inner, outer)


def cql_action_penalty(policy, beta_hat, support_mask, out_of_support_penalty=1e6) -> np.ndarray:
    """Per-action CQL penalty ``(pi - beta)/beta``; its ``pi``-average is ``Dis-CQL``.

    Unsupported actions get ``penalty - 1`` so the average still matches.
    """
    pi = as_probs(policy)
    beta, supp = _masked_beta(beta_hat, support_mask)
    safe = np.where(supp, beta, 1.0)
    return np.where(supp, (pi - beta) / safe, out_of_support_penalty - 1.0)


# ---------------------------------------------------------------------------
# state-aware weights


def data_floor(model: EmpiricalModel) -> np.ndarray:
    """State distribution of the data with never-visited states floored at half a count."""
    return np.where(model.count_s > 0, model.d_data, 0.5 / model.size)


def empirical_occupancy(model: EmpiricalModel, policy, initial_dist=None) -> np.ndarray:
    """Raw discounted occupancy of ``policy`` in the (substituted) empirical MDP."""
    pi = as_probs(policy)
    rho = model.initial_dist if initial_dist is None else np.asarray(initial_dist, dtype=float)
    S = model.num_states
    K = np.einsum("...sa,sat->...st", pi, model.transition.reshape(S, -1, S))
    M = np.eye(S) - model.discount * K
    return np.linalg.solve(np.swapaxes(M, -1, -2), np.broadcast_to(rho, M.shape[:-1])[..., None])[..., 0]


def raw_state_ratios(model: EmpiricalModel, policy, initial_dist=None) -> np.ndarray:
    d_norm = (1 - model.discount) * empirical_occupancy(model, policy, initial_dist)
    return d_norm / data_floor(model)


def state_aware_weights(model: EmpiricalModel, policy, initial_dist=None,
                        f: FTransform | None = None) -> np.ndarray:
    f = FTransform() if f is None else f
    return f(raw_state_ratios(model, policy, initial_dist))


# ---------------------------------------------------------------------------
# pessimistic evaluation


def penalty_vector(model: EmpiricalModel, policy, spec: PessimismSpec) -> np.ndarray:
    """The state-wise penalty ``Dis`` or ``f(w) * Dis`` (before scaling by alpha)."""
    dis = dis_vector(spec.dis, policy, model.beta_hat, model.support)
    if not spec.state_aware:
        return dis
    return state_aware_weights(model, policy, f=spec.f) * dis


def pessimistic_eval(model: EmpiricalModel, policy, spec: PessimismSpec) -> np.ndarray:
    pi = as_probs(policy)
    p = penalty_vector(model, pi, spec)
    return solve_values(model.transition, model.reward, pi, model.discount, spec.alpha * p)


def proximal_eval(model: EmpiricalModel, policy, spec: PessimismSpec) -> np.ndarray:
    """Fixed point of ``v = A^pi (r_hat + gamma P_hat v) - alpha Dis(pi, beta_hat)``."""
    return pessimistic_eval(model, policy, replace(spec, state_aware=False))


def sa_proximal_eval(model: EmpiricalModel, policy, spec: PessimismSpec) -> np.ndarray:
    """Fixed point with the state-aware penalty ``alpha f(w) Dis``."""
    return pessimistic_eval(model, policy, replace(spec, state_aware=True))


# ---------------------------------------------------------------------------
# batched evaluation of many policies


def enumerate_deterministic(num_states: int, num_actions: int) -> np.ndarray:
    """All deterministic policies as an ``(A**S, S)`` array of action indices."""
    n = num_actions**num_states
    if n > MAX_ENUMERATION:
        raise ValueError(
            f"{n} deterministic policies exceed the enumeration limit {MAX_ENUMERATION}; "
            "use the epsilon_supported_softmax policy class"
        )
    return np.array(list(itertools.product(range(num_actions), repeat=num_states)), dtype=np.int64)


def one_hot_policies(actions: np.ndarray, num_actions: int) -> np.ndarray:
    out = np.zeros(actions.shape + (num_actions,))
    np.put_along_axis(out, actions[..., None], 1.0, axis=-1)
    return out


@dataclass
class BatchEvaluation:
    """Per-policy quantities for a batch of policies on one empirical model."""

    probs: np.ndarray        # (N, S, A)
    d_raw: np.ndarray        # (N, S) occupancy in the empirical MDP
    ratios: np.ndarray       # (N, S) raw normalised-occupancy / data ratios
    dis: np.ndarray          # (N, S)
    r_pi: np.ndarray         # (N, S) policy-averaged empirical rewards
    kernel: np.ndarray       # (N, S, S)

    def weights(self, f: FTransform) -> np.ndarray:
        return f(self.ratios)

    def penalty(self, spec: PessimismSpec) -> np.ndarray:
        if spec.state_aware:
            return spec.f(self.ratios) * self.dis
        return self.dis

    def values(self, spec: PessimismSpec, gamma: float) -> np.ndarray:
        S = self.dis.shape[-1]
        b = self.r_pi - spec.alpha * self.penalty(spec)
        return np.linalg.solve(np.eye(S) - gamma * self.kernel, b[..., None])[..., 0]


def evaluate_batch(model: EmpiricalModel, probs: np.ndarray, dis: DisSpec) -> BatchEvaluation:
    S, A = model.num_states, model.num_actions
    P3 = model.transition.reshape(S, A, S)
    K = np.einsum("nsa,sat->nst", probs, P3)
    r_pi = np.einsum("nsa,sa->ns", probs, model.reward.reshape(S, A))
    M = np.eye(S) - model.discount * K
    rho = np.broadcast_to(model.initial_dist, (probs.shape[0], S))[..., None]
    d_raw = np.linalg.solve(np.swapaxes(M, -1, -2), rho)[..., 0]
    ratios = (1 - model.discount) * d_raw / data_floor(model)
    d = dis_vector(dis, probs, model.beta_hat, model.support)
    return BatchEvaluation(probs=probs, d_raw=d_raw, ratios=ratios, dis=d, r_pi=r_pi, kernel=K)


# ---------------------------------------------------------------------------
# policy optimisation


def objective_and_gradient(model: EmpiricalModel, probs: np.ndarray, spec: PessimismSpec,
                           initial_dist=None):
    """``<rho, v>`` of the pessimistic evaluation and its gradient in ``pi``.

    The gradient comes from the adjoint of the linear Bellman system; for
    the state-aware penalty a second adjoint solve carries the dependence
    of the occupancy ratio on the policy.
    """
    S, A = model.num_states, model.num_actions
    g = model.discount
    rho = model.initial_dist if initial_dist is None else np.asarray(initial_dist, dtype=float)
    P = model.transition
    K = np.einsum("sa,sat->st", probs, P.reshape(S, A, S))
    M = np.eye(S) - g * K
    dis = dis_vector(spec.dis, probs, model.beta_hat, model.support)
    ddis = dis_gradient(spec.dis, probs, model.beta_hat, model.support)
    lam = np.linalg.solve(M.T, rho)  # raw occupancy from rho
    if spec.state_aware:
        dD = data_floor(model)
        x = (1 - g) * np.linalg.solve(M.T, model.initial_dist) / dD
        fx = spec.f(x)
    else:
        fx = np.ones(S)
    r_pi = np.einsum("sa,sa->s", probs, model.reward.reshape(S, A))
    v = np.linalg.solve(M, r_pi - spec.alpha * fx * dis)
    q = (model.reward + g * P @ v).reshape(S, A)
    grad = lam[:, None] * (q - spec.alpha * fx[:, None] * ddis)
    if spec.state_aware and spec.alpha > 0:
        lam_w = np.linalg.solve(M.T, model.initial_dist)
        gp = (1 - g) * (spec.f.jacobian(x).T @ (lam * dis)) / dD
        h = np.linalg.solve(M, gp)
        grad -= spec.alpha * g * lam_w[:, None] * (P @ h).reshape(S, A)
    return float(rho @ v), grad


def _softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _softmax_ascent(model, spec, policy_class, initial_dist):
    S, A = model.num_states, model.num_actions
    allowed = model.support_sa | ~model.visited[:, None]
    seeds = np.random.SeedSequence(policy_class.seed).spawn(policy_class.restarts)
    best_val, best_probs = -np.inf, None
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    for ss in seeds:
        rng = np.random.default_rng(ss)
        theta = rng.normal(size=(S, A))
        m = np.zeros_like(theta)
        vv = np.zeros_like(theta)
        for t in range(1, policy_class.steps + 1):
            probs = _softmax(np.where(allowed, theta, -np.inf))
            _, gpi = objective_and_gradient(model, probs, spec, initial_dist)
            gtheta = probs * (gpi - (probs * gpi).sum(axis=1, keepdims=True))
            m = beta1 * m + (1 - beta1) * gtheta
            vv = beta2 * vv + (1 - beta2) * gtheta**2
            theta = theta + policy_class.learning_rate * (m / (1 - beta1**t)) / (
                np.sqrt(vv / (1 - beta2**t)) + eps)
        probs = _softmax(np.where(allowed, theta, -np.inf))
        val, _ = objective_and_gradient(model, probs, spec, initial_dist)
        if val > best_val:
            best_val, best_probs = val, probs
    return best_probs, best_val


def optimize_policy(model: EmpiricalModel, spec: PessimismSpec, policy_class: PolicyClass,
                    initial_dist=None) -> tuple[PolicyTable, float]:
    """Maximise ``<rho, v>`` of the pessimistic evaluation over a policy class."""
    if policy_class.kind == "deterministic_enumeration":
        if model.num_actions**model.num_states > MAX_ENUMERATION:
            raise ValueError(
                "policy class too large to enumerate; use epsilon_supported_softmax instead")
        if initial_dist is not None:
            model = replace(model, initial_dist=np.asarray(initial_dist, dtype=float))
        acts = enumerate_deterministic(model.num_states, model.num_actions)
        best_val, best = -np.inf, None
        for lo in range(0, len(acts), 4096):
            probs = one_hot_policies(acts[lo:lo + 4096], model.num_actions)
            batch = evaluate_batch(model, probs, spec.dis)
            vals = batch.values(spec, model.discount) @ model.initial_dist
            i = int(np.argmax(vals))
            if vals[i] > best_val:
                best_val, best = float(vals[i]), probs[i]
        policy = PolicyTable(best)
    else:
        probs, _ = _softmax_ascent(model, spec, policy_class, initial_dist)
        policy = PolicyTable(probs / probs.sum(axis=1, keepdims=True))
    rho = model.initial_dist if initial_dist is None else np.asarray(initial_dist, dtype=float)
    value = float(rho @ pessimistic_eval(model, policy, spec))
    return policy, value
