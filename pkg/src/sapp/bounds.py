"""Suboptimality upper bounds and executable checks of when state-aware pessimism wins.

For a penalty ``p`` (``Dis`` or ``f(w) Dis``) and every policy ``pi`` in a
class, with ``d`` the raw occupancy of ``pi`` in the empirical MDP and
``u`` its inverse-square-root count vector:

    INF = min_pi  subopt(pi) + <d, C0 u + alpha p>
    SUP = max_pi  <d, C0 u - alpha p>

and the bound on the suboptimality of the pessimistic policy is INF + SUP.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np

from .data import EmpiricalModel, inv_sqrt_counts
from .mdp import PolicyTable, TabularMdp, as_probs, exact_policy_values, optimal_policy
from .pessimism import (
    FTransform,
    PessimismSpec,
    PolicyClass,
    dis_vector,
    empirical_occupancy,
    enumerate_deterministic,
    evaluate_batch,
    one_hot_policies,
    optimize_policy,
    pessimistic_eval,
    raw_state_ratios,
)

PENALTY_KINDS = ("Dis", "SA-Dis", "f-SA-Dis")
CANDIDATE_POLICIES = 256


def c0_constant(delta: float, num_states: int, num_actions: int, policy_class_size: float,
                discount: float) -> float:
    """Concentration constant ``1/(1-gamma) * min(sqrt(ln(2SA/delta)/2), sqrt(ln(2S|Pi|/delta)/2))``."""
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    a = math.log(2 * num_states * num_actions / delta)
    b = math.log(2 * num_states * policy_class_size / delta) if np.isfinite(policy_class_size) else math.inf
    return math.sqrt(0.5 * max(min(a, b), 0.0)) / (1 - discount)


@dataclass(frozen=True)
class TheoremConstants:
    delta: float = 0.1
    eps_beta: float = 0.5
    eps_d: float = 0.5
    delta_beta: float = 1.0
    c_slack: float = 0.0
    alpha_prime: float = 0.0
    policy_class_size: float = math.inf

    def __post_init__(self):
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")
        if not (0 < self.eps_beta <= 1 and 0 < self.eps_d <= 1):
            raise ValueError("eps_beta and eps_d must lie in (0, 1]")
        if self.delta_beta <= 0 or self.c_slack < 0 or self.alpha_prime < 0:
            raise ValueError("delta_beta must be positive, c_slack and alpha_prime nonnegative")


@dataclass(frozen=True)
class BoundReport:
    c0: float
    inf_term: float
    sup_term: float
    total_ub: float
    true_subopt: float
    penalty_kind: str
    inf_policy: PolicyTable = field(repr=False)
    sup_policy: PolicyTable = field(repr=False)
    learned_policy: PolicyTable = field(repr=False)
    exact: bool = True

    def to_dict(self) -> dict:
        return {
            "c0": self.c0, "inf_term": self.inf_term, "sup_term": self.sup_term,
            "total_ub": self.total_ub, "true_subopt": self.true_subopt,
            "penalty_kind": self.penalty_kind, "exact": self.exact,
            "inf_policy": self.inf_policy.probs.tolist(),
            "sup_policy": self.sup_policy.probs.tolist(),
            "learned_policy": self.learned_policy.probs.tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def true_suboptimality(mdp: TabularMdp, policy) -> float:
    _, star = optimal_policy(mdp)
    gap = float(mdp.initial_dist @ (star.v - exact_policy_values(mdp, policy).v))
    return max(gap, 0.0) if gap > -1e-9 else gap


def _true_values(mdp: TabularMdp, probs: np.ndarray) -> np.ndarray:
    S, A = mdp.num_states, mdp.num_actions
    K = np.einsum("nsa,sat->nst", probs, mdp.transition.reshape(S, A, S))
    r = np.einsum("nsa,sa->ns", probs, mdp.reward.reshape(S, A))
    return np.linalg.solve(np.eye(S) - mdp.discount * K, r[..., None])[..., 0]


def penalty_kind(spec: PessimismSpec) -> str:
    if not spec.state_aware:
        return "Dis"
    return "SA-Dis" if spec.f.kind == "identity" else "f-SA-Dis"


def candidate_policies(model: EmpiricalModel, policy_class: PolicyClass, extra=()) -> np.ndarray:
    """Policies over which INF and SUP are taken, as an ``(N, S, A)`` array.

    Enumerable classes give every deterministic policy. Otherwise the set
    is the supplied extras, the empirical behaviour policy and random
    supported deterministic policies, so the reported INF can only be above
    the true infimum and the reported SUP only below the true supremum.
    """
    S, A = model.num_states, model.num_actions
    if policy_class.kind == "deterministic_enumeration":
        return one_hot_policies(enumerate_deterministic(S, A), A)
    if policy_class.steps <= 0 and not extra:
        raise ValueError("class is not enumerable and the optimiser budget is zero")
    rng = np.random.default_rng(policy_class.seed)
    allowed = model.support_sa | ~model.visited[:, None]
    weights = allowed / allowed.sum(axis=1, keepdims=True)
    acts = np.stack([[rng.choice(A, p=weights[s]) for s in range(S)]
                     for _ in range(CANDIDATE_POLICIES)])
    beta = np.where(allowed, model.beta_hat, 0.0)
    beta /= beta.sum(axis=1, keepdims=True)
    parts = [as_probs(p)[None] for p in extra] + [beta[None], one_hot_policies(acts, A)]
    return np.concatenate(parts)


@dataclass
class _Terms:
    """Per-policy pieces of the bound for one model and candidate set."""

    probs: np.ndarray
    d_raw: np.ndarray
    u: np.ndarray
    subopt: np.ndarray
    batch: object

    def inf_sup(self, spec: PessimismSpec, c0: float):
        p = self.batch.penalty(spec)
        unc = c0 * self.u
        inf_vals = self.subopt + np.einsum("ns,ns->n", self.d_raw, unc + spec.alpha * p)
        sup_vals = np.einsum("ns,ns->n", self.d_raw, unc - spec.alpha * p)
        return inf_vals, sup_vals


def _terms(mdp: TabularMdp, model: EmpiricalModel, probs: np.ndarray, spec: PessimismSpec,
           cap: float) -> _Terms:
    batch = evaluate_batch(model, probs, spec.dis)
    u = np.einsum("nsa,sa->ns", probs, inv_sqrt_counts(model, cap))
    _, star = optimal_policy(mdp)
    v_true = _true_values(mdp, probs)
    subopt = mdp.initial_dist @ star.v - v_true @ mdp.initial_dist
    return _Terms(probs=probs, d_raw=batch.d_raw, u=u, subopt=subopt, batch=batch)


def subopt_upper_bound(mdp: TabularMdp, model: EmpiricalModel, policy_class: PolicyClass,
                       spec: PessimismSpec, constants: TheoremConstants | None = None,
                       cap: float = 1.0, terms: _Terms | None = None) -> BoundReport:
    """Bound decomposition for the pessimistic policy under ``spec``.

    Needs the true MDP for the suboptimality inside INF, so this is a
    validation tool rather than something a learner could run.
    """
    constants = TheoremConstants() if constants is None else constants
    S, A = model.num_states, model.num_actions
    size = policy_class.size(S, A)
    c0 = c0_constant(constants.delta, S, A, size, model.discount)
    learned, _ = optimize_policy(model, spec, policy_class)
    if terms is None:
        probs = candidate_policies(model, policy_class, extra=(learned,))
        terms = _terms(mdp, model, probs, spec, cap)
    inf_vals, sup_vals = terms.inf_sup(spec, c0)
    i, j = int(np.argmin(inf_vals)), int(np.argmax(sup_vals))
    return BoundReport(
        c0=c0, inf_term=float(inf_vals[i]), sup_term=float(sup_vals[j]),
        total_ub=float(inf_vals[i] + sup_vals[j]), true_subopt=true_suboptimality(mdp, learned),
        penalty_kind=penalty_kind(spec), inf_policy=PolicyTable(terms.probs[i]),
        sup_policy=PolicyTable(terms.probs[j]), learned_policy=learned,
        exact=policy_class.kind == "deterministic_enumeration",
    )


def paired_reports(mdp, model, policy_class, spec: PessimismSpec, constants=None, cap=1.0):
    """Plain and state-aware reports sharing one candidate set."""
    plain = replace(spec, state_aware=False)
    sa = replace(spec, state_aware=True)
    learned, _ = optimize_policy(model, plain, policy_class)
    learned_sa, _ = optimize_policy(model, sa, policy_class)
    probs = candidate_policies(model, policy_class, extra=(learned, learned_sa))
    terms = _terms(mdp, model, probs, spec, cap)
    return (subopt_upper_bound(mdp, model, policy_class, plain, constants, cap, terms),
            subopt_upper_bound(mdp, model, policy_class, sa, constants, cap, terms))


# ---------------------------------------------------------------------------
# ordering of the two bounds


def _weighted_gap(model: EmpiricalModel, policy, spec: PessimismSpec) -> float:
    """``<d, (f(w) - 1) Dis>`` for one policy."""
    pi = as_probs(policy)
    batch = evaluate_batch(model, pi[None], spec.dis)
    w = spec.f(batch.ratios[0])
    return float(batch.d_raw[0] @ ((w - 1.0) * batch.dis[0]))


def ub_tolerance(*values: float) -> float:
    return 1e-9 * max(1.0, *(abs(v) for v in values))


def theorem2_check(report_dis: BoundReport, report_sa: BoundReport, model: EmpiricalModel,
                   spec: PessimismSpec) -> dict:
    """Compare the occupancy-weighted ratio excess at the two arg-policies.

    ``lhs`` uses the maximiser of SUP under the state-aware penalty, ``rhs``
    the minimiser of INF under the plain penalty. ``lhs >= rhs`` is
    sufficient for the state-aware bound to be the smaller one.
    """
    lhs = _weighted_gap(model, report_sa.sup_policy, spec)
    rhs = _weighted_gap(model, report_dis.inf_policy, spec)
    tol = ub_tolerance(lhs, rhs)
    return {
        "condition_holds": bool(lhs >= rhs - tol),
        "lhs": lhs,
        "rhs": rhs,
        "conclusion_holds": bool(
            report_sa.total_ub <= report_dis.total_ub + ub_tolerance(report_sa.total_ub, report_dis.total_ub)
        ),
        "ub_dis": report_dis.total_ub,
        "ub_sa": report_sa.total_ub,
    }


def shortest_supported_path_policy(model: EmpiricalModel, target: int) -> PolicyTable:
    """Deterministic policy following supported pairs along a shortest path to ``target``.

    States that cannot reach ``target`` (and ``target`` itself) play their most
    frequent data action.
    """
    S, A = model.num_states, model.num_actions
    P = model.p_hat.reshape(S, A, S)
    dist = np.full(S, np.inf)
    dist[target] = 0
    queue = deque([target])
    while queue:
        t = queue.popleft()
        for s in range(S):
            if np.isinf(dist[s]) and np.any(model.support_sa[s] & (P[s, :, t] > 0)):
                dist[s] = dist[t] + 1
                queue.append(s)
    actions = model.beta_hat.argmax(axis=1)
    for s in range(S):
        if s == target or np.isinf(dist[s]):
            continue
        best = [a for a in range(A)
                if model.support_sa[s, a] and np.any((P[s, a] > 0) & (dist == dist[s] - 1))]
        actions[s] = best[0]
    return PolicyTable.deterministic(actions, A)


def measure_constants(model: EmpiricalModel, spec: PessimismSpec, delta: float,
                      policy_class_size: float, pi_bar_2=None, alpha_prime: float | None = None,
                      s1: int | None = None) -> tuple[TheoremConstants, int, PolicyTable]:
    """Instance constants for the skewed-data condition, measured from the empirical model.

    Returns the constants, the rarest visited state ``s1`` and the
    reference policy that walks to it.
    """
    visited = np.flatnonzero(model.visited)
    if s1 is None:
        s1 = int(visited[np.argmin(model.d_data[visited])])
    eps_beta = float(model.beta_hat[model.support_sa].min())
    pi0 = shortest_supported_path_policy(model, s1)
    d0 = (1 - model.discount) * empirical_occupancy(model, pi0)
    eps_d = float(min(max(d0[s1], 1e-300), 1.0))
    dis0 = dis_vector(spec.dis, pi0, model.beta_hat, model.support)
    delta_beta = float(max(dis0[visited].max(), 1e-12))
    c = 0.0
    if pi_bar_2 is not None:
        w2 = spec.f(raw_state_ratios(model, pi_bar_2))
        c = float(max(w2.max() - 1.0, 0.0))
    c0 = c0_constant(delta, model.num_states, model.num_actions, policy_class_size, model.discount)
    if alpha_prime is None:
        alpha_prime = 0.5 * c0 * eps_d
    consts = TheoremConstants(delta=delta, eps_beta=eps_beta, eps_d=eps_d, delta_beta=delta_beta,
                              c_slack=c, alpha_prime=alpha_prime, policy_class_size=policy_class_size)
    return consts, s1, pi0


def theorem3_check(model: EmpiricalModel, constants: TheoremConstants, pi_bar_1, s1: int,
                   spec: PessimismSpec | None = None, f: FTransform | None = None) -> dict:
    """Evaluate the skewed-data condition at the rarest state ``s1``.

    ``lhs = C'_M (g(eps_beta / d_D(s1)) - sqrt(eps_beta)) Dis(pi_bar_1)(s1)`` with
    ``C_M = C0 eps_d - alpha' Delta_beta``, ``C'_M = C_M^2 / Delta_beta`` and ``g``
    the identity (or a pointwise ``f`` with ``f(x) >= sqrt(x)``). The
    condition is ``lhs > 1 + c``.
    """
    spec = PessimismSpec() if spec is None else spec
    c0 = c0_constant(constants.delta, model.num_states, model.num_actions,
                     constants.policy_class_size, model.discount)
    c_m = c0 * constants.eps_d - constants.alpha_prime * constants.delta_beta
    out = {"applicable": True, "condition_holds": False, "lhs": float("nan"),
           "c0": c0, "c_m": c_m, "rhs": 1.0 + constants.c_slack}
    if c_m <= 0:
        out.update(applicable=False, reason="C_M <= 0: alpha' too large for this instance")
        return out
    x = constants.eps_beta / model.d_data[s1]
    if f is not None and f.kind != "identity":
        visited = model.visited
        xs = constants.eps_beta / model.d_data[visited]
        if f.kind == "normalized_log" or not f.satisfies_sqrt_floor(xs):
            out.update(applicable=False, reason="f does not satisfy f(x) >= sqrt(x) pointwise")
            return out
        x = float(f(np.array([x]))[0])
    c_m_prime = c_m**2 / constants.delta_beta
    dis1 = dis_vector(spec.dis, pi_bar_1, model.beta_hat, model.support)[s1]
    lhs = c_m_prime * (x - math.sqrt(constants.eps_beta)) * dis1
    out.update(lhs=float(lhs), condition_holds=bool(lhs > 1.0 + constants.c_slack),
               c_m_prime=c_m_prime, dis_s1=float(dis1))
    return out


# ---------------------------------------------------------------------------
# clipping and underestimation


def large_alpha_threshold(model: EmpiricalModel, policies: np.ndarray, spec: PessimismSpec,
                          delta: float, policy_class_size: float) -> float:
    """``C0 * max (w Dis n_D(s)^-1/2)`` over the given policies and visited states.

    Policies with mass on unsupported actions at visited states are skipped:
    their penalty is dominated by the out-of-support term for any alpha of
    interest.
    """
    c0 = c0_constant(delta, model.num_states, model.num_actions, policy_class_size, model.discount)
    probs = np.asarray(policies, dtype=float).reshape(-1, model.num_states, model.num_actions)
    visited = model.visited
    inside = ~np.any((probs > 0) & ~model.support_sa[None] & visited[None, :, None], axis=(1, 2))
    if not inside.any():
        return math.inf
    batch = evaluate_batch(model, probs[inside], spec.dis)
    w = spec.f(batch.ratios) if spec.state_aware else np.ones_like(batch.ratios)
    n_inv = np.where(visited, 1.0 / np.sqrt(np.maximum(model.count_s, 1)), 0.0)
    return float(c0 * np.max((w * batch.dis * n_inv)[:, visited]))


def theorem4_clip_search(mdp: TabularMdp, model: EmpiricalModel, policy_class: PolicyClass,
                         spec_large_alpha: PessimismSpec, delta: float = 0.1, cap: float = 1.0,
                         grid_size: int = 64, bisection_steps: int = 40) -> dict:
    """Largest clipping level ``C`` whose clipped state-aware INF term is at most the plain one.

    Once alpha exceeds the large-alpha threshold the penalty cancels the
    overestimation side of the bound and only the INF term matters, so the
    search compares INF terms. Full bounds (INF + SUP) are reported too.
    ``clip_C`` is ``inf`` when no raw ratio exceeds 1 (clipping is inactive).
    """
    spec = replace(spec_large_alpha, state_aware=False)
    size = policy_class.size(model.num_states, model.num_actions)
    learned, _ = optimize_policy(model, spec, policy_class)
    probs = candidate_policies(model, policy_class, extra=(learned,))
    terms = _terms(mdp, model, probs, spec, cap)
    c0 = c0_constant(delta, model.num_states, model.num_actions, size, model.discount)
    threshold = large_alpha_threshold(
        model, probs, replace(spec, state_aware=True, f=FTransform("identity")), delta, size)
    inf_d, sup_d = terms.inf_sup(spec, c0)
    inf_dis = float(inf_d.min())

    def clipped(C):
        s = replace(spec, state_aware=True, f=FTransform("clip", clip_max=C))
        i, j = terms.inf_sup(s, c0)
        return float(i.min()), float(i.min() + j.max())

    def ok(C):
        v = clipped(C)[0]
        return v <= inf_dis + ub_tolerance(v, inf_dis)

    out = {"precondition_holds": bool(spec.alpha > threshold), "threshold": threshold,
           "inf_dis": inf_dis, "ub_dis": float(inf_dis + sup_d.max()),
           "clip_C": float("nan"), "inf_clipped_sa": float("nan"),
           "ub_clipped_sa": float("nan"), "found": False}
    top = float(np.max(terms.batch.ratios[:, model.visited])) if model.visited.any() else 1.0
    if top <= 1.0:
        inf_c, ub_c = clipped(1.0)
        out.update(clip_C=math.inf, inf_clipped_sa=inf_c, ub_clipped_sa=ub_c, found=True)
        return out
    if ok(top):
        lo = top
    else:
        grid = np.geomspace(1.0, top, grid_size)
        good = [C for C in grid if ok(C)]
        if not good:
            return out
        lo = max(good)
        hi = grid[min(int(np.searchsorted(grid, lo)) + 1, grid.size - 1)]
        for _ in range(bisection_steps):
            mid = 0.5 * (lo + hi)
            if ok(mid):
                lo = mid
            else:
                hi = mid
    inf_c, ub_c = clipped(lo)
    out.update(clip_C=float(lo), inf_clipped_sa=inf_c, ub_clipped_sa=ub_c, found=True)
    return out


def underestimation_check(mdp: TabularMdp, model: EmpiricalModel, policy, spec: PessimismSpec,
                          delta: float = 0.1, policy_class_size: float = math.inf,
                          cap: float = 1.0) -> dict:
    """Compare the pessimistic value with the true value on visited states."""
    pi = as_probs(policy)
    S, A = model.num_states, model.num_actions
    c0 = c0_constant(delta, S, A, policy_class_size, model.discount)
    v_hat = pessimistic_eval(model, pi, spec)
    v_true = exact_policy_values(mdp, pi).v
    dis = dis_vector(spec.dis, pi, model.beta_hat, model.support)
    w = spec.f(raw_state_ratios(model, pi)) if spec.state_aware else np.ones(S)
    u = np.einsum("sa,sa->s", pi, inv_sqrt_counts(model, cap))
    vis = model.visited
    tol = 1e-9
    pointwise = v_hat <= v_true - spec.alpha * w * dis + c0 * u + tol
    threshold = large_alpha_threshold(model, pi, spec, delta, policy_class_size)
    return {
        "pointwise_bound_holds": bool(np.all(pointwise[vis])),
        "large_alpha_applicable": bool(spec.alpha > threshold),
        "large_alpha_underestimates": bool(np.all(v_hat[vis] <= v_true[vis] + tol)),
        "threshold": threshold,
        "max_overestimate": float(np.max((v_hat - v_true)[vis])) if vis.any() else 0.0,
    }
