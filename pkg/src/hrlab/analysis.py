"""Exact evaluation of every theoretical quantity: the three-term
suboptimality split, the primitive and representation error terms, the
concentrability coefficient, the headline bound, the TV-coupling bound
checker, and the action-similarity map.

Everything here is deterministic linear algebra on known kernels; sampling
noise never enters. The coupling audits are stated for state-indexed rewards
(rewards equal across actions at each state): with action-dependent rewards a
one-state counterexample breaks the TV argument, so the audit helpers refuse
such inputs.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import eigh, solve

from .mdp_core import (
    HyperMDP,
    LinearTabularMDP,
    PolicyTable,
    build_hyper_mdp,
    exact_value_iteration,
    policy_value,
)
from .pevi import compute_beta_schedule

AUDIT_ATOL = 1e-10


def tv_distance(p: np.ndarray, q: np.ndarray) -> float:
    """Half the L1 distance between two distributions."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError("distributions must have the same length")
    if abs(p.sum() - 1.0) > 1e-6 or abs(q.sum() - 1.0) > 1e-6:
        raise ValueError("inputs must sum to 1")
    return 0.5 * float(np.abs(p - q).sum())


def primitive_error_bound(policy_class_size: int, delta: float, N: int) -> float:
    """sqrt(ln(|class|/delta) / N), the finite-class estimation rate."""
    if policy_class_size < 1:
        raise ValueError("policy class size must be >= 1")
    if N < 1:
        raise ValueError("N must be >= 1")
    if not 0.0 < delta < 1.0:
        raise ValueError("delta must be in (0, 1)")
    return math.sqrt(math.log(policy_class_size / delta) / N)


def discounted_visitation(kernel: np.ndarray, gamma: float, init: np.ndarray) -> np.ndarray:
    """Normalized occupancy (1-gamma) sum_t gamma^t P(s_t = s) under a fixed
    state-to-state kernel."""
    kernel = np.asarray(kernel, dtype=np.float64)
    init = np.asarray(init, dtype=np.float64)
    S = len(init)
    d = (1.0 - gamma) * solve(np.eye(S) - gamma * kernel.T, init)
    return np.maximum(d, 0.0)


def _policy_state_kernel(kernel: np.ndarray, probs: np.ndarray) -> np.ndarray:
    return np.einsum("sa,sat->st", probs, kernel)


def representation_error(
    mdp: LinearTabularMDP,
    behavior,
    policy_class: list,
    c: int,
) -> tuple[float, np.ndarray]:
    """Worst multi-step TV between each class policy and its closest skill.

    The skill assignment Omega(s, pi) greedily minimizes the one-step TV
    (ties to the lowest skill). The error aggregates, for each policy, the
    k-step row TV between the held policy and the held assigned skill,
    weighted by the policy's window-start visitation, maximized over the
    class and over k in [1, c].
    """
    if not policy_class:
        raise ValueError("policy class must be nonempty")
    if c < 1:
        raise ValueError("skill length c must be >= 1")
    P = mdp.kernel()
    S = mdp.num_states
    skill_kernels = np.einsum("ska,sat->skt", behavior.action_table, P)
    sk = np.ascontiguousarray(skill_kernels.transpose(1, 0, 2))
    omega_table = np.zeros((S, len(policy_class)), dtype=np.int64)
    eps = 0.0
    for j, pi in enumerate(policy_class):
        probs = pi.probs if isinstance(pi, PolicyTable) else np.asarray(pi, dtype=np.float64)
        P_pi = _policy_state_kernel(P, probs)
        tv_rows = 0.5 * np.abs(P_pi[:, None, :] - skill_kernels).sum(axis=2)
        assign = np.argmin(tv_rows, axis=1)
        omega_table[:, j] = assign
        d = discounted_visitation(np.linalg.matrix_power(P_pi, c), mdp.gamma**c, mdp.mu0)
        Pk = P_pi
        Bk = sk
        for k in range(1, c + 1):
            if k > 1:
                Pk = Pk @ P_pi
                Bk = np.einsum("zst,ztu->zsu", Bk, sk)
            rows = Bk[assign, np.arange(S), :]
            eps_k = 0.5 * np.abs(Pk - rows).sum(axis=1)
            eps = max(eps, float(d @ eps_k))
    return eps, omega_table


def max_generalized_eigenvalue(A: np.ndarray, B: np.ndarray) -> float:
    """sup_x x'Ax / x'Bx for symmetric PSD A, B; inf when A has mass outside
    range(B)."""
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    w, U = eigh(B)
    scale = max(float(w[-1]), 0.0)
    live = w > scale * 1e-12 if scale > 0 else np.zeros_like(w, dtype=bool)
    null = U[:, ~live]
    a_scale = max(float(np.abs(A).max()), 1e-30)
    if null.shape[1] and float(np.abs(null.T @ A @ null).max()) > 1e-10 * a_scale:
        return math.inf
    if not live.any():
        return 0.0
    W = U[:, live] / np.sqrt(w[live])
    return max(0.0, float(eigh(W.T @ A @ W, eigvals_only=True)[-1]))


def concentration_coefficient(D_hi, hyper, pi_star_beta: PolicyTable) -> float:
    """Worst covariance ratio between the optimum's visitation features and
    the dataset features, over anchor states with initial mass."""
    if len(D_hi) == 0:
        raise ValueError("dataset must be nonempty")
    phi = hyper.phi_c
    F = phi[np.asarray(D_hi.s0, dtype=np.int64), np.asarray(D_hi.z, dtype=np.int64)]
    sigma_d = F.T @ F / len(D_hi)
    probs = pi_star_beta.probs
    second_moment = np.einsum("sk,skd,ske->sde", probs, phi, phi)
    P_pi = _policy_state_kernel(hyper.kernel(), probs)
    worst = 0.0
    for s in np.flatnonzero(hyper.mu0 > 0.0):
        e_s = np.zeros(len(hyper.mu0))
        e_s[s] = 1.0
        d = discounted_visitation(P_pi, hyper.gamma_eff, e_s)
        sigma_pi = np.einsum("s,sde->de", d, second_moment)
        worst = max(worst, max_generalized_eigenvalue(sigma_pi, sigma_d))
        if math.isinf(worst):
            break
    return worst


@dataclass
class BoundInputs:
    """Everything the headline bound consumes."""

    eps_theta: float
    eps_omega: float
    c_dagger: float
    d: int
    N: int
    c: int
    gamma: float
    r_max: float
    delta: float
    C: float
    zeta: float

    def validate(self) -> None:
        if self.eps_theta < 0 or self.eps_omega < 0:
            raise ValueError("error terms must be nonnegative")
        if not (math.isinf(self.c_dagger) or self.c_dagger >= 1.0 - 1e-9):
            raise ValueError("concentrability coefficient must be >= 1 or infinite")
        want = compute_beta_schedule(
            self.d, self.N, self.gamma, self.c, self.delta, C=max(self.C, 0.0), r_max=self.r_max
        ).zeta
        if abs(self.zeta - want) > 1e-9 * max(1.0, abs(want)):
            raise ValueError("zeta inconsistent with the concentration schedule")

    def to_json(self) -> str:
        return json.dumps({k: getattr(self, k) for k in self.__dataclass_fields__})


def make_bound_inputs(
    d: int,
    N: int,
    gamma: float,
    c: int,
    delta: float,
    C: float,
    eps_theta: float,
    eps_omega: float,
    c_dagger: float,
    r_max: float = 1.0,
) -> BoundInputs:
    zeta = compute_beta_schedule(d, N, gamma, c, delta, C=max(C, 1e-12), r_max=r_max).zeta
    inputs = BoundInputs(
        eps_theta=eps_theta, eps_omega=eps_omega, c_dagger=c_dagger,
        d=d, N=N, c=c, gamma=gamma, r_max=r_max, delta=delta, C=C, zeta=zeta,
    )
    inputs.validate()
    return inputs


def theorem1_bound(inputs: BoundInputs) -> float:
    """Offline term plus the skill-mismatch term, both on the window horizon."""
    inputs.validate()
    if math.isinf(inputs.c_dagger):
        raise ValueError("bound is undefined for an infinite concentrability coefficient")
    denom = (1.0 - inputs.gamma) * (1.0 - inputs.gamma**inputs.c)
    offline = (
        2.0 * inputs.C * inputs.r_max / denom
        * math.sqrt(inputs.c_dagger * inputs.d**3 * inputs.zeta / inputs.N)
    )
    mismatch = (
        inputs.gamma * inputs.c * (inputs.c + 1) * inputs.r_max / denom
        * (inputs.eps_omega + inputs.eps_theta)
    )
    return offline + mismatch


@dataclass
class DecompositionReport:
    """Three-term split of the learned policy's suboptimality."""

    primitive_error: float
    offline_error: float
    representation_error: float
    total_subopt: float
    j_hat_theta: float
    j_hat_beta: float
    j_star_beta: float
    j_star: float

    def to_json(self) -> str:
        return json.dumps({k: getattr(self, k) for k in self.__dataclass_fields__})


def _as_behavior(low):
    return low.as_behavior() if hasattr(low, "as_behavior") else low


def suboptimality_decomposition(
    mdp: LinearTabularMDP,
    hyper: HyperMDP,
    learned_low,
    pevi_policy: PolicyTable,
) -> DecompositionReport:
    """Split J(pi*) - J(learned hierarchy) into primitive / offline /
    representation terms via the two intermediate hierarchical optima.

    ``hyper`` must be built from the true data-collection primitive;
    ``learned_low`` is the fitted one.
    """
    low = _as_behavior(learned_low)
    hyper_theta = build_hyper_mdp(mdp, low, hyper.c)
    _, pi_star = exact_value_iteration(mdp)
    j_star = policy_value(mdp, pi_star)
    _, pi_star_beta = exact_value_iteration(hyper)
    j_star_beta = policy_value(hyper, pi_star_beta)
    j_hat_beta = policy_value(hyper, pevi_policy)
    j_hat_theta = policy_value(hyper_theta, pevi_policy)
    return DecompositionReport(
        primitive_error=j_hat_beta - j_hat_theta,
        offline_error=j_star_beta - j_hat_beta,
        representation_error=j_star - j_star_beta,
        total_subopt=j_star - j_hat_theta,
        j_hat_theta=j_hat_theta,
        j_hat_beta=j_hat_beta,
        j_star_beta=j_star_beta,
        j_star=j_star,
    )


# ---------------------------------------------------------------------------
# TV-coupling bound checker
# ---------------------------------------------------------------------------


@dataclass
class TvInstance:
    """Two uncontrolled chains sharing a state reward vector."""

    P1: np.ndarray
    P2: np.ndarray
    rewards: np.ndarray
    gamma: float
    c: int
    init_state: int

    def validate(self) -> None:
        for P in (self.P1, self.P2):
            P = np.asarray(P)
            if P.ndim != 2 or P.shape[0] != P.shape[1]:
                raise ValueError("kernels must be square")
            if np.min(P) < -1e-12 or np.max(np.abs(P.sum(axis=1) - 1.0)) > 1e-9:
                raise ValueError("kernel rows must be distributions")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must be in [0, 1)")
        if self.c < 1:
            raise ValueError("skill length c must be >= 1")
        if not 0 <= self.init_state < len(self.rewards):
            raise ValueError("initial state out of range")
        if not np.all(np.isfinite(self.rewards)):
            raise ValueError("rewards must be finite")


def tv_subopt_check(instance: TvInstance, atol: float = AUDIT_ATOL) -> tuple[float, float, bool]:
    """Exact |J1 - J2| against the window-coupling bound.

    epsilon is the largest k-step row TV (k in [1, c]) weighted by chain 1's
    window-start visitation from the initial state; the certified coefficient
    gamma c (c+1) r_max / ((1 - gamma^c)(1 - gamma)) multiplies it.
    """
    instance.validate()
    P1 = np.asarray(instance.P1, dtype=np.float64)
    P2 = np.asarray(instance.P2, dtype=np.float64)
    r = np.asarray(instance.rewards, dtype=np.float64)
    S = len(r)
    eye = np.eye(S)
    j1 = solve(eye - instance.gamma * P1, r)[instance.init_state]
    j2 = solve(eye - instance.gamma * P2, r)[instance.init_state]
    lhs = abs(float(j1 - j2))

    e0 = np.zeros(S)
    e0[instance.init_state] = 1.0
    gamma_c = instance.gamma**instance.c
    d = discounted_visitation(np.linalg.matrix_power(P1, instance.c), gamma_c, e0)
    eps = 0.0
    P1k, P2k = P1, P2
    for k in range(1, instance.c + 1):
        if k > 1:
            P1k = P1k @ P1
            P2k = P2k @ P2
        eps_k = 0.5 * np.abs(P1k - P2k).sum(axis=1)
        eps = max(eps, float(d @ eps_k))
    r_max = float(np.abs(r).max())
    rhs = (
        instance.gamma * instance.c * (instance.c + 1) * r_max
        / ((1.0 - gamma_c) * (1.0 - instance.gamma)) * eps
    )
    return lhs, rhs, lhs <= rhs + atol


def random_tv_instance(seed: int, max_states: int = 6, max_c: int = 4) -> TvInstance:
    """Randomized audit case: mixes independent, locally perturbed, and
    point-mass kernel pairs."""
    rng = np.random.default_rng(seed)
    S = int(rng.integers(2, max_states + 1))
    c = int(rng.integers(1, max_c + 1))
    gamma = float(rng.uniform(0.3, 0.97))
    P1 = rng.dirichlet(np.full(S, 0.5), size=S)
    mode = int(rng.integers(0, 3))
    if mode == 0:
        P2 = rng.dirichlet(np.full(S, 0.5), size=S)
    elif mode == 1:
        P2 = P1 + rng.uniform(0.0, 0.15, size=(S, S))
        P2 /= P2.sum(axis=1, keepdims=True)
    else:
        P2 = np.eye(S)[rng.integers(0, S, size=S)]
    rewards = rng.uniform(0.0, 1.0, size=S)
    return TvInstance(
        P1=P1, P2=P2, rewards=rewards, gamma=gamma, c=c,
        init_state=int(rng.integers(0, S)),
    )


# ---------------------------------------------------------------------------
# bound audits on full instances
# ---------------------------------------------------------------------------


def _require_state_rewards(mdp: LinearTabularMDP) -> None:
    R = mdp.rewards()
    if np.max(np.abs(R - R[:, :1])) > 1e-9:
        raise ValueError("coupling audit requires state-indexed rewards")


def _mismatch_coeff(gamma: float, c: int, r_max: float) -> float:
    return gamma * c * (c + 1) * r_max / ((1.0 - gamma) * (1.0 - gamma**c))


def lemma1_bound_audit(
    mdp: LinearTabularMDP,
    behavior,
    learned_low,
    high_policy: PolicyTable,
    c: int,
) -> tuple[float, float, bool]:
    """Hierarchy value gap under a shared high-level policy vs the primitive
    error bound at the measured worst-row TV."""
    _require_state_rewards(mdp)
    low = _as_behavior(learned_low)
    hyper_b = build_hyper_mdp(mdp, behavior, c)
    hyper_t = build_hyper_mdp(mdp, low, c)
    lhs = abs(policy_value(hyper_b, high_policy) - policy_value(hyper_t, high_policy))
    eps_hat = 0.5 * float(np.abs(behavior.action_table - low.action_table).sum(axis=2).max())
    rhs = _mismatch_coeff(mdp.gamma, c, mdp.r_max) * eps_hat
    return lhs, rhs, lhs <= rhs + AUDIT_ATOL


def lemma3_bound_audit(
    mdp: LinearTabularMDP,
    behavior,
    c: int,
) -> tuple[float, float, bool]:
    """Representation gap J(pi*) - J(pi*_beta) vs the bound at the computed
    skill-assignment error."""
    _require_state_rewards(mdp)
    _, pi_star = exact_value_iteration(mdp)
    j_star = policy_value(mdp, pi_star)
    hyper = build_hyper_mdp(mdp, behavior, c)
    _, pi_star_beta = exact_value_iteration(hyper)
    j_star_beta = policy_value(hyper, pi_star_beta)
    lhs = j_star - j_star_beta
    eps_omega, _ = representation_error(mdp, behavior, [pi_star], c)
    rhs = _mismatch_coeff(mdp.gamma, c, mdp.r_max) * eps_omega
    return lhs, rhs, lhs <= rhs + AUDIT_ATOL


# ---------------------------------------------------------------------------
# action-similarity map
# ---------------------------------------------------------------------------


def _pair_arrays(dataset) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(dataset, tuple):
        states, actions = dataset
    elif isinstance(dataset, list):
        states = np.concatenate([t.states[:-1] for t in dataset])
        actions = np.concatenate([t.actions for t in dataset])
    else:
        states, actions = dataset.states, dataset.actions
    states = np.asarray(states, dtype=np.float64)
    actions = np.asarray(actions, dtype=np.float64)
    if states.ndim == 3:
        states = states.reshape(-1, states.shape[-1])
        actions = actions.reshape(-1, actions.shape[-1])
    if states.ndim == 1:
        states = states[:, None]
    if actions.ndim == 1:
        actions = actions[:, None]
    return states, actions


def similarity_map(decisions, dataset, state_radius: float) -> np.ndarray:
    """Per decision (s, a): the smallest L1 action distance to any logged
    action taken within an L1 ball of radius ``state_radius`` around s.
    Decisions whose neighborhood is empty map to +inf."""
    states, actions = _pair_arrays(dataset)
    if len(states) == 0:
        raise ValueError("dataset must be nonempty")
    out = np.empty(len(decisions))
    for i, (s, a) in enumerate(decisions):
        s = np.atleast_1d(np.asarray(s, dtype=np.float64))
        a = np.atleast_1d(np.asarray(a, dtype=np.float64))
        near = np.abs(states - s).sum(axis=1) <= state_radius
        if not near.any():
            out[i] = np.inf
        else:
            out[i] = float(np.abs(actions[near] - a).sum(axis=1).min())
    return out
