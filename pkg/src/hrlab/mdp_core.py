"""Tabular MDPs with linear kernel/reward features, exact evaluation oracles,
and temporally extended (every-c-step) decision processes built on top of them.

All randomness flows through ``numpy.random.Generator`` objects seeded by the
caller. Constructed models are immutable: arrays are marked read-only so a
model can be shared across worker processes without copying.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

# Tolerances for validated probability objects. Row sums are checked against
# these rather than exact equality; everything downstream assumes validation
# has already run.
PROB_ATOL = 1e-9
LINEARITY_ATOL = 1e-10

_ENCODE_TRIES = 200

MDP_SCHEMA_VERSION = 1


def _freeze(arr: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(np.asarray(arr, dtype=np.float64))
    out.setflags(write=False)
    return out


# ---------------------------------------------------------------------------
# feature maps and models
# ---------------------------------------------------------------------------


@dataclass
class FeatureMap:
    """Reward features ``phi[s, a, :]`` and kernel features ``psi[s, a, s', :]``.

    Every entry of both tables must lie in [-1, 1]; kernel features are
    nonnegative here so that per-destination probabilities are nonnegative
    term by term.
    """

    d: int
    phi: np.ndarray
    psi: np.ndarray

    def __post_init__(self):
        self.phi = _freeze(self.phi)
        self.psi = _freeze(self.psi)

    def validate(self) -> None:
        if self.phi.ndim != 3 or self.psi.ndim != 4:
            raise ValueError("feature tables must be (S,A,d) and (S,A,S,d)")
        if self.phi.shape[2] != self.d or self.psi.shape[3] != self.d:
            raise ValueError("feature dimension mismatch with d")
        if self.psi.shape[0] != self.phi.shape[0] or self.psi.shape[1] != self.phi.shape[1]:
            raise ValueError("phi and psi disagree on state/action counts")
        if np.max(np.abs(self.phi)) > 1.0 + PROB_ATOL:
            raise ValueError("reward feature max-norm exceeds 1")
        if np.max(np.abs(self.psi)) > 1.0 + PROB_ATOL:
            raise ValueError("kernel feature max-norm exceeds 1")
        if np.min(self.psi) < -PROB_ATOL:
            raise ValueError("kernel features must be nonnegative")


@dataclass
class LinearTabularMDP:
    """Finite MDP whose kernel and expected reward factor through shared weights.

    ``transition kernel(s'|s,a) = psi[s,a,s'] . omega`` and
    ``expected reward(s,a) = phi[s,a] . omega`` with ``||omega||_2 <= sqrt(d)``.
    Rewards live in [0, r_max]; ``mu0`` is the initial state distribution.
    """

    num_states: int
    num_actions: int
    omega: np.ndarray
    features: FeatureMap
    gamma: float
    r_max: float
    mu0: np.ndarray

    def __post_init__(self):
        self.omega = _freeze(self.omega)
        self.mu0 = _freeze(self.mu0)

    # generic evaluation surface shared with HyperMDP
    @property
    def discount(self) -> float:
        return self.gamma

    @property
    def num_choices(self) -> int:
        return self.num_actions

    @cached_property
    def _kernel(self) -> np.ndarray:
        return _freeze(self.features.psi @ self.omega)

    @cached_property
    def _rewards(self) -> np.ndarray:
        return _freeze(self.features.phi @ self.omega)

    def kernel(self) -> np.ndarray:
        """Dense transition table, shape (S, A, S)."""
        return self._kernel

    def rewards(self) -> np.ndarray:
        """Expected-reward table, shape (S, A)."""
        return self._rewards

    def validate(self) -> None:
        self.features.validate()
        S, A = self.num_states, self.num_actions
        if self.features.phi.shape[:2] != (S, A):
            raise ValueError("feature tables disagree with declared sizes")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must be in [0, 1)")
        if self.r_max <= 0:
            raise ValueError("r_max must be positive")
        if float(np.linalg.norm(self.omega)) > math.sqrt(self.d) + PROB_ATOL:
            raise ValueError("||omega||_2 exceeds sqrt(d)")
        if self.mu0.shape != (S,) or np.min(self.mu0) < -PROB_ATOL:
            raise ValueError("mu0 must be a length-S distribution")
        if abs(float(self.mu0.sum()) - 1.0) > PROB_ATOL:
            raise ValueError("mu0 must sum to 1")
        P = self.kernel()
        if np.min(P) < -PROB_ATOL:
            raise ValueError("kernel has a negative entry")
        if np.max(np.abs(P.sum(axis=2) - 1.0)) > PROB_ATOL:
            raise ValueError("kernel rows must sum to 1")
        R = self.rewards()
        if np.min(R) < -PROB_ATOL or np.max(R) > self.r_max + PROB_ATOL:
            raise ValueError("expected rewards leave [0, r_max]")

    @property
    def d(self) -> int:
        return self.features.d

    def to_json(self) -> str:
        doc = {
            "schema_version": MDP_SCHEMA_VERSION,
            "num_states": self.num_states,
            "num_actions": self.num_actions,
            "d": self.d,
            "gamma": self.gamma,
            "r_max": self.r_max,
            "omega": self.omega.tolist(),
            "mu0": self.mu0.tolist(),
            "phi": self.features.phi.tolist(),
            "psi": self.features.psi.tolist(),
        }
        return json.dumps(doc)

    @staticmethod
    def from_json(text: str) -> "LinearTabularMDP":
        doc = json.loads(text)
        if doc.get("schema_version") != MDP_SCHEMA_VERSION:
            raise ValueError(f"unsupported mdp schema version: {doc.get('schema_version')!r}")
        features = FeatureMap(d=doc["d"], phi=np.array(doc["phi"]), psi=np.array(doc["psi"]))
        mdp = LinearTabularMDP(
            num_states=doc["num_states"],
            num_actions=doc["num_actions"],
            omega=np.array(doc["omega"]),
            features=features,
            gamma=doc["gamma"],
            r_max=doc["r_max"],
            mu0=np.array(doc["mu0"]),
        )
        mdp.validate()
        return mdp


@dataclass
class HyperMDP:
    """Every-c-step view of a base MDP under a fixed low-level skill policy.

    Choices are skills held for c base steps; the composed kernel/reward
    features stay linear in the base model's omega. Composed rewards
    accumulate gamma^k-discounted base rewards inside the window, so the
    reward ceiling is the geometric sum ``r_max_c``.
    """

    base: LinearTabularMDP
    c: int
    num_skills: int
    phi_c: np.ndarray
    psi_c: np.ndarray

    def __post_init__(self):
        self.phi_c = _freeze(self.phi_c)
        self.psi_c = _freeze(self.psi_c)

    @property
    def num_states(self) -> int:
        return self.base.num_states

    @property
    def num_choices(self) -> int:
        return self.num_skills

    @property
    def gamma_eff(self) -> float:
        return self.base.gamma**self.c

    @property
    def discount(self) -> float:
        return self.gamma_eff

    @property
    def r_max_c(self) -> float:
        return math.fsum(self.base.gamma**k for k in range(self.c)) * self.base.r_max

    @property
    def mu0(self) -> np.ndarray:
        return self.base.mu0

    @property
    def omega(self) -> np.ndarray:
        return self.base.omega

    @cached_property
    def _kernel(self) -> np.ndarray:
        return _freeze(self.psi_c @ self.base.omega)

    @cached_property
    def _rewards(self) -> np.ndarray:
        return _freeze(self.phi_c @ self.base.omega)

    def kernel(self) -> np.ndarray:
        """Composed c-step transition table, shape (S, K, S)."""
        return self._kernel

    def rewards(self) -> np.ndarray:
        """Composed discounted window rewards, shape (S, K)."""
        return self._rewards

    def validate(self) -> None:
        if self.c < 1:
            raise ValueError("skill length c must be >= 1")
        if np.max(np.abs(self.phi_c)) > 1.0 + PROB_ATOL:
            raise ValueError("composed reward feature max-norm exceeds 1")
        if np.max(np.abs(self.psi_c)) > 1.0 + PROB_ATOL:
            raise ValueError("composed kernel feature max-norm exceeds 1")
        P = self.kernel()
        if np.min(P) < -PROB_ATOL:
            raise ValueError("composed kernel has a negative entry")
        if np.max(np.abs(P.sum(axis=2) - 1.0)) > PROB_ATOL:
            raise ValueError("composed kernel rows must sum to 1")
        R = self.rewards()
        if np.min(R) < -PROB_ATOL or np.max(R) > self.r_max_c + PROB_ATOL:
            raise ValueError("composed rewards leave [0, r_max_c]")


@dataclass
class PolicyTable:
    """Stochastic policy over a finite choice set.

    kind "flat": probs (S, A) over base actions; kind "high": probs (S, K)
    over skills; kind "low": probs (S, K, A), an action table per skill.
    """

    kind: str
    probs: np.ndarray

    def __post_init__(self):
        self.probs = _freeze(self.probs)

    def validate(self) -> None:
        if self.kind not in ("flat", "high", "low"):
            raise ValueError(f"unknown policy kind {self.kind!r}")
        want_ndim = {"flat": 2, "high": 2, "low": 3}[self.kind]
        if self.probs.ndim != want_ndim:
            raise ValueError(f"{self.kind} policy table must have {want_ndim} axes")
        if np.min(self.probs) < -1e-12:
            raise ValueError("policy table has a negative probability")
        if np.max(np.abs(self.probs.sum(axis=-1) - 1.0)) > 1e-12:
            raise ValueError("policy rows must sum to 1 within 1e-12")

    @staticmethod
    def greedy(kind: str, choices: np.ndarray, width: int) -> "PolicyTable":
        probs = np.zeros((len(choices), width))
        probs[np.arange(len(choices)), choices] = 1.0
        return PolicyTable(kind=kind, probs=probs)

    def greedy_choices(self) -> np.ndarray:
        # lowest index wins ties, matching np.argmax
        return self.probs.argmax(axis=-1)


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------


def _unit_inner_row(rng: np.random.Generator | None, omega: np.ndarray, max_entry: float) -> np.ndarray:
    """Nonnegative eta with eta . omega == 1 and max(eta) <= max_entry.

    Rejection-samples a random direction; falls back to the uniform solution.
    Raises if no solution exists for this omega / max_entry pair.
    """
    if rng is not None:
        for _ in range(_ENCODE_TRIES):
            g = rng.uniform(0.05, 1.0, size=omega.shape)
            eta = g / float(g @ omega)
            if eta.max() <= max_entry:
                return eta
    total = float(omega.sum())
    if 1.0 / total <= max_entry:
        return np.full_like(omega, 1.0 / total)
    raise ValueError(
        "cannot encode a unit inner product against omega with entries <= "
        f"{max_entry:.6g} (sum(omega) = {total:.6g} too small)"
    )


def encode_tabular_as_linear(
    kernel: np.ndarray,
    rewards: np.ndarray,
    d: int,
    gamma: float,
    r_max: float,
    mu0: np.ndarray,
    seed: int,
) -> LinearTabularMDP:
    """Express an explicit tabular MDP as a linear-feature model.

    Each kernel entry p becomes p * eta with a fresh unit-inner-product row
    eta, and likewise for rewards, so linearity holds exactly by construction.
    """
    kernel = np.asarray(kernel, dtype=np.float64)
    rewards = np.asarray(rewards, dtype=np.float64)
    S, A = rewards.shape
    if kernel.shape != (S, A, S):
        raise ValueError("kernel must have shape (S, A, S)")
    if np.min(kernel) < -PROB_ATOL or np.max(np.abs(kernel.sum(axis=2) - 1.0)) > PROB_ATOL:
        raise ValueError("kernel rows must be distributions")
    if np.min(rewards) < 0 or np.max(rewards) > r_max:
        raise ValueError("rewards must lie in [0, r_max]")

    rng = np.random.default_rng(seed)
    omega = rng.uniform(0.5, 1.0, size=d)
    total = float(omega.sum())
    if rewards.max() > total:
        raise ValueError("max reward exceeds sum(omega); no unit-norm feature row exists")

    psi = np.zeros((S, A, S, d))
    phi = np.zeros((S, A, d))
    for s in range(S):
        for a in range(A):
            for s2 in range(S):
                p = kernel[s, a, s2]
                if p > 0.0:
                    psi[s, a, s2] = p * _unit_inner_row(rng, omega, max_entry=1.0)
            r = rewards[s, a]
            if r > 0.0:
                phi[s, a] = r * _unit_inner_row(rng, omega, max_entry=min(1.0, 1.0 / r))

    mdp = LinearTabularMDP(
        num_states=S,
        num_actions=A,
        omega=omega,
        features=FeatureMap(d=d, phi=phi, psi=psi),
        gamma=gamma,
        r_max=r_max,
        mu0=np.asarray(mu0, dtype=np.float64),
    )
    mdp.validate()
    return mdp


def build_tabular_linear_mdp(
    seed: int,
    d: int,
    num_states: int,
    num_actions: int,
    gamma: float,
    r_max: float = 1.0,
    *,
    kernel_concentration: float = 0.5,
    state_rewards: bool = False,
) -> LinearTabularMDP:
    """Sample a random valid linear tabular MDP, deterministic in seed.

    ``state_rewards=True`` makes the reward depend on the state only (the
    same expected reward for every action there), which is the family the
    visitation-coupling audits are stated for.
    """
    if d < 2:
        raise ValueError("feature dimension d must be >= 2")
    if num_states < 1 or num_actions < 1:
        raise ValueError("state and action counts must be positive")
    if not 0.0 <= gamma < 1.0:
        raise ValueError("gamma must be in [0, 1)")
    rng = np.random.default_rng(seed)
    kernel = rng.dirichlet(
        np.full(num_states, kernel_concentration), size=(num_states, num_actions)
    )
    if state_rewards:
        per_state = rng.uniform(0.0, r_max, size=num_states)
        rewards = np.repeat(per_state[:, None], num_actions, axis=1)
    else:
        rewards = rng.uniform(0.0, r_max, size=(num_states, num_actions))
    mu0 = rng.dirichlet(np.ones(num_states))
    embed_seed = int(rng.integers(0, 2**63 - 1))
    return encode_tabular_as_linear(kernel, rewards, d, gamma, r_max, mu0, embed_seed)


def build_sparse_chain_mdp(
    length: int,
    gamma: float,
    d: int,
    seed: int,
    *,
    r_max: float = 1.0,
    slip: float = 0.1,
) -> LinearTabularMDP:
    """Line of states with left/right moves and reward only at the far end.

    Action 0 steps left, action 1 steps right; each slips the other way with
    probability ``slip``. Ends clip. Reward r_max at the last state for every
    action there (state reward), start at state 0.
    """
    if length < 3:
        raise ValueError("chain length must be >= 3")
    S, A = length, 2
    kernel = np.zeros((S, A, S))
    for s in range(S):
        left, right = max(s - 1, 0), min(s + 1, S - 1)
        kernel[s, 0, left] += 1.0 - slip
        kernel[s, 0, right] += slip
        kernel[s, 1, right] += 1.0 - slip
        kernel[s, 1, left] += slip
    rewards = np.zeros((S, A))
    rewards[S - 1, :] = r_max
    mu0 = np.zeros(S)
    mu0[0] = 1.0
    return encode_tabular_as_linear(kernel, rewards, d, gamma, r_max, mu0, seed)


# ---------------------------------------------------------------------------
# point lookups
# ---------------------------------------------------------------------------


def transition_prob(mdp: LinearTabularMDP, s: int, a: int, s_next: int) -> float:
    """Kernel probability recovered from features: psi[s,a,s'] . omega."""
    return float(mdp.features.psi[s, a, s_next] @ mdp.omega)


def expected_reward(mdp: LinearTabularMDP, s: int, a: int) -> float:
    """Expected reward recovered from features: phi[s,a] . omega."""
    return float(mdp.features.phi[s, a] @ mdp.omega)


# ---------------------------------------------------------------------------
# exact evaluation
# ---------------------------------------------------------------------------


def exact_value_iteration(model, tol: float = 1e-10) -> tuple[np.ndarray, PolicyTable]:
    """Optimal values and a greedy deterministic policy, to within tol.

    Stops when successive sweeps differ by at most tol*(1-gamma)/(2*gamma) in
    sup norm, which puts the returned values within tol of the fixed point;
    greedy ties resolve to the lowest index.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    P = model.kernel()
    R = model.rewards()
    gamma = model.discount
    S, A = R.shape
    thresh = tol if gamma == 0.0 else tol * (1.0 - gamma) / (2.0 * gamma)
    V = np.zeros(S)
    while True:
        Q = R + gamma * (P @ V)
        V_new = Q.max(axis=1)
        if float(np.max(np.abs(V_new - V))) <= thresh:
            break
        V = V_new
    choices = Q.argmax(axis=1)
    kind = "high" if isinstance(model, HyperMDP) else "flat"
    return V_new, PolicyTable.greedy(kind, choices, A)


def _policy_kernel_rewards(model, policy: PolicyTable) -> tuple[np.ndarray, np.ndarray]:
    P = model.kernel()
    R = model.rewards()
    probs = policy.probs
    if probs.shape != R.shape:
        raise ValueError("policy table shape does not match the model")
    P_pi = np.einsum("sa,sat->st", probs, P)
    r_pi = np.einsum("sa,sa->s", probs, R)
    return P_pi, r_pi


def exact_state_values(model, policy: PolicyTable) -> np.ndarray:
    """Per-state value of a stochastic policy, by direct linear solve."""
    P_pi, r_pi = _policy_kernel_rewards(model, policy)
    S = P_pi.shape[0]
    try:
        return np.linalg.solve(np.eye(S) - model.discount * P_pi, r_pi)
    except np.linalg.LinAlgError as err:  # pragma: no cover - gamma < 1 prevents this
        raise ValueError("policy evaluation system is singular") from err


def policy_value(model, policy: PolicyTable) -> float:
    """Expected discounted return from the initial distribution."""
    V = exact_state_values(model, policy)
    return float(model.mu0 @ V)


def k_step_transition(model, policy: PolicyTable, k: int) -> np.ndarray:
    """k-step state kernel under a policy; k must be >= 1."""
    if k < 1:
        raise ValueError("k must be >= 1")
    P_pi, _ = _policy_kernel_rewards(model, policy)
    out = P_pi.copy()
    for _ in range(k - 1):
        out = out @ P_pi
    return out


# ---------------------------------------------------------------------------
# hyper construction
# ---------------------------------------------------------------------------


def _waterfill_row(omega: np.ndarray, target: float) -> np.ndarray:
    """Nonnegative row v with v . omega == target and max(v) <= 1, greedily."""
    if target < 0:
        raise ValueError("cannot encode a negative reward target")
    if target > float(omega.sum()) + 1e-9:
        raise ValueError("composed reward exceeds sum(omega); no unit-norm row exists")
    v = np.zeros_like(omega)
    rem = target
    for i in range(len(omega)):
        if rem <= 0.0:
            break
        take = min(1.0, rem / omega[i])
        v[i] = take
        rem -= take * omega[i]
    # absorb the float residual into the last touched coordinate
    err = target - float(v @ omega)
    for i in range(len(omega) - 1, -1, -1):
        if 0.0 < v[i]:
            adj = v[i] + err / omega[i]
            if 0.0 <= adj <= 1.0:
                v[i] = adj
                break
    return v


def build_hyper_mdp(mdp: LinearTabularMDP, behavior, c: int) -> HyperMDP:
    """Compose kernel/reward features for skills held over c base steps.

    ``behavior`` provides ``num_skills`` and an action table (S, K, A). The
    one-step composed features are behavior-mixed base features; k-step
    features push the previous step distribution through them, and window
    rewards accumulate gamma^k-weighted mixed reward features.
    """
    if c < 1:
        raise ValueError("skill length c must be >= 1")
    beta = np.asarray(behavior.action_table, dtype=np.float64)
    K = behavior.num_skills
    if K < 1:
        raise ValueError("behavior skill set is empty")
    S = mdp.num_states
    if beta.shape != (S, K, mdp.num_actions):
        raise ValueError("behavior action table shape mismatch")

    psi1 = np.einsum("ska,sabd->skbd", beta, mdp.features.psi)
    phi1 = np.einsum("ska,sad->skd", beta, mdp.features.phi)
    p1 = psi1 @ mdp.omega  # (S, K, S), one-step skill kernels

    gamma = mdp.gamma
    psi_c = psi1.copy()
    phi_c = phi1.copy()
    # step[s, k, t] = probability of being at t after j steps of skill k from s
    step = None
    for j in range(1, c):
        if step is None:
            step = p1.copy()
        else:
            step = np.einsum("skt,tku->sku", step, p1, optimize=True)
        psi_c = np.einsum("skt,tkbd->skbd", step, psi1, optimize=True)
        phi_c = phi_c + (gamma**j) * np.einsum("skt,tkd->skd", step, phi1, optimize=True)

    # exact composition can push reward rows past max-norm 1 once windows
    # accumulate more than one unit of reward; re-encode those rows without
    # moving the inner product
    over = np.abs(phi_c).max(axis=2) > 1.0
    if np.any(over):
        targets = phi_c @ mdp.omega
        for s, k in zip(*np.nonzero(over)):
            phi_c[s, k] = _waterfill_row(mdp.omega, float(targets[s, k]))

    hyper = HyperMDP(base=mdp, c=c, num_skills=K, phi_c=phi_c, psi_c=psi_c)
    hyper.validate()
    return hyper


# ---------------------------------------------------------------------------
# continuous testbed
# ---------------------------------------------------------------------------


@dataclass
class PointMassEnv:
    """Planar box world with clipped displacement actions and disc goals.

    Dynamics are deterministic given the action: actions clip to the
    per-axis step limit, next states clip to the box. The per-step reward is
    1 inside any goal disc and 0 elsewhere. ``step`` is a pure function of
    (state, action) so the environment can be shared between workers.
    """

    low: np.ndarray
    high: np.ndarray
    max_step: float
    goals: tuple = ()
    start: np.ndarray = field(default_factory=lambda: np.zeros(2))
    start_jitter: float = 0.0

    def __post_init__(self):
        self.low = _freeze(self.low)
        self.high = _freeze(self.high)
        self.start = _freeze(self.start)

    @property
    def state_dim(self) -> int:
        return 2

    @property
    def action_dim(self) -> int:
        return 2

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        s0 = self.start + self.start_jitter * rng.uniform(-1.0, 1.0, size=2)
        return np.clip(s0, self.low, self.high)

    def reward(self, state: np.ndarray) -> float:
        for center, radius in self.goals:
            if float(np.linalg.norm(state - np.asarray(center))) <= radius:
                return 1.0
        return 0.0

    def step(self, state: np.ndarray, action: np.ndarray) -> tuple[np.ndarray, float]:
        a = np.clip(action, -self.max_step, self.max_step)
        nxt = np.clip(state + a, self.low, self.high)
        return nxt, self.reward(nxt)

    def step_batch(self, states: np.ndarray, actions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        a = np.clip(actions, -self.max_step, self.max_step)
        nxt = np.clip(states + a, self.low, self.high)
        rewards = np.zeros(len(nxt))
        for center, radius in self.goals:
            inside = np.linalg.norm(nxt - np.asarray(center), axis=1) <= radius
            rewards = np.maximum(rewards, inside.astype(float))
        return nxt, rewards


def make_two_corridor_env(max_step: float = 0.12) -> PointMassEnv:
    """Unit box with a goal in the far corner, reachable along either wall."""
    return PointMassEnv(
        low=np.zeros(2),
        high=np.ones(2),
        max_step=max_step,
        goals=(((0.9, 0.9), 0.08),),
        start=np.array([0.08, 0.08]),
        start_jitter=0.03,
    )
