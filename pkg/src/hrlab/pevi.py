"""Pessimistic value iteration over skill-level MDPs.

The fit works entirely in the d-dimensional feature space: a ridge regression
on window features gives the Bellman backup, an elliptical bonus
b(s,z) = beta * sqrt(phi' Lambda^-1 phi) is subtracted, and the truncated
greedy step closes the loop. beta follows the finite-sample schedule
beta = C * d * r_max * sqrt(zeta) / (1 - gamma^c) with
zeta = log(4 d N / ((1 - gamma^c) delta)).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .data_pipeline import HighLevelDataset
from .mdp_core import HyperMDP, PolicyTable

PEVI_MAX_ITERS = 10_000


@dataclass(frozen=True)
class BoundSchedule:
    """Bonus scaling derived from the concentration argument."""

    C: float
    delta: float
    zeta: float
    beta_scale: float


def compute_beta_schedule(
    d: int,
    N: int,
    gamma: float,
    c: int,
    delta: float,
    C: float = 1.0,
    r_max: float = 1.0,
) -> BoundSchedule:
    """beta = C d r_max sqrt(zeta) / (1 - gamma^c), lambda fixed at 1."""
    if N < 1:
        raise ValueError("N must be >= 1")
    if not 0.0 < delta < 1.0:
        raise ValueError("delta must be in (0, 1)")
    if C < 0.0:
        raise ValueError("C must be nonnegative")
    gap = 1.0 - gamma**c
    if gap <= 0.0:
        raise ValueError("gamma**c must be < 1")
    zeta = math.log(4.0 * d * N / (gap * delta))
    beta = C * d * r_max * math.sqrt(zeta) / gap
    return BoundSchedule(C=C, delta=delta, zeta=zeta, beta_scale=beta)


@dataclass(frozen=True)
class PessimisticEstimate:
    """Frozen result of one fit: weights, covariance, tables, greedy policy."""

    w_hat: np.ndarray
    Lambda: np.ndarray
    beta_scale: float
    lambda_reg: float
    Q_hat: np.ndarray
    V_hat: np.ndarray
    gamma_table: np.ndarray
    policy: PolicyTable
    iterations: int
    converged: bool

    def to_json(self) -> str:
        return json.dumps(
            {
                "w_hat": self.w_hat.tolist(),
                "Lambda": self.Lambda.tolist(),
                "beta_scale": self.beta_scale,
                "lambda_reg": self.lambda_reg,
                "Q_hat": self.Q_hat.tolist(),
                "V_hat": self.V_hat.tolist(),
                "Gamma": self.gamma_table.tolist(),
                "skills": self.policy.greedy_choices().tolist(),
                "iterations": self.iterations,
                "converged": self.converged,
            }
        )


def ridge_weights(features: np.ndarray, targets: np.ndarray, lambda_reg: float) -> np.ndarray:
    """Minimizer of sum((phi'w - y)^2) + lambda ||w||^2 via an SPD solve."""
    features = np.asarray(features, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    d = features.shape[1]
    cov = lambda_reg * np.eye(d) + features.T @ features
    try:
        factor = cho_factor(cov)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - SPD by construction
        raise ValueError("regularized covariance is numerically singular") from exc
    return cho_solve(factor, features.T @ targets)


def _bonus_table(phi_flat: np.ndarray, factor, beta_scale: float) -> np.ndarray:
    quad = np.einsum("nd,nd->n", phi_flat, cho_solve(factor, phi_flat.T).T)
    return beta_scale * np.sqrt(np.maximum(quad, 0.0))


def fit_pessimistic_value(
    D_hi: HighLevelDataset,
    hyper: HyperMDP,
    lambda_reg: float = 1.0,
    beta_scale: float = 1.0,
    tol: float = 1e-8,
    max_iters: int = PEVI_MAX_ITERS,
) -> PessimisticEstimate:
    """Iterate the pessimistic backup to a fixed point.

    Each sweep solves the ridge system for w, subtracts the elliptical bonus,
    truncates Q to [0, r_max_c/(1-gamma_eff)], and takes the greedy (lowest
    index on ties) V. Lambda is assembled once; only the regression targets
    move between sweeps.
    """
    if len(D_hi) == 0:
        raise ValueError("cannot fit on an empty high-level dataset")
    if lambda_reg < 1e-9:
        raise ValueError("lambda_reg must be >= 1e-9")
    S, K = hyper.base.num_states, hyper.num_skills
    d = hyper.base.d
    s0 = np.asarray(D_hi.s0, dtype=np.int64)
    z = np.asarray(D_hi.z, dtype=np.int64)
    s_next = np.asarray(D_hi.s_next, dtype=np.int64)
    F = hyper.phi_c[s0, z]
    cov = lambda_reg * np.eye(d) + F.T @ F
    try:
        factor = cho_factor(cov)
    except np.linalg.LinAlgError as exc:
        raise ValueError("regularized covariance is numerically singular") from exc

    phi_flat = hyper.phi_c.reshape(S * K, d)
    bonus = _bonus_table(phi_flat, factor, beta_scale).reshape(S, K)
    v_cap = hyper.r_max_c / (1.0 - hyper.gamma_eff) if hyper.gamma_eff < 1.0 else np.inf

    V = np.zeros(S)
    w = np.zeros(d)
    Q = np.zeros((S, K))
    converged = False
    iterations = 0
    for iterations in range(1, max_iters + 1):
        targets = D_hi.reward + hyper.gamma_eff * V[s_next]
        w = cho_solve(factor, F.T @ targets)
        Q = np.clip((phi_flat @ w).reshape(S, K) - bonus, 0.0, v_cap)
        V_new = Q.max(axis=1)
        gap = float(np.max(np.abs(V_new - V)))
        V = V_new
        if gap <= tol:
            converged = True
            break
    policy = PolicyTable.greedy(kind="high", choices=np.argmax(Q, axis=1), width=K)
    return PessimisticEstimate(
        w_hat=w,
        Lambda=cov,
        beta_scale=beta_scale,
        lambda_reg=lambda_reg,
        Q_hat=Q,
        V_hat=V,
        gamma_table=bonus,
        policy=policy,
        iterations=iterations,
        converged=converged,
    )


def uncertainty_quantifier_violation_rate(
    hyper: HyperMDP,
    estimate: PessimisticEstimate,
    D_hi: HighLevelDataset,
    beta_scale: float | None = None,
) -> float:
    """Fraction of (s,z) pairs where the bonus fails to cover the Bellman gap.

    The estimated backup re-solves the ridge system at the estimate's V_hat;
    the exact backup uses the known window kernel and rewards. Optionally
    rescores with a different beta without refitting.
    """
    S, K = hyper.base.num_states, hyper.num_skills
    s0 = np.asarray(D_hi.s0, dtype=np.int64)
    z = np.asarray(D_hi.z, dtype=np.int64)
    s_next = np.asarray(D_hi.s_next, dtype=np.int64)
    F = hyper.phi_c[s0, z]
    targets = D_hi.reward + hyper.gamma_eff * estimate.V_hat[s_next]
    cov = estimate.lambda_reg * np.eye(hyper.base.d) + F.T @ F
    factor = cho_factor(cov)
    w = cho_solve(factor, F.T @ targets)
    phi_flat = hyper.phi_c.reshape(S * K, hyper.base.d)
    est_backup = (phi_flat @ w).reshape(S, K)
    exact_backup = hyper.rewards() + hyper.gamma_eff * hyper.kernel() @ estimate.V_hat
    beta = estimate.beta_scale if beta_scale is None else beta_scale
    bonus = _bonus_table(phi_flat, factor, beta).reshape(S, K)
    violations = np.abs(est_backup - exact_backup) > bonus
    return float(violations.mean())


def pevi_policy(estimate: PessimisticEstimate) -> PolicyTable:
    """Greedy skill per state from the fitted Q table, ties to lowest index."""
    K = estimate.Q_hat.shape[1]
    return PolicyTable.greedy(kind="high", choices=np.argmax(estimate.Q_hat, axis=1), width=K)
