"""Value estimators and confidence intervals for the normalized policy value.

Everything here consumes precomputed feature matrices (see basis.py) plus
either balancing weights or a fitted linear-sieve Q model, so the estimators
stay cheap and composable. The normalized value is (1 - gamma) times the
discounted return from the reference distribution, which keeps magnitudes
comparable across gamma.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm


def weighted_value(weights, rewards) -> float:
    """Average of weight times reward over all observed steps."""
    w = np.asarray(weights, dtype=float)
    r = np.asarray(rewards, dtype=float)
    if w.shape != r.shape:
        raise ValueError("weights and rewards must align")
    return float(np.mean(w * r))


def _solve_with_escalation(A, b, base: float):
    base = max(base, 1e-12)
    jitter = 0.0
    for _ in range(6):
        try:
            return np.linalg.solve(A + jitter * np.eye(A.shape[0]), b)
        except np.linalg.LinAlgError:
            jitter = base if jitter == 0.0 else jitter * 10.0
    raise np.linalg.LinAlgError("sieve system is singular")


def q_sieve_fit(B, Phi_next, rewards, gamma: float, ridge: float | None = None) -> np.ndarray:
    """Linear-sieve Q fit from the empirical Bellman moment conditions.

    Solves [(1/nT) B^T (B - gamma Phi_next) + ridge I] beta = (1/nT) B^T R.
    ridge defaults to 1e-8 times the trace of the left matrix; pass 0 to
    disable it (population fixed-point checks do).
    """
    B = np.asarray(B, dtype=float)
    Phi = np.asarray(Phi_next, dtype=float)
    r = np.asarray(rewards, dtype=float)
    nT = B.shape[0]
    A = B.T @ (B - gamma * Phi) / nT
    b = B.T @ r / nT
    if ridge is None:
        ridge = 1e-8 * float(np.trace(A))
    return _solve_with_escalation(A + ridge * np.eye(A.shape[1]), b, max(abs(ridge), 1e-12))


def q_values(B, beta) -> np.ndarray:
    return np.asarray(B, dtype=float) @ np.asarray(beta, dtype=float)


def sieve_value(moments, beta) -> float:
    """Plug-in value: moment targets dotted with the sieve coefficients."""
    return float(np.asarray(moments, dtype=float) @ np.asarray(beta, dtype=float))


@dataclass
class IntervalEstimate:
    value: float
    sigma: float
    lower: float
    upper: float
    alpha: float
    inflation: float


def confidence_interval(value: float, weights, rewards, B, Phi_next, beta,
                        gamma: float, alpha: float = 0.05, inflation: float = 1.0) -> IntervalEstimate:
    """Normal interval from the weighted temporal-difference residuals.

    sigma^2 = mean of [w * (R + gamma * PhiQ - Q)]^2 with Q = B beta and
    PhiQ = Phi_next beta; the half width is z_{alpha/2} sigma / sqrt(nT),
    optionally inflated (the benchmark reports a 1.2x variant as well).
    """
    w = np.asarray(weights, dtype=float)
    r = np.asarray(rewards, dtype=float)
    q = q_values(B, beta)
    q_next = q_values(Phi_next, beta)
    resid = w * (r + gamma * q_next - q)
    sigma = float(np.sqrt(np.mean(resid * resid)))
    z = float(norm.ppf(1.0 - alpha / 2.0))
    half = inflation * z * sigma / math.sqrt(len(w))
    return IntervalEstimate(value=value, sigma=sigma, lower=value - half,
                            upper=value + half, alpha=alpha, inflation=inflation)


def augmented_value(moments, beta, weights, rewards, B, Phi_next, gamma: float) -> float:
    """Sieve plug-in plus the weighted average of its Bellman residuals."""
    w = np.asarray(weights, dtype=float)
    r = np.asarray(rewards, dtype=float)
    correction = float(np.mean(w * (r + gamma * q_values(Phi_next, beta) - q_values(B, beta))))
    return sieve_value(moments, beta) + correction


def pdis_value(dataset, behavior, target, gamma: float) -> float:
    """Per-decision importance sampling of the normalized value.

    (1 - gamma) * (1/n) sum_i sum_t gamma^t (prod_{v<=t} pi(A_v|S_v) / b(A_v|S_v)) R_t.
    Raises on a logged action the behavior policy gives zero probability.
    """
    n, T = dataset.n, dataset.T
    rows = np.arange(dataset.num_steps)
    p_t = target.probs_batch(dataset.states)[rows, dataset.actions].reshape(n, T)
    p_b = behavior.probs_batch(dataset.states)[rows, dataset.actions].reshape(n, T)
    if (p_b <= 0.0).any():
        raise ValueError("behavior policy assigns zero probability to a logged action")
    ratios = np.cumprod(p_t / p_b, axis=1)
    disc = gamma ** np.arange(T)
    rewards = dataset.rewards.reshape(n, T)
    return float((1.0 - gamma) * np.mean((disc[None, :] * ratios * rewards).sum(axis=1)))


def fqe_fit(B, Phi_next, rewards, gamma: float, ridge: float | None = None,
            max_iter: int = 500, tol: float = 1e-8):
    """Fitted Q evaluation on the linear sieve.

    Iterates beta <- argmin ||B beta - (R + gamma Phi_next beta_prev)||^2 with
    a small ridge; the iteration is a gamma-contraction in the fitted values
    whenever the regression is a projection. Returns (beta, n_iters,
    converged).
    """
    B = np.asarray(B, dtype=float)
    Phi = np.asarray(Phi_next, dtype=float)
    r = np.asarray(rewards, dtype=float)
    nT = B.shape[0]
    Gram = B.T @ B / nT
    if ridge is None:
        ridge = 1e-8 * float(np.trace(Gram))
    A = Gram + ridge * np.eye(Gram.shape[0])
    BtR = B.T @ r / nT
    BtPhi = B.T @ Phi / nT
    beta = np.zeros(B.shape[1])
    for it in range(1, max_iter + 1):
        new = _solve_with_escalation(A, BtR + gamma * BtPhi @ beta, max(abs(ridge), 1e-12))
        gap = float(np.max(np.abs(new - beta)))
        beta = new
        if gap < tol:
            return beta, it, True
    return beta, max_iter, False
