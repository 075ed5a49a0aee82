"""Kernel ridge projection of expected next-step features onto (S, A).

The naive difference B(S, A) - gamma * E_pi B(S', .) evaluates trajectories,
not state-action pairs: two transitions leaving the same (s, a) can produce
different rows. Regressing the expected next-step features on (s, a) with a
Gaussian-kernel ridge fit and replacing the raw next-step term by the fitted
conditional mean ghat(s, a) removes that dependence, which is what the
balancing step needs.

Kernel inputs are the per-dimension z-scored states concatenated with a
one-hot action scaled by the median pairwise distance of the scored states, so
an action mismatch moves a point by about as much as a typical state change.
The bandwidth is the median heuristic on those encoded points.

krr_fit_multi solves (G + mu I) A = Y once per fit, Cholesky with escalating
jitter, one factorization shared by all target columns. Two exact shortcuts
keep large problems cheap: cross-validation reuses one eigendecomposition per
fold across the whole mu grid, and inputs with few distinct rows (tabular
data) are collapsed to the equivalent distinct-point system. Both reproduce
the dense formula to numerical precision.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular
from scipy.spatial.distance import pdist

from .basis import compute_features


def median_pairwise_distance(X, max_points: int = 2000, seed=0) -> float:
    """Median Euclidean distance over a deterministic subsample of rows."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    n = X.shape[0]
    if n < 2:
        raise ValueError("need at least two points")
    if n > max_points:
        rng = np.random.default_rng(seed)
        idx = np.sort(rng.choice(n, size=max_points, replace=False))
        X = X[idx]
    med = float(np.median(pdist(X)))
    if med <= 0.0:
        raise ValueError("median pairwise distance is zero (all points identical)")
    return med


@dataclass
class StateActionEncoder:
    """Maps (state, action) to the kernel input space."""

    mean: np.ndarray
    std: np.ndarray
    action_scale: float
    num_actions: int

    @classmethod
    def fit(cls, dataset, num_actions: int, max_points: int = 2000, seed=0) -> "StateActionEncoder":
        S = dataset.states
        mean = S.mean(axis=0)
        std = S.std(axis=0)
        std = np.where(std > 1e-12, std, 1.0)
        scale = median_pairwise_distance((S - mean) / std, max_points=max_points, seed=seed)
        return cls(mean=mean, std=std, action_scale=scale, num_actions=num_actions)

    def encode(self, states, actions) -> np.ndarray:
        S = np.asarray(states, dtype=float)
        a = np.asarray(actions, dtype=int)
        if a.ndim == 0:
            a = np.full(S.shape[0], int(a))
        z = (S - self.mean) / self.std
        onehot = np.zeros((S.shape[0], self.num_actions))
        onehot[np.arange(S.shape[0]), a] = self.action_scale
        return np.hstack([z, onehot])


def gaussian_gram(X, Y, sigma: float) -> np.ndarray:
    """exp(-||x - y||^2 / (2 sigma^2)) for all row pairs."""
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    sq = (X * X).sum(axis=1)[:, None] + (Y * Y).sum(axis=1)[None, :] - 2.0 * X @ Y.T
    np.maximum(sq, 0.0, out=sq)
    return np.exp(-sq / (2.0 * sigma * sigma))


@dataclass
class KRRModel:
    """Fitted ridge regression in the Gaussian RKHS.

    Predictions are gaussian_gram(queries, inputs) @ coef; `inputs` may be the
    deduplicated training rows when the distinct-point shortcut applied.
    """

    inputs: np.ndarray
    coef: np.ndarray
    sigma: float
    mu: float
    jitter: float = 0.0


def _solve_psd(A, B, trace_scale: float):
    """Cholesky solve with escalating diagonal jitter; returns (X, jitter)."""
    base = 1e-10 * trace_scale
    jitter = 0.0
    for attempt in range(9):
        try:
            C = np.linalg.cholesky(A + jitter * np.eye(A.shape[0]))
        except np.linalg.LinAlgError:
            jitter = base * (2.0 ** attempt) if jitter == 0.0 else jitter * 2.0
            continue
        z = solve_triangular(C, B, lower=True)
        return solve_triangular(C.T, z, lower=False), jitter
    raise np.linalg.LinAlgError("Gram matrix not positive definite even after jitter escalation")


def _distinct_rows(X):
    """(unique_rows, inverse, counts) with rows in first-seen order."""
    uniq, first, inverse, counts = np.unique(
        X, axis=0, return_index=True, return_inverse=True, return_counts=True
    )
    order = np.argsort(first)
    rank = np.empty_like(order)
    rank[order] = np.arange(len(order))
    return uniq[order], rank[inverse], counts[order]


def krr_fit_multi(X, Y, mu: float, sigma: float) -> KRRModel:
    """Fit (G + mu I) A = Y with one factorization for every column of Y.

    When X contains few distinct rows the coefficients come from the
    equivalent u x u system (mu I + diag(counts) G_u) C = sum of Y per
    distinct row, which gives identical predictions.
    """
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    n = X.shape[0]
    if Y.shape[0] != n:
        raise ValueError("X and Y row counts differ")
    if mu < 0.0:
        raise ValueError("mu must be nonnegative")

    uniq, inverse, counts = _distinct_rows(X)
    u = uniq.shape[0]
    if u <= max(64, n // 10) and u < n:
        Gu = gaussian_gram(uniq, uniq, sigma)
        Su = np.zeros((u, Y.shape[1]))
        np.add.at(Su, inverse, Y)
        A = mu * np.eye(u) + counts[:, None] * Gu
        jitter = 0.0
        for attempt in range(9):
            try:
                C = np.linalg.solve(A + jitter * np.eye(u), Su)
                break
            except np.linalg.LinAlgError:
                jitter = 1e-10 * np.trace(Gu) / u * (2.0 ** max(attempt, 1))
        else:
            raise np.linalg.LinAlgError("distinct-point system is singular")
        return KRRModel(inputs=uniq, coef=C, sigma=sigma, mu=mu, jitter=jitter)

    G = gaussian_gram(X, X, sigma)
    trace_scale = np.trace(G) / n
    A, jitter = _solve_psd(G + mu * np.eye(n), Y, trace_scale)
    return KRRModel(inputs=X, coef=A, sigma=sigma, mu=mu, jitter=jitter)


def krr_predict(model: KRRModel, queries) -> np.ndarray:
    return gaussian_gram(np.asarray(queries, dtype=float), model.inputs, model.sigma) @ model.coef


DEFAULT_MU_GRID = 10.0 ** np.arange(-6.0, 3.0)


def trajectory_folds(n: int, folds: int, seed) -> list[np.ndarray]:
    """Shuffle trajectory indices and split them into near-equal folds."""
    if folds < 2 or folds > n:
        raise ValueError("need 2 <= folds <= n")
    perm = np.random.default_rng(seed).permutation(n)
    return [np.sort(chunk) for chunk in np.array_split(perm, folds)]


def cv_select_mu(dataset, basis, policy, mu_grid=None, folds: int = 5, seed=0,
                 encoder: StateActionEncoder | None = None, sigma: float | None = None):
    """Pick the ridge level by trajectory-blocked cross-validation.

    Whole trajectories go to folds so serially dependent steps never straddle
    the train/validation split. The per-target squared errors are standardized
    by each target's full-sample second moment, then summed; targets with zero
    second moment are skipped with a warning. Ties prefer the smaller mu. The
    Gaussian kernel has unit diagonal, so the grid's trace(G)/n factor is one
    and the default grid is just 1e-6..1e2.

    Returns (mu, scores) with scores aligned to the grid.
    """
    if encoder is None:
        encoder = StateActionEncoder.fit(dataset, policy.num_actions)
    X = encoder.encode(dataset.states, dataset.actions)
    if sigma is None:
        sigma = median_pairwise_distance(X)
    grid = np.asarray(DEFAULT_MU_GRID if mu_grid is None else mu_grid, dtype=float)
    if grid.ndim != 1 or len(grid) == 0:
        raise ValueError("mu grid must be a nonempty vector")

    B, Y = compute_features(dataset, basis, policy)
    denom = (B * B).mean(axis=0)
    keep = denom > 0.0
    if not keep.all():
        warnings.warn(f"skipping {int((~keep).sum())} basis functions with zero second moment in CV")
    if not keep.any():
        raise ValueError("every basis function has zero second moment")
    Yk = Y[:, keep]
    w = 1.0 / denom[keep]

    T = dataset.T
    scores = np.zeros(len(grid))
    for fold in trajectory_folds(dataset.n, folds, seed):
        val_rows = (fold[:, None] * T + np.arange(T)[None, :]).ravel()
        mask = np.zeros(dataset.num_steps, dtype=bool)
        mask[val_rows] = True
        X_tr, X_val = X[~mask], X[mask]
        Y_tr, Y_val = Yk[~mask], Yk[mask]

        uniq, inverse, counts = _distinct_rows(X_tr)
        u = uniq.shape[0]
        if u <= max(64, X_tr.shape[0] // 10) and u < X_tr.shape[0]:
            Gu = gaussian_gram(uniq, uniq, sigma)
            Su = np.zeros((u, Y_tr.shape[1]))
            np.add.at(Su, inverse, Y_tr)
            Kval = gaussian_gram(X_val, uniq, sigma)
            for gi, mu in enumerate(grid):
                C = np.linalg.solve(mu * np.eye(u) + counts[:, None] * Gu, Su)
                resid = Y_val - Kval @ C
                scores[gi] += ((resid * resid).sum(axis=0) * w).sum()
        else:
            G_tr = gaussian_gram(X_tr, X_tr, sigma)
            evals, Q = np.linalg.eigh(G_tr)
            np.maximum(evals, 0.0, out=evals)
            P = Q.T @ Y_tr
            W = gaussian_gram(X_val, X_tr, sigma) @ Q
            for gi, mu in enumerate(grid):
                resid = Y_val - W @ (P / (evals + mu)[:, None])
                scores[gi] += ((resid * resid).sum(axis=0) * w).sum()

    return float(grid[int(np.argmin(scores))]), scores


def fit_projection(dataset, basis, policy, mu: float,
                   encoder: StateActionEncoder | None = None, sigma: float | None = None):
    """Fit the conditional-mean model of expected next-step features.

    Returns (model, encoder, sigma, Ghat) where Ghat holds the fitted values
    at the observed (S, A) rows.
    """
    if encoder is None:
        encoder = StateActionEncoder.fit(dataset, policy.num_actions)
    X = encoder.encode(dataset.states, dataset.actions)
    if sigma is None:
        sigma = median_pairwise_distance(X)
    _, Y = compute_features(dataset, basis, policy)
    model = krr_fit_multi(X, Y, mu, sigma)
    Ghat = krr_predict(model, X)
    return model, encoder, sigma, Ghat


def project_features(dataset, basis, policy, gamma: float, mu: float,
                     encoder: StateActionEncoder | None = None, sigma: float | None = None):
    """Projected balancing features.

    Returns (Ghat, Lhat) with Lhat = B - gamma * Ghat; rows of Ghat are
    functions of (S, A) only, so duplicated state-action pairs get identical
    rows regardless of where their transitions led.
    """
    B, _ = compute_features(dataset, basis, policy)
    _, _, _, Ghat = fit_projection(dataset, basis, policy, mu, encoder=encoder, sigma=sigma)
    return Ghat, B - gamma * Ghat
