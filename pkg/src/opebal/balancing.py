"""Balancing weights via the convex dual with box-tolerance constraints.

The primal picks one weight per observed step minimizing the average
divergence h(weight) subject to the weighted feature means matching the
target moments within per-coordinate tolerances delta_k. Its dual is

    minimize_lam  mean(rho(L lam)) - lam @ moments + delta @ |lam|

where rho is the convex conjugate construction rho(t) = t u(t) - h(u(t)) with
u = (h')^{-1}, and the optimal weights are rho'(L lam). For the quadratic
divergence h(x) = (x - 1)^2 this gives rho(t) = t^2/4 + t and weights
L lam / 2 + 1.

The solver is a monotone accelerated proximal-gradient loop: candidate steps
use per-coordinate soft-thresholding at delta_k with backtracking line
search, a candidate is only accepted when it lowers the objective, and the
momentum restarts whenever a candidate is rejected. Quadratic divergences
collapse the objective onto the K x K feature Gram, so iterations cost O(K^2)
regardless of the number of steps. An unbounded dual (objective diving below
-1/tol) certifies that no feasible weights exist at these tolerances.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .basis import compute_features


class UnboundedDualError(RuntimeError):
    """Dual objective diverges: the primal balance constraints are infeasible."""


class InfeasibleBalanceError(RuntimeError):
    """No tolerance on the search grid produced a solvable problem."""


@dataclass
class RhoFamily:
    """Convex conjugate data of a divergence h.

    rho, rho_prime, rho_second are vectorized callables. When rho is exactly
    the quadratic a t^2 + b t, `quadratic` holds (a, b) and the solver uses
    the reduced Gram form.
    """

    name: str
    rho: callable
    rho_prime: callable
    rho_second: callable
    quadratic: tuple | None = None


def quadratic_rho() -> RhoFamily:
    """Conjugate family of h(x) = (x - 1)^2: rho(t) = t^2/4 + t."""
    return RhoFamily(
        name="quadratic",
        rho=lambda t: 0.25 * t * t + t,
        rho_prime=lambda t: 0.5 * t + 1.0,
        rho_second=lambda t: np.full_like(np.asarray(t, dtype=float), 0.5),
        quadratic=(0.25, 1.0),
    )


@dataclass
class DualProblem:
    """Feature rows L (nT x K), moment targets (K,), tolerances (K,) or scalar."""

    L: np.ndarray
    moments: np.ndarray
    delta: np.ndarray

    def __post_init__(self):
        self.L = np.asarray(self.L, dtype=float)
        self.moments = np.asarray(self.moments, dtype=float)
        K = self.L.shape[1]
        if self.moments.shape != (K,):
            raise ValueError("moments length must match feature columns")
        delta = np.asarray(self.delta, dtype=float)
        if delta.ndim == 0:
            delta = np.full(K, float(delta))
        if delta.shape != (K,) or (delta < 0).any():
            raise ValueError("delta must be a nonnegative scalar or length-K vector")
        self.delta = delta


@dataclass
class DualSolution:
    lam: np.ndarray
    weights: np.ndarray
    residuals: np.ndarray
    objective: float
    objective_trace: np.ndarray
    converged: bool
    iterations: int
    delta: np.ndarray
    message: str = ""


def balance_residuals(L, weights, moments) -> np.ndarray:
    """r_k = (1/nT) sum_it w_it L_k,it - moments_k."""
    L = np.asarray(L, dtype=float)
    return L.T @ np.asarray(weights, dtype=float) / L.shape[0] - np.asarray(moments, dtype=float)


def _soft(v, thr):
    return np.sign(v) * np.maximum(np.abs(v) - thr, 0.0)


def solve_dual(problem: DualProblem, rho: RhoFamily | None = None,
               tol: float = 1e-8, max_iter: int = 50000) -> DualSolution:
    """Minimize the dual objective; see the module docstring for the method.

    Converges when the subgradient optimality residual (scaled by
    max(1, ||moments||_inf)) falls below tol, or when the accepted objective
    stalls below tol relative change for 30 straight accepted steps. Raises
    UnboundedDualError when the objective passes -1/tol.
    """
    if rho is None:
        rho = quadratic_rho()
    L, l, delta = problem.L, problem.moments, problem.delta
    nT, K = L.shape

    if rho.quadratic is not None:
        a, b = rho.quadratic
        M = L.T @ L / nT
        mbar = L.mean(axis=0)
        c = b * mbar - l

        def f_grad(lam):
            Ml = M @ lam
            return a * lam @ Ml + c @ lam, 2.0 * a * Ml + c

        lip = 2.0 * a * float(np.linalg.eigvalsh(M)[-1])
        backtrack = False  # exact global curvature: the descent lemma always holds
    else:
        def f_grad(lam):
            z = L @ lam
            return float(np.mean(rho.rho(z))) - l @ lam, L.T @ rho.rho_prime(z) / nT - l

        curv = float(np.max(rho.rho_second(np.zeros(1))))
        lip = max(curv, 1e-12) * float(np.linalg.eigvalsh(L.T @ L / nT)[-1])
        backtrack = True

    scale = max(1.0, float(np.max(np.abs(l))))
    gtol = tol * scale
    diverge_at = -1.0 / tol
    step0 = 1.0 / max(lip, 1e-300)
    step = step0

    x = np.zeros(K)
    fx, gx = f_grad(x)
    Fx = fx
    y = x.copy()
    tk = 1.0
    trace = [Fx]
    stall = 0
    converged = False
    message = "max_iter reached"
    it = 0

    for it in range(1, max_iter + 1):
        fy, gy = f_grad(y)
        if backtrack:
            # line search on the smooth part; the step recovers between
            # iterations so a noisy rejection cannot collapse it for good
            step = min(4.0 * step, step0)
            for _ in range(60):
                z = _soft(y - step * gy, step * delta)
                dz = z - y
                fz, gz = f_grad(z)
                if fz <= fy + gy @ dz + dz @ dz / (2.0 * step) + 1e-12 * abs(fy):
                    break
                step *= 0.5
        else:
            z = _soft(y - step * gy, step * delta)
            fz, gz = f_grad(z)
        Fz = fz + delta @ np.abs(z)

        accepted = Fz <= Fx
        if accepted:
            rel_drop = (Fx - Fz) / max(1.0, abs(Fz))
            x_new, F_new = z, Fz
            stall = stall + 1 if rel_drop < tol else 0
        else:
            x_new, F_new = x, Fx
            stall = 0

        tk1 = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * tk * tk))
        y = x_new + (tk / tk1) * (z - x_new) + ((tk - 1.0) / tk1) * (x_new - x)
        x, Fx = x_new, F_new
        if not accepted:
            # candidate went uphill: drop the momentum and restart from x
            tk1 = 1.0
            y = x.copy()
        tk = tk1
        trace.append(Fx)

        if Fx < diverge_at or np.max(np.abs(x)) > 1e12:
            raise UnboundedDualError(
                f"dual objective unbounded below at delta={np.min(delta):.3g} (iteration {it})"
            )

        fx, gx = f_grad(x)
        # subgradient optimality residual, measured on the gradient directly:
        # active coordinates must sit on their threshold, inactive ones inside it
        kkt_gap = float(np.max(np.where(
            x != 0.0,
            np.abs(gx + delta * np.sign(x)),
            np.maximum(np.abs(gx) - delta, 0.0),
        )))
        if kkt_gap <= gtol:
            converged = True
            message = "optimality residual below tolerance"
            break
        if stall >= 30:
            converged = True
            message = "objective stalled below relative tolerance"
            break

    weights = rho.rho_prime(L @ x)
    return DualSolution(
        lam=x,
        weights=weights,
        residuals=balance_residuals(L, weights, l),
        objective=float(Fx),
        objective_trace=np.asarray(trace),
        converged=converged,
        iterations=it,
        delta=delta.copy(),
        message=message,
    )


DELTA_GRID_DECADES = (-8.0, 0.0)
DELTA_GRID_POINTS = 25


def default_delta_grid(moments) -> np.ndarray:
    """Log-spaced tolerance grid 1e-8..1 times the sup norm of the moments."""
    linf = float(np.max(np.abs(moments)))
    if linf <= 0.0:
        raise ValueError("moment targets are all zero")
    return np.logspace(*DELTA_GRID_DECADES, DELTA_GRID_POINTS) * linf


@dataclass
class MinDeltaResult:
    delta: float
    solution: DualSolution
    attempts: list = field(default_factory=list)  # (delta, feasible) in trial order


def min_feasible_delta(L, moments, rho: RhoFamily | None = None, grid=None,
                       tol: float = 1e-8, max_iter: int = 50000) -> MinDeltaResult:
    """Smallest grid tolerance whose dual solve converges with bounded lambda.

    Feasibility is monotone along the grid, so after probing the smallest
    point (the common case: it works) the boundary is located by bisection.
    """
    grid = default_delta_grid(moments) if grid is None else np.asarray(grid, dtype=float)
    if grid.ndim != 1 or len(grid) == 0:
        raise ValueError("delta grid must be a nonempty vector")
    grid = np.sort(grid)
    attempts = []
    solutions: dict[int, DualSolution] = {}

    def feasible(j: int) -> bool:
        try:
            sol = solve_dual(DualProblem(L, moments, grid[j]), rho, tol=tol, max_iter=max_iter)
        except UnboundedDualError:
            attempts.append((float(grid[j]), False))
            return False
        attempts.append((float(grid[j]), sol.converged))
        if sol.converged:
            solutions[j] = sol
        return sol.converged

    if feasible(0):
        return MinDeltaResult(float(grid[0]), solutions[0], attempts)
    lo, hi = 0, len(grid) - 1
    if not feasible(hi):
        raise InfeasibleBalanceError(
            f"no feasible tolerance on the grid (largest tried {grid[-1]:.3g})"
        )
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if feasible(mid):
            hi = mid
        else:
            lo = mid
    return MinDeltaResult(float(grid[hi]), solutions[hi], attempts)


def naive_features(dataset, basis, policy, gamma: float) -> np.ndarray:
    """Unprojected rows B(S, A) - gamma * E_pi B(S', .), one per observed step.

    These depend on the realized next state, so duplicated (s, a) pairs can
    get different rows; the projected variant exists to remove exactly that.
    """
    B, Phi = compute_features(dataset, basis, policy)
    return B - gamma * Phi


def gram_min_eigenvalue(L) -> float:
    """Smallest eigenvalue of the feature Gram (1/nT) L^T L, a conditioning
    diagnostic for the balance system."""
    L = np.asarray(L, dtype=float)
    return float(np.linalg.eigvalsh(L.T @ L / L.shape[0])[0])
