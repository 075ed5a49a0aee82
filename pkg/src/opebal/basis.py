"""Sieve bases over state-action pairs.

The continuous-state basis is a tensor product of clamped cubic B-splines per
state dimension, duplicated into two blocks: the tensor functions gated by the
indicator of action 1, and the same tensor functions unconditionally. With m
functions per dimension the total size is K = 2 m^d. Knots sit at equally
spaced sample quantiles with boundary knots of full multiplicity at the sample
range, and evaluation clamps inputs into that range so out-of-sample states
remain well defined.

Tabular problems use the full indicator basis, one function per state-action
pair.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np


def default_basis_size(n: int, T: int) -> int:
    """Basis size rule 2 * ceil(max((nT)^(1/3), 16))."""
    nT = n * T
    if nT <= 0:
        raise ValueError("need n*T > 0")
    # tiny slack so perfect cubes do not get rounded up by float error
    raw = max(nT ** (1.0 / 3.0), 16.0)
    return 2 * int(math.ceil(raw - 1e-9))


@dataclass
class KnotVector:
    knots: np.ndarray
    degree: int

    @property
    def num_basis(self) -> int:
        return len(self.knots) - self.degree - 1

    @property
    def lo(self) -> float:
        return float(self.knots[self.degree])

    @property
    def hi(self) -> float:
        return float(self.knots[-self.degree - 1])


def quantile_knots(x, num_basis: int, degree: int = 3) -> KnotVector:
    """Clamped knot vector with interior knots at equally spaced quantiles.

    Boundary knots repeat degree+1 times at the sample min and max; the
    num_basis - degree - 1 interior knots sit at quantiles j / (n_int + 1).
    """
    x = np.asarray(x, dtype=float).ravel()
    if num_basis < degree + 1:
        raise ValueError(f"need at least degree+1 = {degree + 1} basis functions")
    lo, hi = float(x.min()), float(x.max())
    if not lo < hi:
        raise ValueError("degenerate sample: min equals max")
    n_int = num_basis - degree - 1
    if n_int > 0:
        qs = np.arange(1, n_int + 1) / (n_int + 1)
        interior = np.quantile(x, qs)
        if interior.min() <= lo or interior.max() >= hi:
            raise ValueError("interior knots collide with the sample range")
    else:
        interior = np.empty(0)
    knots = np.concatenate([np.full(degree + 1, lo), interior, np.full(degree + 1, hi)])
    return KnotVector(knots=knots, degree=degree)


def eval_bspline(x, kv: KnotVector) -> np.ndarray:
    """Dense (len(x), num_basis) matrix of B-spline values by the Cox-de Boor
    recursion, vectorized over x. Inputs are clamped into the knot span, so
    every row sums to one."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    t, p = kv.knots, kv.degree
    m = kv.num_basis
    xc = np.clip(x, kv.lo, kv.hi)
    span = np.searchsorted(t, xc, side="right") - 1
    span = np.clip(span, p, m - 1)

    # triangular recursion: N holds the p+1 basis functions alive at each span
    N = np.zeros((len(xc), p + 1))
    N[:, 0] = 1.0
    left = np.empty((len(xc), p + 1))
    right = np.empty((len(xc), p + 1))
    for j in range(1, p + 1):
        left[:, j] = xc - t[span + 1 - j]
        right[:, j] = t[span + j] - xc
        saved = np.zeros(len(xc))
        for r in range(j):
            denom = right[:, r + 1] + left[:, j - r]
            # repeated knots give zero-width intervals; their terms vanish
            frac = np.where(denom > 0.0, N[:, r] / np.where(denom > 0.0, denom, 1.0), 0.0)
            N[:, r] = saved + right[:, r + 1] * frac
            saved = left[:, j - r] * frac
        N[:, j] = saved

    out = np.zeros((len(xc), m))
    np.put_along_axis(out, span[:, None] - p + np.arange(p + 1)[None, :], N, axis=1)
    return out


class TensorSplineBasis:
    """Tensor-product spline basis with the two-block action structure.

    evaluate_batch(S, a) returns rows [tensor(S) * (a == 1), tensor(S)], so
    K = 2 * prod(num_basis per dimension). Binary actions only.
    """

    def __init__(self, knot_vectors: list[KnotVector]):
        if not knot_vectors:
            raise ValueError("need at least one dimension")
        self.knot_vectors = list(knot_vectors)
        self.degree = knot_vectors[0].degree
        self.block = int(np.prod([kv.num_basis for kv in knot_vectors]))
        self.K = 2 * self.block
        self.num_actions = 2

    @property
    def d(self) -> int:
        return len(self.knot_vectors)

    def state_tensor(self, states) -> np.ndarray:
        """(N, block) tensor-product values, last dimension fastest."""
        S = np.asarray(states, dtype=float)
        if S.ndim != 2 or S.shape[1] != self.d:
            raise ValueError(f"states must be (N, {self.d})")
        out = eval_bspline(S[:, 0], self.knot_vectors[0])
        for j in range(1, self.d):
            Bj = eval_bspline(S[:, j], self.knot_vectors[j])
            out = (out[:, :, None] * Bj[:, None, :]).reshape(S.shape[0], -1)
        return out

    def evaluate_batch(self, states, actions) -> np.ndarray:
        tensor = self.state_tensor(states)
        a = np.asarray(actions)
        if a.ndim == 0:
            a = np.full(tensor.shape[0], int(a))
        gate = (a == 1).astype(float)[:, None]
        return np.hstack([tensor * gate, tensor])

    def evaluate(self, state, action) -> np.ndarray:
        return self.evaluate_batch(np.asarray(state, dtype=float)[None, :], np.array([action]))[0]

    def expected_batch(self, states, probs) -> np.ndarray:
        """Rows sum_a probs[:, a] * basis(states, a); one tensor evaluation."""
        tensor = self.state_tensor(states)
        p = np.asarray(probs, dtype=float)
        return np.hstack([p[:, 1:2] * tensor, tensor])

    def to_dict(self) -> dict:
        return {
            "kind": "tensor_spline",
            "degree": self.degree,
            "knots": [kv.knots.tolist() for kv in self.knot_vectors],
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "TensorSplineBasis":
        kvs = [KnotVector(np.asarray(k, dtype=float), payload["degree"]) for k in payload["knots"]]
        return cls(kvs)


class IndicatorBasis:
    """One indicator per state-action pair for index-coded tabular states."""

    def __init__(self, num_states: int, num_actions: int):
        self.num_states = int(num_states)
        self.num_actions = int(num_actions)
        self.K = self.num_states * self.num_actions

    def evaluate_batch(self, states, actions) -> np.ndarray:
        idx = np.rint(np.asarray(states, dtype=float)[:, 0]).astype(int)
        a = np.asarray(actions, dtype=int)
        if a.ndim == 0:
            a = np.full(idx.shape, int(a))
        out = np.zeros((len(idx), self.K))
        out[np.arange(len(idx)), idx * self.num_actions + a] = 1.0
        return out

    def evaluate(self, state, action) -> np.ndarray:
        return self.evaluate_batch(np.asarray(state, dtype=float)[None, :], np.array([action]))[0]

    def expected_batch(self, states, probs) -> np.ndarray:
        idx = np.rint(np.asarray(states, dtype=float)[:, 0]).astype(int)
        p = np.asarray(probs, dtype=float)
        out = np.zeros((len(idx), self.K))
        rows = np.arange(len(idx))
        for a in range(self.num_actions):
            out[rows, idx * self.num_actions + a] = p[:, a]
        return out

    def to_dict(self) -> dict:
        return {"kind": "indicator", "num_states": self.num_states, "num_actions": self.num_actions}


def build_basis(dataset, K: int, degree: int = 3) -> TensorSplineBasis:
    """Spline basis for a dataset: m = floor((K/2)^(1/d)) functions per
    dimension (so the realized size 2 m^d never exceeds K), knots from the
    pooled observed states."""
    d = dataset.d
    m = int(math.floor((K / 2.0) ** (1.0 / d) + 1e-9))
    if m < degree + 1:
        raise ValueError(f"K = {K} leaves fewer than {degree + 1} functions per dimension")
    if 2 * m ** d != K:
        warnings.warn(f"basis size rounded down from {K} to {2 * m ** d} "
                      f"({m} functions per dimension)")
    kvs = [quantile_knots(dataset.states[:, j], m, degree) for j in range(d)]
    return TensorSplineBasis(kvs)


def compute_features(dataset, basis, policy):
    """Observed features B and expected next-step features under the target.

    Returns (B, Phi_next), both (n*T, K), rows in (trajectory, time) order:
    B[i*T + t] = basis(S_it, A_it) and
    Phi_next[i*T + t] = sum_a policy(a | S'_it) basis(S'_it, a).
    """
    B = basis.evaluate_batch(dataset.states, dataset.actions)
    Phi = basis.expected_batch(dataset.next_states, policy.probs_batch(dataset.next_states))
    return B, Phi


def target_moments(basis, policy, sampler, gamma: float, n_draws: int = 100000, seed=0) -> np.ndarray:
    """Monte-Carlo moment targets (1-gamma) E_ref[ sum_a pi(a|S) basis(S, a) ].

    `sampler(rng, n)` draws states from the reference distribution the policy
    value is defined against.
    """
    rng = np.random.default_rng(seed)
    draws = sampler(rng, n_draws)
    expected = basis.expected_batch(draws, policy.probs_batch(draws))
    return (1.0 - gamma) * expected.mean(axis=0)
