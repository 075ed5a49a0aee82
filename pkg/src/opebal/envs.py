"""Environments, policies, simulators, and exact tabular oracles.

Two environment families are provided. The benchmark environment is a
two-dimensional linear-Gaussian MDP with binary actions where one action
amplifies and the other flips each state coordinate. Tabular environments
carry explicit transition and reward tables and admit exact policy values and
exact discounted visitation ratios, which the tests use as ground truth.

States are always (d,) float arrays; tabular environments code the state index
as a length-one float vector so everything downstream is representation
agnostic.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset


# ---------------------------------------------------------------------------
# policies


class Policy:
    """Stationary stochastic policy over a finite action set."""

    num_actions: int = 2

    def probs(self, state) -> np.ndarray:
        return self.probs_batch(np.asarray(state, dtype=float)[None, :])[0]

    def probs_batch(self, states) -> np.ndarray:
        raise NotImplementedError

    def sample(self, rng: np.random.Generator, states) -> np.ndarray:
        p = self.probs_batch(states)
        u = rng.random(p.shape[0])
        return (u[:, None] >= np.cumsum(p, axis=1)).sum(axis=1).astype(int)


class BernoulliPolicy(Policy):
    """Picks action 1 with fixed probability p1, independent of state."""

    def __init__(self, p1: float):
        if not 0.0 <= p1 <= 1.0:
            raise ValueError("p1 must lie in [0, 1]")
        self.p1 = float(p1)

    def probs_batch(self, states):
        n = np.asarray(states).shape[0]
        return np.tile([1.0 - self.p1, self.p1], (n, 1))


class ConstantActionPolicy(Policy):
    def __init__(self, action: int, num_actions: int = 2):
        self.action = int(action)
        self.num_actions = int(num_actions)

    def probs_batch(self, states):
        n = np.asarray(states).shape[0]
        p = np.zeros((n, self.num_actions))
        p[:, self.action] = 1.0
        return p


class QuadrantPolicy(Policy):
    """Deterministic: action 1 iff both coordinates are nonpositive."""

    def probs_batch(self, states):
        s = np.asarray(states, dtype=float)
        p1 = ((s[:, 0] <= 0.0) & (s[:, 1] <= 0.0)).astype(float)
        return np.stack([1.0 - p1, p1], axis=1)


class SmoothExpPolicy(Policy):
    """P(action 1) = exp(-(s1 + s2)) clipped into [0, 1]."""

    def probs_batch(self, states):
        s = np.asarray(states, dtype=float)
        p1 = np.clip(np.exp(-(s[:, 0] + s[:, 1])), 0.0, 1.0)
        return np.stack([1.0 - p1, p1], axis=1)


class TablePolicy(Policy):
    """Tabular policy; states are index-coded length-one vectors."""

    def __init__(self, table):
        self.table = np.asarray(table, dtype=float)
        if self.table.ndim != 2:
            raise ValueError("table must be (num_states, num_actions)")
        if not np.allclose(self.table.sum(axis=1), 1.0):
            raise ValueError("rows must sum to 1")
        self.num_actions = self.table.shape[1]

    def probs_batch(self, states):
        idx = np.rint(np.asarray(states, dtype=float)[:, 0]).astype(int)
        return self.table[idx]


_TARGETS = {
    "pi1": lambda: ConstantActionPolicy(1),
    "pi2": lambda: QuadrantPolicy(),
    "pi3": lambda: SmoothExpPolicy(),
    "pi4": lambda: BernoulliPolicy(0.5),
}


def target_policy(name: str) -> Policy:
    """Benchmark target policies pi1..pi4 (always-treat, quadrant, smooth, coin flip)."""
    try:
        return _TARGETS[name]()
    except KeyError:
        raise ValueError(f"unknown target policy {name!r}; choose from {sorted(_TARGETS)}") from None


# ---------------------------------------------------------------------------
# environments


class LinearGaussianEnv:
    """Two-dimensional benchmark MDP with binary actions.

    S'_1 = 0.75 (2A - 1) S_1 + eps_1,  S'_2 = 0.75 (1 - 2A) S_2 + eps_2,
    eps ~ N(0, 0.25) independently, R = 2 S'_1 + S'_2 - 0.25 (2A - 1),
    initial states standard normal.
    """

    d = 2
    num_actions = 2
    noise_std = 0.5

    def sample_initial(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.standard_normal((n, 2))

    # reference distribution for the value definition; same as the initial one here
    def sample_reference(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return self.sample_initial(rng, n)

    def step(self, rng: np.random.Generator, states, actions):
        s = np.asarray(states, dtype=float)
        sign = 2.0 * np.asarray(actions) - 1.0
        eps = rng.normal(0.0, self.noise_std, size=s.shape)
        nxt = np.empty_like(s)
        nxt[:, 0] = 0.75 * sign * s[:, 0] + eps[:, 0]
        nxt[:, 1] = -0.75 * sign * s[:, 1] + eps[:, 1]
        rewards = 2.0 * nxt[:, 0] + nxt[:, 1] - 0.25 * sign
        return nxt, rewards


@dataclass
class TabularEnv:
    """Finite MDP with explicit tables.

    transitions : (S, A, S) row-stochastic array
    rewards     : (S, A) deterministic reward of taking a in s
    initial     : (S,) distribution generating the logged data
    reference   : (S,) distribution defining the policy value (defaults to initial)
    """

    transitions: np.ndarray
    rewards: np.ndarray
    initial: np.ndarray
    reference: np.ndarray = None

    def __post_init__(self):
        self.transitions = np.asarray(self.transitions, dtype=float)
        self.rewards = np.asarray(self.rewards, dtype=float)
        self.initial = np.asarray(self.initial, dtype=float)
        S, A, S2 = self.transitions.shape
        if S != S2 or self.rewards.shape != (S, A):
            raise ValueError("inconsistent table shapes")
        if not np.allclose(self.transitions.sum(axis=2), 1.0):
            raise ValueError("transition rows must sum to 1")
        if self.reference is None:
            self.reference = self.initial.copy()
        self.reference = np.asarray(self.reference, dtype=float)

    @property
    def d(self) -> int:
        return 1

    @property
    def num_states(self) -> int:
        return self.transitions.shape[0]

    @property
    def num_actions(self) -> int:
        return self.transitions.shape[1]

    def sample_initial(self, rng, n):
        idx = rng.choice(self.num_states, size=n, p=self.initial)
        return idx.astype(float)[:, None]

    def sample_reference(self, rng, n):
        idx = rng.choice(self.num_states, size=n, p=self.reference)
        return idx.astype(float)[:, None]

    def step(self, rng, states, actions):
        idx = np.rint(np.asarray(states, dtype=float)[:, 0]).astype(int)
        a = np.asarray(actions, dtype=int)
        u = rng.random(idx.shape[0])
        cum = np.cumsum(self.transitions[idx, a], axis=1)
        nxt = (u[:, None] >= cum).sum(axis=1)
        return nxt.astype(float)[:, None], self.rewards[idx, a].copy()


# ---------------------------------------------------------------------------
# simulation


def simulate(env, policy: Policy, n: int, T: int, seed) -> Dataset:
    """Roll n trajectories of length T under `policy`; deterministic in `seed`."""
    rng = np.random.default_rng(seed)
    s = env.sample_initial(rng, n)
    states = np.empty((n, T, env.d))
    nexts = np.empty((n, T, env.d))
    actions = np.empty((n, T), dtype=int)
    rewards = np.empty((n, T))
    for t in range(T):
        a = policy.sample(rng, s)
        nxt, r = env.step(rng, s, a)
        states[:, t] = s
        actions[:, t] = a
        rewards[:, t] = r
        nexts[:, t] = nxt
        s = nxt
    return Dataset(
        states=states.reshape(n * T, env.d),
        actions=actions.reshape(n * T),
        rewards=rewards.reshape(n * T),
        next_states=nexts.reshape(n * T, env.d),
        n=n,
        T=T,
    )


def default_horizon(gamma: float, tail: float = 1e-8) -> int:
    """Smallest h with gamma^h below `tail`."""
    if not 0.0 < gamma < 1.0:
        raise ValueError("gamma must lie in (0, 1)")
    return int(math.ceil(math.log(tail) / math.log(gamma)))


def monte_carlo_truth(env, policy: Policy, gamma: float, n_paths: int = 10000,
                      horizon: int | None = None, seed=0):
    """Simulated normalized policy value (1-gamma) E sum_t gamma^t R_t.

    Paths start from the environment's reference distribution. Returns
    (value, standard_error); the average is over paths, each contributing its
    discounted return.
    """
    if horizon is None:
        horizon = default_horizon(gamma)
    rng = np.random.default_rng(seed)
    s = env.sample_reference(rng, n_paths)
    total = np.zeros(n_paths)
    disc = 1.0
    for _ in range(horizon):
        a = policy.sample(rng, s)
        s, r = env.step(rng, s, a)
        total += disc * r
        disc *= gamma
    total *= 1.0 - gamma
    return float(total.mean()), float(total.std(ddof=1) / math.sqrt(n_paths))


# ---------------------------------------------------------------------------
# exact tabular oracles


def _policy_table(policy: Policy, num_states: int, num_actions: int) -> np.ndarray:
    states = np.arange(num_states, dtype=float)[:, None]
    table = policy.probs_batch(states)
    if table.shape != (num_states, num_actions):
        raise ValueError("policy is incompatible with this state/action space")
    return table


def exact_policy_value(env: TabularEnv, policy: Policy, gamma: float) -> float:
    """Normalized value (1-gamma) E_ref[ sum_a pi(a|S) Q(S, a) ] by direct solve.

    Q solves the (S*A)-dimensional linear Bellman system
    Q = r + gamma * P Pi Q.
    """
    S, A = env.num_states, env.num_actions
    pi = _policy_table(policy, S, A)
    # (s,a) -> (s',a') transition under the policy
    P = env.transitions.reshape(S * A, S)
    PPi = P[:, :, None] * pi[None, :, :]
    PPi = PPi.reshape(S * A, S * A)
    q = np.linalg.solve(np.eye(S * A) - gamma * PPi, env.rewards.reshape(S * A))
    v0 = (pi * q.reshape(S, A)).sum(axis=1)
    return float((1.0 - gamma) * env.reference @ v0)


class CoverageError(ValueError):
    """Raised when the target visits state-action pairs the data never does."""


def exact_visitation_ratio(env: TabularEnv, target: Policy, behavior: Policy,
                           gamma: float, T: int, tail: float = 1e-12) -> np.ndarray:
    """Exact ratio of discounted target visitation to average behavior visitation.

    Numerator: (1-gamma) sum_t gamma^t P(S_t = s, A_t = a) under `target` from
    the reference distribution, truncated once gamma^t < tail. Denominator:
    (1/T) sum_{t<T} P(S_t = s, A_t = a) under `behavior` from the initial
    distribution. Returns an (S, A) array; raises CoverageError on division by
    zero at a pair the target actually visits.
    """
    S, A = env.num_states, env.num_actions
    pi_t = _policy_table(target, S, A)
    pi_b = _policy_table(behavior, S, A)

    def propagate(pi, init, steps):
        out = []
        p_state = init.copy()
        for _ in range(steps):
            p_sa = p_state[:, None] * pi
            out.append(p_sa)
            p_state = np.einsum("sa,sat->t", p_sa, env.transitions)
        return out

    horizon = default_horizon(gamma, tail)
    num = np.zeros((S, A))
    p_state = env.reference.copy()
    disc = 1.0
    for _ in range(horizon):
        num += disc * (p_state[:, None] * pi_t)
        p_state = np.einsum("sa,sat->t", p_state[:, None] * pi_t, env.transitions)
        disc *= gamma
    num *= 1.0 - gamma

    den = np.zeros((S, A))
    for p_sa in propagate(pi_b, env.initial, T):
        den += p_sa
    den /= T

    ratio = np.zeros((S, A))
    uncovered = (den == 0.0) & (num > 1e-15)
    if uncovered.any():
        raise CoverageError(f"target visits uncovered pairs {np.argwhere(uncovered).tolist()}")
    mask = den > 0.0
    ratio[mask] = num[mask] / den[mask]
    return ratio


# ---------------------------------------------------------------------------
# glucose penalty used by the health-monitoring example


def igc_reward(glucose):
    """Piecewise penalty for a glucose level: zero inside [80, 140), a squared
    penalty below and a power-law penalty above, both scaled by 1/30."""
    g = np.asarray(glucose, dtype=float)
    # each clipped branch vanishes outside its own range, so the sum is the
    # piecewise value and no fractional power ever sees a negative base
    low = -((80.0 - np.minimum(g, 80.0)) ** 2) / 30.0
    high = -((np.maximum(g, 140.0) - 140.0) ** 1.35) / 30.0
    out = low + high
    return out if out.ndim else float(out)
