"""Trajectory dataset container and delimited-file round trips.

A dataset holds n trajectories of equal length T from a discrete-time MDP
with d-dimensional continuous (or index-coded) states and integer actions.
Rows are stored flat in (trajectory, time) order, so row i*T + t is step t
of trajectory i.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np


@dataclass
class Dataset:
    """Flattened batch of trajectories.

    states, next_states : (n*T, d) float arrays
    actions             : (n*T,) integer array
    rewards             : (n*T,) float array
    """

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    n: int
    T: int

    def __post_init__(self):
        nT = self.n * self.T
        self.states = np.asarray(self.states, dtype=float)
        self.next_states = np.asarray(self.next_states, dtype=float)
        self.actions = np.asarray(self.actions, dtype=int)
        self.rewards = np.asarray(self.rewards, dtype=float)
        if self.states.ndim != 2 or self.states.shape[0] != nT:
            raise ValueError("states must have shape (n*T, d)")
        if self.next_states.shape != self.states.shape:
            raise ValueError("next_states shape mismatch")
        if self.actions.shape != (nT,) or self.rewards.shape != (nT,):
            raise ValueError("actions/rewards must have shape (n*T,)")

    @property
    def d(self) -> int:
        return self.states.shape[1]

    @property
    def num_steps(self) -> int:
        return self.n * self.T

    def trajectory(self, i: int):
        """Return (states (T+1, d), actions (T,), rewards (T,)) of trajectory i."""
        sl = slice(i * self.T, (i + 1) * self.T)
        s = np.vstack([self.states[sl], self.next_states[sl][-1:]])
        return s, self.actions[sl], self.rewards[sl]

    def equals(self, other: "Dataset") -> bool:
        return (
            self.n == other.n
            and self.T == other.T
            and np.array_equal(self.states, other.states)
            and np.array_equal(self.actions, other.actions)
            and np.array_equal(self.rewards, other.rewards)
            and np.array_equal(self.next_states, other.next_states)
        )


def from_trajectories(trajectories) -> Dataset:
    """Build a Dataset from [(states (T+1, d), actions (T,), rewards (T,)), ...]."""
    if not trajectories:
        raise ValueError("no trajectories given")
    T = len(trajectories[0][1])
    states, actions, rewards, nexts = [], [], [], []
    for s, a, r in trajectories:
        s = np.asarray(s, dtype=float)
        if len(a) != T:
            raise ValueError("trajectories have unequal lengths")
        if s.shape[0] != T + 1:
            raise ValueError("need T+1 states per trajectory (terminal included)")
        states.append(s[:-1])
        nexts.append(s[1:])
        actions.append(np.asarray(a, dtype=int))
        rewards.append(np.asarray(r, dtype=float))
    return Dataset(
        states=np.vstack(states),
        actions=np.concatenate(actions),
        rewards=np.concatenate(rewards),
        next_states=np.vstack(nexts),
        n=len(trajectories),
        T=T,
    )


def export_dataset(dataset: Dataset, path) -> None:
    """Write a dataset as CSV with columns traj_id, t, s_1..s_d, action, reward.

    Each trajectory contributes T+1 rows; the final row (t = T) carries the
    terminal state with empty action and reward cells. Floats are written with
    repr so a round trip through import_dataset is bit-exact.
    """
    d = dataset.d
    header = ["traj_id", "t"] + [f"s_{j + 1}" for j in range(d)] + ["action", "reward"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(dataset.n):
            s, a, r = dataset.trajectory(i)
            for t in range(dataset.T):
                writer.writerow([i, t] + [repr(float(x)) for x in s[t]] + [int(a[t]), repr(float(r[t]))])
            writer.writerow([i, dataset.T] + [repr(float(x)) for x in s[dataset.T]] + ["", ""])


def import_dataset(path, ragged: str = "error") -> Dataset:
    """Read a dataset written by export_dataset.

    Validates the schema: required columns, contiguous time indices starting at
    zero, and a terminal state row (empty action/reward) closing every
    trajectory. `ragged` controls unequal trajectory lengths: "error" rejects
    them, "truncate" cuts all trajectories to the shortest length.
    """
    if ragged not in ("error", "truncate"):
        raise ValueError("ragged must be 'error' or 'truncate'")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ValueError("empty file")
        state_cols = [c for c in header if c.startswith("s_")]
        expected = ["traj_id", "t"] + state_cols + ["action", "reward"]
        if header != expected or not state_cols:
            raise ValueError(f"unexpected header {header!r}")
        d = len(state_cols)
        rows_by_traj: dict[int, list] = {}
        for row in reader:
            if not row:
                continue
            if len(row) != len(header):
                raise ValueError(f"row has {len(row)} fields, expected {len(header)}")
            tid, t = int(row[0]), int(row[1])
            s = [float(x) for x in row[2 : 2 + d]]
            a_raw, r_raw = row[2 + d], row[3 + d]
            terminal = a_raw == "" and r_raw == ""
            if (a_raw == "") != (r_raw == ""):
                raise ValueError(f"trajectory {tid} t={t}: action and reward must be both present or both empty")
            rows_by_traj.setdefault(tid, []).append((t, s, None if terminal else (int(a_raw), float(r_raw))))

    trajectories = []
    lengths = []
    for tid in sorted(rows_by_traj):
        rows = sorted(rows_by_traj[tid], key=lambda x: x[0])
        times = [t for t, _, _ in rows]
        if times != list(range(len(rows))):
            raise ValueError(f"trajectory {tid}: time indices not contiguous from 0")
        if rows[-1][2] is not None:
            raise ValueError(f"trajectory {tid}: missing terminal state row")
        for t, _, ar in rows[:-1]:
            if ar is None:
                raise ValueError(f"trajectory {tid} t={t}: interior row without action/reward")
        states = np.array([s for _, s, _ in rows], dtype=float)
        actions = np.array([ar[0] for _, _, ar in rows[:-1]], dtype=int)
        rewards = np.array([ar[1] for _, _, ar in rows[:-1]], dtype=float)
        trajectories.append((states, actions, rewards))
        lengths.append(len(actions))

    if len(set(lengths)) > 1:
        if ragged == "error":
            raise ValueError(f"trajectories have unequal lengths {sorted(set(lengths))}")
        T_min = min(lengths)
        trajectories = [(s[: T_min + 1], a[:T_min], r[:T_min]) for s, a, r in trajectories]
    return from_trajectories(trajectories)
