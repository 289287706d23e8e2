"""Trajectory containers, window extraction and coordinate normalization.

A planning trajectory is H state-action pairs. Flattened layout is time-major
with the state block before the action block at each step:
[s_0 | a_0 | s_1 | a_1 | ...]. Discrete states/actions are one-hot encoded so
the same diffusion core serves discrete and continuous environments.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyWindowError, ShapeError


def discounted_sum(values, gamma: float) -> float:
    """sum_t gamma^t * values[t] (t starts at 0)."""
    v = np.asarray(values, dtype=np.float64)
    return float(v @ np.power(float(gamma), np.arange(len(v))))


def state_to_vec(spec, s) -> np.ndarray:
    if spec.discrete:
        v = np.zeros(spec.state_dim)
        v[int(s)] = 1.0
        return v
    return np.asarray(s, dtype=np.float64)


def action_to_vec(spec, a) -> np.ndarray:
    if spec.discrete:
        v = np.zeros(spec.action_dim)
        v[int(a)] = 1.0
        return v
    return np.asarray(a, dtype=np.float64)


def vec_to_action(spec, v: np.ndarray):
    """Planner-space action back to env space: argmax over the one-hot block
    for discrete envs, passthrough otherwise."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (spec.action_dim,):
        raise ShapeError(f"action vector shape {v.shape} vs ({spec.action_dim},)")
    if spec.discrete:
        return int(np.argmax(v))
    return v


@dataclass
class Trajectory:
    """H state-action pairs in planning (encoded) coordinates."""

    states: np.ndarray   # (H, state_dim)
    actions: np.ndarray  # (H, action_dim)

    @property
    def horizon(self) -> int:
        return self.states.shape[0]

    def stacked(self) -> np.ndarray:
        return np.concatenate([self.states, self.actions], axis=1)

    def flatten(self) -> np.ndarray:
        return self.stacked().ravel()

    @classmethod
    def unflatten(cls, vec: np.ndarray, horizon: int, state_dim: int, action_dim: int):
        d = state_dim + action_dim
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (horizon * d,):
            raise ShapeError(f"flat shape {vec.shape} vs ({horizon * d},)")
        rows = vec.reshape(horizon, d)
        return cls(rows[:, :state_dim].copy(), rows[:, state_dim:].copy())


@dataclass
class Normalizer:
    """Per-coordinate affine map onto [-1, 1] fitted from data min/max.

    Constant coordinates map to 0 and invert back to their original value.
    """

    offset: np.ndarray      # per-coordinate minimum
    half_range: np.ndarray  # (max - min) / 2; zero for constant coordinates

    @classmethod
    def fit(cls, rows: np.ndarray) -> "Normalizer":
        rows = np.asarray(rows, dtype=np.float64).reshape(-1, np.shape(rows)[-1])
        lo = rows.min(axis=0)
        hi = rows.max(axis=0)
        return cls(lo, (hi - lo) / 2.0)

    def normalize(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        out = np.zeros_like(x)
        nz = self.half_range > 0
        out[..., nz] = (x[..., nz] - self.offset[nz]) / self.half_range[nz] - 1.0
        return out

    def denormalize(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        return self.offset + (z + 1.0) * self.half_range


def to_step_offsets(rows: np.ndarray, state_dim: int) -> np.ndarray:
    """Rewrite window state rows as (first state, stepwise displacements).

    Row 0 keeps the absolute first state; row t >= 1 holds s_t - s_{t-1}.
    Actions are untouched. Displacements are bounded by the dynamics, so a
    generative model working in this space cannot emit position jumps that no
    action could produce.
    """
    out = np.array(rows, dtype=np.float64, copy=True)
    out[..., 1:, :state_dim] = np.diff(
        np.asarray(rows, dtype=np.float64)[..., :state_dim], axis=-2)
    return out


def from_step_offsets(rows: np.ndarray, state_dim: int) -> np.ndarray:
    """Invert to_step_offsets by cumulative summation along the window."""
    out = np.array(rows, dtype=np.float64, copy=True)
    out[..., :state_dim] = np.cumsum(out[..., :state_dim], axis=-2)
    return out


@dataclass
class WindowSet:
    """Fixed-horizon training windows with to-go labels.

    Labels are discounted sums from the window's first step to the episode
    end (not just the window end), so value heads trained on them estimate
    full remaining return/cost.
    """

    obs: np.ndarray          # (n, H, state_dim)
    acts: np.ndarray         # (n, H, action_dim)
    reward_togo: np.ndarray  # (n,)
    cost_togo: np.ndarray    # (n,)
    horizon: int

    def __len__(self) -> int:
        return self.obs.shape[0]

    def flat(self, normalizer: Normalizer | None = None) -> np.ndarray:
        rows = np.concatenate([self.obs, self.acts], axis=2)
        if normalizer is not None:
            rows = normalizer.normalize(rows)
        return rows.reshape(len(self), -1)


def make_windows(dataset, spec, horizon: int) -> WindowSet:
    """Slide a length-`horizon` window over every episode.

    An episode of T steps yields max(0, T - horizon + 1) windows; episodes
    shorter than the horizon contribute none. Raises EmptyWindowError when no
    episode is long enough.
    """
    if horizon <= 0:
        raise ShapeError(f"horizon must be positive, got {horizon}")
    gamma = spec.gamma
    obs, acts, r_togo, c_togo = [], [], [], []
    for ep in dataset.episodes:
        T = len(ep.rewards)
        if T < horizon:
            continue
        sv = np.stack([state_to_vec(spec, s) for s in ep.states])
        av = np.stack([action_to_vec(spec, a) for a in ep.actions])
        # suffix discounted sums: togo[t] = sum_{k>=t} gamma^(k-t) x[k]
        rt = np.zeros(T + 1)
        ct = np.zeros(T + 1)
        for t in range(T - 1, -1, -1):
            rt[t] = ep.rewards[t] + gamma * rt[t + 1]
            ct[t] = ep.costs[t] + gamma * ct[t + 1]
        for t0 in range(T - horizon + 1):
            obs.append(sv[t0:t0 + horizon])
            acts.append(av[t0:t0 + horizon])
            r_togo.append(rt[t0])
            c_togo.append(ct[t0])
    if not obs:
        raise EmptyWindowError(f"no episode is at least {horizon} steps long")
    return WindowSet(np.stack(obs), np.stack(acts),
                     np.asarray(r_togo), np.asarray(c_togo), horizon)
