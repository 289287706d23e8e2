"""Return and cost estimators over noised trajectories, and the budget-aware
guidance gradient assembled from them.

Both heads condition on the diffusion step index so they stay calibrated
along the whole reverse chain (step 0 means a clean trajectory). The cost
head passes through a softplus so estimates are nonnegative by construction.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .diffusion import EMB_DIM, NoiseSchedule, add_noise, step_embedding
from .errors import CheckpointError, GuidanceError, ShapeError


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _softplus(z: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, z)


@dataclass
class GuidanceConfig:
    """Guidance strength and overspend penalty slope."""

    alpha: float = 0.1
    penalty: float = 100.0


@dataclass
class GuidePair:
    """Reward head (whitened linear output) and nonnegative cost head."""

    reward_head: nn.Mlp
    cost_head: nn.Mlp
    reward_mean: float
    reward_scale: float
    horizon: int
    state_dim: int
    action_dim: int
    env_spec_hash: str

    @property
    def flat_dim(self) -> int:
        return self.horizon * (self.state_dim + self.action_dim)

    @classmethod
    def create(cls, horizon: int, state_dim: int, action_dim: int,
               rng: np.random.Generator, hidden=(128, 128),
               env_spec_hash: str = "") -> "GuidePair":
        d = horizon * (state_dim + action_dim) + EMB_DIM
        return cls(nn.Mlp.init((d, *hidden, 1), rng),
                   nn.Mlp.init((d, *hidden, 1), rng),
                   0.0, 1.0, horizon, state_dim, action_dim, env_spec_hash)

    def _with_emb(self, x: np.ndarray, i) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.flat_dim:
            raise ShapeError(f"trajectory dim {x.shape[1]} vs {self.flat_dim}")
        emb = step_embedding(i)
        if emb.ndim == 1:
            emb = np.broadcast_to(emb, (x.shape[0], EMB_DIM))
        return np.concatenate([x, emb], axis=1)

    def reward_value(self, x: np.ndarray, i) -> np.ndarray:
        raw = self.reward_head.forward(self._with_emb(x, i))
        return self.reward_mean + self.reward_scale * raw[:, 0]

    def cost_value(self, x: np.ndarray, i) -> np.ndarray:
        raw = self.cost_head.forward(self._with_emb(x, i))
        return _softplus(raw[:, 0])

    def reward_value_and_grad(self, x: np.ndarray, i):
        inp = self._with_emb(x, i)
        raw, cache, _ = self.reward_head.forward_cached(inp)
        delta = np.full((inp.shape[0], 1), self.reward_scale)
        _, _, dx = self.reward_head.backprop(cache, delta)
        return self.reward_mean + self.reward_scale * raw[:, 0], dx[:, :self.flat_dim]

    def cost_value_and_grad(self, x: np.ndarray, i):
        inp = self._with_emb(x, i)
        raw, cache, _ = self.cost_head.forward_cached(inp)
        delta = _sigmoid(raw)  # d softplus
        _, _, dx = self.cost_head.backprop(cache, delta)
        return _softplus(raw[:, 0]), dx[:, :self.flat_dim]


def smoothed_objective(reward, cost, budget: float, penalty: float):
    """Return minus the linear overspend penalty; spending exactly the budget
    is not penalized."""
    reward = np.asarray(reward, dtype=np.float64)
    cost = np.asarray(cost, dtype=np.float64)
    over = np.where(cost > budget, cost - budget, 0.0)
    return reward - penalty * over


def guidance_gradient(pair: GuidePair, cfg: GuidanceConfig, x: np.ndarray, i,
                      budget: float) -> np.ndarray:
    """alpha * d(smoothed objective)/dx at noised trajectories x.

    Rows estimated within budget get the pure reward gradient; overspending
    rows get the penalty branch.
    """
    c_hat, dc = pair.cost_value_and_grad(x, i)
    _, dr = pair.reward_value_and_grad(x, i)
    unsafe = (c_hat > budget)[:, None]
    g = cfg.alpha * (dr - cfg.penalty * np.where(unsafe, dc, 0.0))
    if not np.all(np.isfinite(g)):
        raise GuidanceError("non-finite guidance gradient")
    return g


def train_guides(pair: GuidePair, schedule: NoiseSchedule, x0_flat: np.ndarray,
                 reward_togo: np.ndarray, cost_togo: np.ndarray, steps: int,
                 rng: np.random.Generator, batch_size: int = 64, lr: float = 1e-3,
                 log_every: int = 200) -> dict:
    """Regress both heads against to-go labels on noised inputs.

    The noise level is uniform over {0, 1, ..., N} per sample; level 0 trains
    the heads on clean trajectories. Reward labels are whitened (the affine
    transform is stored on the pair); cost labels are fit through softplus.
    """
    X0 = np.asarray(x0_flat, dtype=np.float64)
    yr = np.asarray(reward_togo, dtype=np.float64)
    yc = np.asarray(cost_togo, dtype=np.float64)
    if np.any(yc < 0):
        raise ShapeError("cost-to-go labels must be nonnegative")
    pair.reward_mean = float(yr.mean())
    pair.reward_scale = float(max(yr.std(), 1e-6))
    yr_white = (yr - pair.reward_mean) / pair.reward_scale

    opt_r = nn.AdamState.for_net(pair.reward_head, lr=lr)
    opt_c = nn.AdamState.for_net(pair.cost_head, lr=lr)
    curves = {"reward": [], "cost": []}
    n = X0.shape[0]
    for k in range(steps):
        idx = rng.integers(0, n, size=batch_size)
        i = rng.integers(0, schedule.n_steps + 1, size=batch_size)
        xi, _ = add_noise(schedule, X0[idx], i, rng)
        inp = np.concatenate([xi, step_embedding(i)], axis=1)

        loss_r = nn.train_step(pair.reward_head, opt_r, inp, yr_white[idx][:, None])

        raw, cache, _ = pair.cost_head.forward_cached(inp)
        pred = _softplus(raw)
        resid = pred - yc[idx][:, None]
        loss_c = float(np.mean(resid ** 2))
        if not np.isfinite(loss_c):
            raise nn.TrainingDivergenceError("cost head loss went non-finite")
        delta = (2.0 / resid.size) * resid * _sigmoid(raw)
        dWs, dbs, _ = pair.cost_head.backprop(cache, delta)
        nn.adam_step(pair.cost_head, opt_c, dWs, dbs)

        if k % log_every == 0 or k == steps - 1:
            curves["reward"].append(loss_r)
            curves["cost"].append(loss_c)
    return {k: np.asarray(v) for k, v in curves.items()}


def save_guides(pair: GuidePair, path) -> None:
    arrays = {}
    for tag, net in (("r", pair.reward_head), ("c", pair.cost_head)):
        for k, W in enumerate(net.weights):
            arrays[f"{tag}W{k}"] = W
        for k, b in enumerate(net.biases):
            arrays[f"{tag}b{k}"] = b
    np.savez(path,
             format_version=np.int64(nn.FORMAT_VERSION),
             r_layer_sizes=np.asarray(pair.reward_head.layer_sizes, dtype=np.int64),
             c_layer_sizes=np.asarray(pair.cost_head.layer_sizes, dtype=np.int64),
             activation=np.array(pair.reward_head.activation),
             reward_affine=np.asarray([pair.reward_mean, pair.reward_scale]),
             dims=np.asarray([pair.horizon, pair.state_dim, pair.action_dim],
                             dtype=np.int64),
             env_spec_hash=np.array(pair.env_spec_hash),
             **arrays)


def load_guides(path) -> GuidePair:
    with np.load(path, allow_pickle=False) as z:
        if int(z["format_version"]) != nn.FORMAT_VERSION:
            raise CheckpointError("unsupported guide checkpoint version")
        act = str(z["activation"])
        nets = {}
        for tag, key in (("r", "r_layer_sizes"), ("c", "c_layer_sizes")):
            sizes = tuple(int(s) for s in z[key])
            nets[tag] = nn.Mlp(sizes,
                               [z[f"{tag}W{k}"] for k in range(len(sizes) - 1)],
                               [z[f"{tag}b{k}"] for k in range(len(sizes) - 1)],
                               act)
        mean, scale = (float(v) for v in z["reward_affine"])
        h, sd, ad = (int(v) for v in z["dims"])
        return GuidePair(nets["r"], nets["c"], mean, scale, h, sd, ad,
                         str(z["env_spec_hash"]))
