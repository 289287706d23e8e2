"""Denoising diffusion over flattened, normalized trajectory windows.

Steps are 1-based: i = N is pure noise, i = 1 is the final reverse step (its
posterior variance is zero, so the last draw is deterministic). Guidance
enters the reverse step as a mean shift scaled by the step's variance.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .errors import CheckpointError, GuidanceError, ShapeError
from .trajectory import Normalizer

DEFAULT_STEPS = 64
EMB_DIM = 16


@dataclass
class NoiseSchedule:
    """Cosine-style beta schedule with cached cumulative products."""

    betas: np.ndarray        # (N,), betas[k] is beta_{k+1}
    alpha_bars: np.ndarray   # (N+1,), alpha_bars[i] = prod_{j<=i} alpha_j, entry 0 = 1

    @classmethod
    def cosine(cls, n_steps: int = DEFAULT_STEPS, offset: float = 0.008) -> "NoiseSchedule":
        i = np.arange(n_steps + 1)
        f = np.cos(((i / n_steps) + offset) / (1 + offset) * np.pi / 2.0) ** 2
        bars = f / f[0]
        betas = np.clip(1.0 - bars[1:] / bars[:-1], 1e-8, 0.999)
        alpha_bars = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
        return cls(betas, alpha_bars)

    @property
    def n_steps(self) -> int:
        return len(self.betas)

    def signal_coef(self, i) -> np.ndarray:
        return np.sqrt(self.alpha_bars[i])

    def noise_coef(self, i) -> np.ndarray:
        return np.sqrt(1.0 - self.alpha_bars[i])

    def posterior_var(self, i) -> np.ndarray:
        """Variance of the fixed reverse kernel at step i; zero at i = 1."""
        i = np.asarray(i)
        return self.betas[i - 1] * (1.0 - self.alpha_bars[i - 1]) / (1.0 - self.alpha_bars[i])


def step_embedding(i, dim: int = EMB_DIM) -> np.ndarray:
    """Sinusoidal embedding of the (possibly batched) step index."""
    i = np.asarray(i, dtype=np.float64)
    half = dim // 2
    freqs = np.power(10000.0, -np.arange(half) / half)
    ang = i[..., None] * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


def add_noise(schedule: NoiseSchedule, x0: np.ndarray, i, rng: np.random.Generator):
    """Forward corruption x_i = sqrt(abar_i) x0 + sqrt(1-abar_i) eps."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = rng.standard_normal(x0.shape)
    sig = schedule.signal_coef(i)
    noi = schedule.noise_coef(i)
    if np.ndim(sig) > 0 and x0.ndim > 1:
        sig = sig[:, None]
        noi = noi[:, None]
    return sig * x0 + noi * eps, eps


@dataclass
class DiffusionModel:
    """Denoiser plus everything needed to map env data in and out."""

    schedule: NoiseSchedule
    denoiser: nn.Mlp
    normalizer: Normalizer
    horizon: int
    state_dim: int
    action_dim: int
    env_spec_hash: str

    @property
    def flat_dim(self) -> int:
        return self.horizon * (self.state_dim + self.action_dim)

    @classmethod
    def create(cls, horizon: int, state_dim: int, action_dim: int,
               normalizer: Normalizer, rng: np.random.Generator,
               hidden=(256, 256), n_steps: int = DEFAULT_STEPS,
               env_spec_hash: str = "") -> "DiffusionModel":
        d = horizon * (state_dim + action_dim)
        net = nn.Mlp.init((d + EMB_DIM, *hidden, d), rng)
        return cls(NoiseSchedule.cosine(n_steps), net, normalizer,
                   horizon, state_dim, action_dim, env_spec_hash)

    def predict_noise(self, x: np.ndarray, i) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        emb = step_embedding(i)
        if emb.ndim == 1:
            emb = np.broadcast_to(emb, (x.shape[0], EMB_DIM))
        return self.denoiser.forward(np.concatenate([x, emb], axis=1))

    def normalize_state(self, s: np.ndarray) -> np.ndarray:
        sd = self.state_dim
        nz = self.normalizer.half_range[:sd] > 0
        out = np.zeros(sd)
        out[nz] = ((np.asarray(s, dtype=np.float64)[nz]
                    - self.normalizer.offset[:sd][nz])
                   / self.normalizer.half_range[:sd][nz] - 1.0)
        return out


def condition_first_state(x: np.ndarray, s_norm: np.ndarray, state_dim: int) -> np.ndarray:
    """Overwrite the first state block (in place) with a normalized state."""
    x = np.atleast_2d(x)
    if x.shape[1] < state_dim:
        raise ShapeError("trajectory narrower than one state block")
    x[:, :state_dim] = s_norm
    return x


def train(model: DiffusionModel, x0_flat: np.ndarray, steps: int,
          rng: np.random.Generator, batch_size: int = 64, lr: float = 1e-3,
          log_every: int = 200, conditioned_fraction: float = 0.5) -> np.ndarray:
    """Standard noise-prediction regression; returns the logged loss curve.

    A random share of every batch has its first-state block held at the clean
    values, which is exactly what the denoiser sees at plan time after each
    conditioning overwrite; the loss skips those held entries. The rest of
    the batch stays fully noised so unconditional sampling keeps working.
    """
    X0 = np.asarray(x0_flat, dtype=np.float64)
    if X0.ndim != 2 or X0.shape[1] != model.flat_dim:
        raise ShapeError(f"window array {X0.shape} vs flat dim {model.flat_dim}")
    opt = nn.AdamState.for_net(model.denoiser, lr=lr)
    losses = []
    n = X0.shape[0]
    sd = model.state_dim
    for k in range(steps):
        idx = rng.integers(0, n, size=batch_size)
        i = rng.integers(1, model.schedule.n_steps + 1, size=batch_size)
        xi, eps = add_noise(model.schedule, X0[idx], i, rng)
        w = np.ones_like(eps)
        if conditioned_fraction > 0.0:
            held = rng.random(batch_size) < conditioned_fraction
            xi[held, :sd] = X0[idx][held, :sd]
            w[held, :sd] = 0.0
        inp = np.concatenate([xi, step_embedding(i)], axis=1)
        raw, cache, _ = model.denoiser.forward_cached(inp)
        resid = (raw - eps) * w
        loss = float(np.sum(resid ** 2) / np.sum(w))
        if not np.isfinite(loss):
            raise nn.TrainingDivergenceError("diffusion loss went non-finite")
        dWs, dbs, _ = model.denoiser.backprop(cache, (2.0 / np.sum(w)) * resid)
        nn.adam_step(model.denoiser, opt, dWs, dbs)
        if k % log_every == 0 or k == steps - 1:
            losses.append(loss)
    return np.asarray(losses)


def evaluate_loss(model: DiffusionModel, x0_flat: np.ndarray, n_samples: int,
                  rng: np.random.Generator) -> float:
    """Mean noise-prediction MSE without updating parameters."""
    X0 = np.asarray(x0_flat, dtype=np.float64)
    idx = rng.integers(0, X0.shape[0], size=n_samples)
    i = rng.integers(1, model.schedule.n_steps + 1, size=n_samples)
    xi, eps = add_noise(model.schedule, X0[idx], i, rng)
    pred = model.predict_noise(xi, i)
    return float(np.mean((pred - eps) ** 2))


def reverse_step(model: DiffusionModel, x: np.ndarray, i: int,
                 rng: np.random.Generator, guidance: np.ndarray | None = None) -> np.ndarray:
    """One guided reverse draw at step i.

    The mean is the standard noise-prediction posterior mean (with the
    implied clean trajectory clamped to the normalized data box, which keeps
    the late high-noise steps from amplifying estimator error), shifted by
    posterior_var * guidance; the final step (i = 1) adds no fresh noise.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    sch = model.schedule
    beta = sch.betas[i - 1]
    alpha = 1.0 - beta
    bar_i, bar_prev = sch.alpha_bars[i], sch.alpha_bars[i - 1]
    eps_hat = model.predict_noise(x, i)
    x0_hat = np.clip((x - sch.noise_coef(i) * eps_hat) / sch.signal_coef(i), -1.0, 1.0)
    mu = (np.sqrt(bar_prev) * beta * x0_hat
          + np.sqrt(alpha) * (1.0 - bar_prev) * x) / (1.0 - bar_i)
    var = float(sch.posterior_var(i))
    if guidance is not None:
        g = np.asarray(guidance, dtype=np.float64)
        if not np.all(np.isfinite(g)):
            raise GuidanceError("non-finite guidance gradient")
        mu = mu + var * g
    if i > 1:
        mu = mu + np.sqrt(var) * rng.standard_normal(x.shape)
    return mu


def sample(model: DiffusionModel, n: int, rng: np.random.Generator,
           guidance_fn=None, first_state: np.ndarray | None = None) -> np.ndarray:
    """Full reverse chain for n trajectories (normalized coordinates).

    guidance_fn(x, i) -> gradient array, evaluated on the current noised
    batch. When first_state is given, the first state block is re-imposed
    after every draw.
    """
    x = rng.standard_normal((n, model.flat_dim))
    s_norm = None
    if first_state is not None:
        s_norm = model.normalize_state(first_state)
        condition_first_state(x, s_norm, model.state_dim)
    for i in range(model.schedule.n_steps, 0, -1):
        g = guidance_fn(x, i) if guidance_fn is not None else None
        x = reverse_step(model, x, i, rng, g)
        if s_norm is not None:
            condition_first_state(x, s_norm, model.state_dim)
    if not np.all(np.isfinite(x)):
        raise GuidanceError("sampling produced non-finite trajectories")
    return x


def save_model(model: DiffusionModel, path) -> None:
    arrays = {f"W{k}": W for k, W in enumerate(model.denoiser.weights)}
    arrays.update({f"b{k}": b for k, b in enumerate(model.denoiser.biases)})
    np.savez(path,
             format_version=np.int64(nn.FORMAT_VERSION),
             betas=model.schedule.betas,
             layer_sizes=np.asarray(model.denoiser.layer_sizes, dtype=np.int64),
             activation=np.array(model.denoiser.activation),
             norm_offset=model.normalizer.offset,
             norm_half_range=model.normalizer.half_range,
             dims=np.asarray([model.horizon, model.state_dim, model.action_dim],
                             dtype=np.int64),
             env_spec_hash=np.array(model.env_spec_hash),
             **arrays)


def load_model(path) -> DiffusionModel:
    with np.load(path, allow_pickle=False) as z:
        if int(z["format_version"]) != nn.FORMAT_VERSION:
            raise CheckpointError("unsupported model checkpoint version")
        betas = z["betas"]
        schedule = NoiseSchedule(
            betas, np.concatenate([[1.0], np.cumprod(1.0 - betas)]))
        sizes = tuple(int(s) for s in z["layer_sizes"])
        net = nn.Mlp(sizes,
                     [z[f"W{k}"] for k in range(len(sizes) - 1)],
                     [z[f"b{k}"] for k in range(len(sizes) - 1)],
                     str(z["activation"]))
        normalizer = Normalizer(z["norm_offset"], z["norm_half_range"])
        h, sd, ad = (int(v) for v in z["dims"])
        return DiffusionModel(schedule, net, normalizer, h, sd, ad,
                              str(z["env_spec_hash"]))
