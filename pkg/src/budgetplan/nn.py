"""Dense feed-forward networks with hand-rolled reverse-mode gradients.

Everything is float64. Gradients flow to parameters (for training) and to
inputs (for guidance), with a caller-supplied output cotangent in both cases.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import CheckpointError, ShapeError, TrainingDivergenceError

FORMAT_VERSION = 1

# hidden activations; output layer is always linear
_ACT = {
    "tanh": np.tanh,
    "identity": lambda z: z,
}


def _act_deriv(name: str, h: np.ndarray) -> np.ndarray:
    # derivative expressed through the post-activation value
    if name == "tanh":
        return 1.0 - h * h
    return np.ones_like(h)


@dataclass
class Mlp:
    """Fully connected net: linear layers with a smooth hidden activation."""

    layer_sizes: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "tanh"

    @classmethod
    def init(cls, layer_sizes, rng: np.random.Generator, activation: str = "tanh",
             out_scale: float = 0.1) -> "Mlp":
        """Xavier-style init; the output layer is shrunk by out_scale so an
        untrained net predicts near zero."""
        if activation not in _ACT:
            raise ValueError(f"unknown activation {activation!r}")
        sizes = tuple(int(s) for s in layer_sizes)
        if len(sizes) < 2 or any(s <= 0 for s in sizes):
            raise ShapeError(f"bad layer sizes {sizes}")
        ws, bs = [], []
        for k, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            scale = np.sqrt(2.0 / (n_in + n_out))
            if k == len(sizes) - 2:
                scale *= out_scale
            ws.append(rng.normal(0.0, scale, size=(n_in, n_out)))
            bs.append(np.zeros(n_out))
        return cls(sizes, ws, bs, activation)

    @property
    def in_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def out_dim(self) -> int:
        return self.layer_sizes[-1]

    def _check_input(self, x: np.ndarray) -> tuple[np.ndarray, bool]:
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeError(
                f"input shape {np.asarray(x).shape} incompatible with in_dim {self.in_dim}")
        return x, squeeze

    def forward_cached(self, x: np.ndarray):
        """Forward pass keeping per-layer post-activations for backprop."""
        X, squeeze = self._check_input(x)
        act = _ACT[self.activation]
        hs = [X]
        h = X
        last = len(self.weights) - 1
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ W + b
            h = z if k == last else act(z)
            hs.append(h)
        return (h[0] if squeeze else h), hs, squeeze

    def forward(self, x: np.ndarray) -> np.ndarray:
        out, _, _ = self.forward_cached(x)
        return out

    def backprop(self, cache: list[np.ndarray], delta: np.ndarray):
        """Reverse pass.

        Args:
            cache: post-activation list from forward_cached (entry 0 is the input).
            delta: cotangent at the output, shape (B, out_dim).
        Returns:
            (weight grads, bias grads, input grad), summed over the batch for
            parameters, per-row for the input.
        """
        delta = np.asarray(delta, dtype=np.float64)
        if delta.ndim == 1:
            delta = delta[None, :]
        if delta.shape != cache[-1].shape:
            raise ShapeError(
                f"cotangent shape {delta.shape} vs output {cache[-1].shape}")
        dWs = [None] * len(self.weights)
        dbs = [None] * len(self.biases)
        d = delta
        for k in range(len(self.weights) - 1, -1, -1):
            h_in = cache[k]
            dWs[k] = h_in.T @ d
            dbs[k] = d.sum(axis=0)
            d = d @ self.weights[k].T
            if k > 0:
                d = d * _act_deriv(self.activation, cache[k])
        return dWs, dbs, d

    def value_and_grad_input(self, x: np.ndarray, cotangent: np.ndarray):
        """Output and d(cotangent . output)/dx in one forward/backward pass."""
        out, cache, squeeze = self.forward_cached(x)
        cot = np.asarray(cotangent, dtype=np.float64)
        if cot.ndim == 1 and not squeeze:
            cot = np.broadcast_to(cot, (x.shape[0], self.out_dim))
        _, _, dx = self.backprop(cache, cot if cot.ndim == 2 else cot[None, :])
        return out, (dx[0] if squeeze else dx)

    def grad_input(self, x: np.ndarray, cotangent: np.ndarray) -> np.ndarray:
        _, dx = self.value_and_grad_input(x, cotangent)
        return dx

    def params_flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.weights + self.biases])


@dataclass
class AdamState:
    """Adaptive-moment optimiser state for one Mlp."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m_w: list = field(default_factory=list)
    v_w: list = field(default_factory=list)
    m_b: list = field(default_factory=list)
    v_b: list = field(default_factory=list)

    @classmethod
    def for_net(cls, net: Mlp, lr: float = 1e-3, **kw) -> "AdamState":
        st = cls(lr=lr, **kw)
        st.m_w = [np.zeros_like(W) for W in net.weights]
        st.v_w = [np.zeros_like(W) for W in net.weights]
        st.m_b = [np.zeros_like(b) for b in net.biases]
        st.v_b = [np.zeros_like(b) for b in net.biases]
        return st


def adam_step(net: Mlp, opt: AdamState, dWs, dbs) -> None:
    """One in-place Adam update from precomputed parameter gradients."""
    opt.step += 1
    t = opt.step
    c1 = 1.0 - opt.beta1 ** t
    c2 = 1.0 - opt.beta2 ** t
    for params, grads, ms, vs in ((net.weights, dWs, opt.m_w, opt.v_w),
                                  (net.biases, dbs, opt.m_b, opt.v_b)):
        for p, g, m, v in zip(params, grads, ms, vs):
            m *= opt.beta1
            m += (1.0 - opt.beta1) * g
            v *= opt.beta2
            v += (1.0 - opt.beta2) * (g * g)
            p -= opt.lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)


def train_step(net: Mlp, opt: AdamState, inputs: np.ndarray, targets: np.ndarray) -> float:
    """One squared-error step; returns the pre-update mean loss."""
    X, _ = net._check_input(inputs)
    Y = np.asarray(targets, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[None, :] if X.shape[0] == 1 else Y[:, None]
    if Y.shape != (X.shape[0], net.out_dim):
        raise ShapeError(f"target shape {Y.shape} vs expected {(X.shape[0], net.out_dim)}")
    pred, cache, _ = net.forward_cached(X)
    resid = pred - Y
    loss = float(np.mean(resid * resid))
    if not np.isfinite(loss):
        raise TrainingDivergenceError(f"non-finite loss {loss}")
    delta = (2.0 / resid.size) * resid
    dWs, dbs, _ = net.backprop(cache, delta)
    adam_step(net, opt, dWs, dbs)
    return loss


def save_checkpoint(net: Mlp, path) -> None:
    arrays = {f"W{k}": W for k, W in enumerate(net.weights)}
    arrays.update({f"b{k}": b for k, b in enumerate(net.biases)})
    np.savez(path,
             format_version=np.int64(FORMAT_VERSION),
             layer_sizes=np.asarray(net.layer_sizes, dtype=np.int64),
             activation=np.array(net.activation),
             **arrays)


def load_checkpoint(path) -> Mlp:
    with np.load(path, allow_pickle=False) as z:
        if int(z["format_version"]) != FORMAT_VERSION:
            raise CheckpointError(f"unsupported format version {int(z['format_version'])}")
        sizes = tuple(int(s) for s in z["layer_sizes"])
        act = str(z["activation"])
        ws = [z[f"W{k}"] for k in range(len(sizes) - 1)]
        bs = [z[f"b{k}"] for k in range(len(sizes) - 1)]
    return Mlp(sizes, ws, bs, act)
