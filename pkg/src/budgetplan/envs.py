"""Finite-horizon constrained MDPs and offline dataset collection.

Two built-in families: a 3x3 grid with a hazard cell (discrete, enumerable,
optional action slip) and a 2-D point-mass reach/avoid task (continuous,
deterministic). Both expose exact reward/cost functions so oracles and
planners account against ground truth.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, asdict, field

import numpy as np

from .errors import ConfigError, EpisodeDoneError, ShapeError
from .trajectory import discounted_sum

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class CmdpSpec:
    """Static description of a constrained MDP instance."""

    name: str
    discrete: bool
    state_dim: int        # one-hot width for discrete envs
    action_dim: int
    gamma: float
    max_len: int          # decision steps per episode
    reward_bound: float   # |r(s,a)| <= reward_bound
    cost_bound: float     # 0 <= c(s,a) <= cost_bound
    budget_max: float     # nominal budget scale; harness may recalibrate
    stochastic: bool

    def spec_hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class Transition:
    state: np.ndarray | int
    action: np.ndarray | int
    next_state: np.ndarray | int
    reward: float
    cost: float
    done: bool


class GridBudget:
    """3x3 grid, four moves, reward for being at the goal, unit cost on the
    hazard cell. With slip > 0 the executed move is randomly one of the other
    three directions with probability slip."""

    # grid layout: index = row * 3 + col
    GOAL = 5      # (1, 2)
    HAZARD = 4    # (1, 1)
    STARTS = (0, 3)   # (0, 0) and (1, 0), uniform
    MOVES = ((-1, 0), (1, 0), (0, -1), (0, 1))  # up, down, left, right

    def __init__(self, slip: float = 0.0, gamma: float = 1.0, max_len: int = 4):
        if not 0.0 <= slip < 1.0:
            raise ConfigError(f"slip must be in [0, 1), got {slip}")
        self.slip = float(slip)
        self.n_states = 9
        self.n_actions = 4
        self.spec = CmdpSpec(
            name="gridbudget-slip" if slip > 0 else "gridbudget",
            discrete=True,
            state_dim=self.n_states,
            action_dim=self.n_actions,
            gamma=float(gamma),
            max_len=int(max_len),
            reward_bound=1.0,
            cost_bound=1.0,
            budget_max=2.0,
            stochastic=slip > 0,
        )
        self._state: int | None = None
        self._t = 0
        self._done = True
        # precompute exact transition kernels per (s, a)
        self._kernel = np.zeros((9, 4, 9))
        for s in range(9):
            for a in range(4):
                self._kernel[s, a, self._move(s, a)] += 1.0 - self.slip
                others = [b for b in range(4) if b != a]
                for b in others:
                    self._kernel[s, a, self._move(s, b)] += self.slip / 3.0

    def _move(self, s: int, a: int) -> int:
        r, c = divmod(s, 3)
        dr, dc = self.MOVES[a]
        nr, nc = r + dr, c + dc
        if 0 <= nr < 3 and 0 <= nc < 3:
            return nr * 3 + nc
        return s  # off-grid moves stay put

    def reward(self, s: int, a: int) -> float:
        return 1.0 if s == self.GOAL else 0.0

    def cost(self, s: int, a: int) -> float:
        return 1.0 if s == self.HAZARD else 0.0

    def transition_probs(self, s: int, a: int) -> np.ndarray:
        return self._kernel[s, a]

    def start_probs(self) -> np.ndarray:
        p = np.zeros(9)
        p[list(self.STARTS)] = 1.0 / len(self.STARTS)
        return p

    @property
    def state(self):
        return self._state

    @property
    def t(self) -> int:
        return self._t

    @property
    def done(self) -> bool:
        return self._done

    def reset(self, rng: np.random.Generator) -> int:
        self._state = int(rng.choice(self.STARTS))
        self._t = 0
        self._done = False
        return self._state

    def step(self, action: int, rng: np.random.Generator) -> Transition:
        if self._done:
            raise EpisodeDoneError("episode already finished; call reset()")
        a = int(action)
        if not 0 <= a < 4:
            raise ShapeError(f"action {action} outside 0..3")
        s = self._state
        s2 = int(rng.choice(9, p=self._kernel[s, a])) if self.slip > 0 else self._move(s, a)
        r = self.reward(s, a)
        c = self.cost(s, a)
        self._t += 1
        self._done = self._t >= self.spec.max_len
        self._state = s2
        return Transition(s, a, s2, r, c, self._done)


class ReachAvoid:
    """Point mass on [-1,1]^2 heading for a goal corner past a circular soft
    hazard at the origin. Reward is negative distance to goal; cost is a
    smooth bump supported inside the hazard radius. Deterministic dynamics."""

    START = np.array([-0.85, -0.85])
    GOAL = np.array([0.85, 0.85])
    HAZARD_CENTER = np.array([0.0, 0.0])
    HAZARD_RADIUS = 0.45
    ACTION_MAX = 0.15

    def __init__(self, gamma: float = 1.0, max_len: int = 32):
        self.spec = CmdpSpec(
            name="reachavoid",
            discrete=False,
            state_dim=2,
            action_dim=2,
            gamma=float(gamma),
            max_len=int(max_len),
            reward_bound=2.7,
            cost_bound=1.0,
            budget_max=3.0,
            stochastic=False,
        )
        self._state: np.ndarray | None = None
        self._t = 0
        self._done = True

    def reward(self, s: np.ndarray, a: np.ndarray) -> float:
        return -float(np.linalg.norm(s - self.GOAL))

    def cost(self, s: np.ndarray, a: np.ndarray) -> float:
        d2 = float(np.sum((s - self.HAZARD_CENTER) ** 2))
        u = d2 / (self.HAZARD_RADIUS ** 2)
        return float((1.0 - u) ** 2) if u < 1.0 else 0.0

    @property
    def state(self):
        return self._state

    @property
    def t(self) -> int:
        return self._t

    @property
    def done(self) -> bool:
        return self._done

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        # point initial distribution: every episode starts at the same state
        self._state = self.START.copy()
        self._t = 0
        self._done = False
        return self._state.copy()

    def step(self, action: np.ndarray, rng: np.random.Generator) -> Transition:
        if self._done:
            raise EpisodeDoneError("episode already finished; call reset()")
        a = np.asarray(action, dtype=np.float64)
        if a.shape != (2,):
            raise ShapeError(f"action shape {a.shape}, expected (2,)")
        a = np.clip(a, -self.ACTION_MAX, self.ACTION_MAX)
        s = self._state.copy()
        s2 = np.clip(s + a, -1.0, 1.0)
        r = self.reward(s, a)
        c = self.cost(s, a)
        self._t += 1
        self._done = self._t >= self.spec.max_len
        self._state = s2
        return Transition(s, a, s2.copy(), r, c, self._done)


def make_env(env_id: str, **overrides):
    """Environment registry. Overrides feed the constructor (and therefore
    the spec hash), so e.g. a gamma<1 ReachAvoid variant is a distinct spec."""
    if env_id == "gridbudget":
        return GridBudget(slip=0.0, **overrides)
    if env_id == "gridbudget-slip":
        overrides.setdefault("slip", 0.1)
        return GridBudget(**overrides)
    if env_id == "reachavoid":
        return ReachAvoid(**overrides)
    raise ConfigError(f"unknown env id {env_id!r}")


# ---------------------------------------------------------------------------
# behavior policies


def _grid_greedy_actions(env: GridBudget, s: int) -> list[int]:
    gr, gc = divmod(env.GOAL, 3)
    r, c = divmod(s, 3)
    d0 = abs(gr - r) + abs(gc - c)
    best = []
    for a in range(4):
        nr, nc = divmod(env._move(s, a), 3)
        if abs(gr - nr) + abs(gc - nc) < d0:
            best.append(a)
    return best or list(range(4))


def make_behavior(env, name: str, **kw):
    """Return policy(state, t, rng) -> action for a named behavior."""
    if isinstance(env, GridBudget) and name == "epsilon-greedy":
        eps = kw.get("epsilon", 0.3)

        def policy(s, t, rng):
            if rng.random() < eps:
                return int(rng.integers(4))
            return int(rng.choice(_grid_greedy_actions(env, s)))

        return policy
    if isinstance(env, ReachAvoid) and name == "waypoint":
        # per-episode latent: 45% straight to goal, else via a random waypoint;
        # closures keyed by t==0 so collect() can reuse one policy object
        noise = kw.get("noise", 0.03)
        state = {"wp": None}

        def policy(s, t, rng):
            if t == 0:
                state["wp"] = None if rng.random() < 0.45 else rng.uniform(-1.0, 1.0, 2)
            target = env.GOAL
            if state["wp"] is not None:
                if np.linalg.norm(s - state["wp"]) > 0.2:
                    target = state["wp"]
                else:
                    state["wp"] = None
            a = target - s + rng.normal(0.0, noise, 2)
            return np.clip(a, -env.ACTION_MAX, env.ACTION_MAX)

        return policy
    raise ConfigError(f"no behavior {name!r} for env {env.spec.name!r}")


# ---------------------------------------------------------------------------
# datasets


@dataclass
class EpisodeRecord:
    states: np.ndarray       # (T, ...) visited states, excluding the final one
    actions: np.ndarray      # (T, ...)
    next_states: np.ndarray  # (T, ...)
    rewards: np.ndarray      # (T,)
    costs: np.ndarray        # (T,)


@dataclass
class Dataset:
    """Episode-segmented offline data plus provenance header."""

    episodes: list[EpisodeRecord]
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.episodes)

    def episodic_return(self, gamma: float) -> np.ndarray:
        return np.array([discounted_sum(ep.rewards, gamma) for ep in self.episodes])

    def episodic_cost(self, gamma: float) -> np.ndarray:
        return np.array([discounted_sum(ep.costs, gamma) for ep in self.episodes])


def collect(env, policy, n_episodes: int, rng: np.random.Generator,
            behavior: str = "custom") -> Dataset:
    """Roll out `policy` for n_episodes full episodes."""
    episodes = []
    for _ in range(n_episodes):
        s = env.reset(rng)
        ss, aa, ns, rr, cc = [], [], [], [], []
        while not env.done:
            a = policy(s, env.t, rng)
            tr = env.step(a, rng)
            ss.append(tr.state)
            aa.append(tr.action)
            ns.append(tr.next_state)
            rr.append(tr.reward)
            cc.append(tr.cost)
            s = tr.next_state
        episodes.append(EpisodeRecord(
            np.asarray(ss), np.asarray(aa), np.asarray(ns),
            np.asarray(rr, dtype=np.float64), np.asarray(cc, dtype=np.float64)))
    meta = {
        "schema_version": SCHEMA_VERSION,
        "env_spec_hash": env.spec.spec_hash(),
        "env_name": env.spec.name,
        "behavior": behavior,
        "episodes": n_episodes,
    }
    return Dataset(episodes, meta)


def save_dataset(ds: Dataset, path) -> None:
    """npz layout: ragged episodes stored concatenated with per-episode lengths."""
    lengths = np.array([len(ep.rewards) for ep in ds.episodes], dtype=np.int64)
    np.savez(
        path,
        header=np.array(json.dumps(ds.meta, sort_keys=True)),
        lengths=lengths,
        states=np.concatenate([ep.states for ep in ds.episodes]),
        actions=np.concatenate([ep.actions for ep in ds.episodes]),
        next_states=np.concatenate([ep.next_states for ep in ds.episodes]),
        rewards=np.concatenate([ep.rewards for ep in ds.episodes]),
        costs=np.concatenate([ep.costs for ep in ds.episodes]),
    )


def load_dataset(path) -> Dataset:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["header"]))
        lengths = z["lengths"]
        offsets = np.concatenate([[0], np.cumsum(lengths)])
        episodes = []
        for i in range(len(lengths)):
            lo, hi = offsets[i], offsets[i + 1]
            episodes.append(EpisodeRecord(
                z["states"][lo:hi], z["actions"][lo:hi], z["next_states"][lo:hi],
                z["rewards"][lo:hi], z["costs"][lo:hi]))
    return Dataset(episodes, meta)
