"""Receding-horizon planning with a per-step scaled remaining budget.

Each decision step draws a batch of guided candidate trajectories from the
current state, keeps the best estimated return among those whose estimated
cost fits the remaining budget (falling back to the cheapest candidate when
none fits), executes the next action, and rescales the budget by the cost
actually paid: z <- (z - c) / gamma.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diffusion import DiffusionModel, sample
from .errors import ConfigError, GuidanceError
from .guide import GuidanceConfig, GuidePair, guidance_gradient
from .trajectory import Trajectory, from_step_offsets, vec_to_action

KINDS = ("budget", "unconstrained", "behavior")


@dataclass
class BudgetTracker:
    """Tracks z_t with z_{t+1} = (z_t - c_t) / gamma.

    The invariant gamma^t * z_t = b - sum_{k<t} gamma^k c_k holds at every
    step; z may go negative, which simply means every continuation violates
    the original budget.
    """

    gamma: float
    budget: float
    t: int = 0

    def update(self, cost: float) -> None:
        self.budget = (self.budget - cost) / self.gamma
        self.t += 1


@dataclass
class PlannerConfig:
    candidates: int = 16
    replan_interval: int = 1
    alpha: float = 0.1
    penalty: float = 100.0
    kind: str = "budget"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"planner kind {self.kind!r} not one of {KINDS}")
        if self.candidates < 1 or self.replan_interval < 1:
            raise ConfigError("candidates and replan_interval must be >= 1")


@dataclass
class PlanInfo:
    est_reward: float
    est_cost: float
    fallback: bool
    chosen: int


@dataclass
class StepLog:
    t: int
    remaining_budget: float
    est_reward: float
    est_cost: float
    fallback: bool
    reward: float
    cost: float


@dataclass
class EpisodeResult:
    env: str
    kind: str
    budget: float
    ep_return: float
    ep_cost: float
    violation: bool
    fallback_steps: int
    steps: list[StepLog] = field(default_factory=list)


def plan(model: DiffusionModel, guides: GuidePair, state, remaining_budget: float,
         cfg: PlannerConfig, rng: np.random.Generator):
    """One planning call: K guided candidates from `state`, pick, decode.

    Returns (Trajectory in env coordinates, PlanInfo). An unconstrained
    planner is the same code path with an infinite remaining budget.
    """
    z = np.inf if cfg.kind == "unconstrained" else remaining_budget
    gcfg = GuidanceConfig(alpha=cfg.alpha, penalty=cfg.penalty)
    guidance_fn = None
    if cfg.kind != "behavior":
        def guidance_fn(x, i):
            return guidance_gradient(guides, gcfg, x, i, z)

    X = None
    for attempt in range(2):
        try:
            X = sample(model, cfg.candidates, rng, guidance_fn, first_state=state)
            break
        except GuidanceError:
            if attempt == 1:
                raise
    if cfg.kind == "behavior":
        k = int(rng.integers(cfg.candidates))
        info = PlanInfo(float("nan"), float("nan"), False, k)
    else:
        est_r = guides.reward_value(X, 0)
        est_c = guides.cost_value(X, 0)
        safe = est_c <= z
        if safe.any():
            k = int(np.flatnonzero(safe)[np.argmax(est_r[safe])])
            info = PlanInfo(float(est_r[k]), float(est_c[k]), False, k)
        else:
            k = int(np.argmin(est_c))
            info = PlanInfo(float(est_r[k]), float(est_c[k]), True, k)
    rows = model.normalizer.denormalize(X[k]).reshape(
        model.horizon, model.state_dim + model.action_dim)
    rows = from_step_offsets(rows, model.state_dim)
    traj = Trajectory(rows[:, :model.state_dim].copy(),
                      rows[:, model.state_dim:].copy())
    return traj, info


def run_episode(env, model: DiffusionModel, guides: GuidePair | None, budget: float,
                cfg: PlannerConfig, rng: np.random.Generator,
                keep_steps: bool = True) -> EpisodeResult:
    """Roll one episode, replanning every cfg.replan_interval steps."""
    spec = env.spec
    tracker = BudgetTracker(spec.gamma, budget)
    s = env.reset(rng)
    traj, info = None, None
    plan_t = 0
    result = EpisodeResult(spec.name, cfg.kind, budget, 0.0, 0.0, False, 0)
    while not env.done:
        t = env.t
        offset = t - plan_t
        if traj is None or offset % cfg.replan_interval == 0 or offset >= traj.horizon:
            traj, info = plan(model, guides, s, tracker.budget, cfg, rng)
            plan_t = t
            offset = 0
            if info.fallback:
                result.fallback_steps += 1
        tr = env.step(vec_to_action(spec, traj.actions[offset]), rng)
        if keep_steps:
            result.steps.append(StepLog(t, tracker.budget, info.est_reward,
                                        info.est_cost, info.fallback,
                                        tr.reward, tr.cost))
        result.ep_return += (spec.gamma ** t) * tr.reward
        result.ep_cost += (spec.gamma ** t) * tr.cost
        tracker.update(tr.cost)
        s = tr.next_state
    result.violation = bool(result.ep_cost > budget)
    return result
