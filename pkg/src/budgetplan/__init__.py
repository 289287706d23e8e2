"""Budget-constrained trajectory planning with diffusion models.

Offline data from a constrained MDP trains a trajectory diffusion model plus
reward/cost guide heads; a receding-horizon planner samples guided candidate
plans under a per-step scaled remaining budget. Exact enumeration oracles
verify the closed-form reweighting, its smoothed relaxation, and the
finite-sample error bounds on small discrete instances.
"""

from . import diffusion, envs, guide, harness, nn, oracle, planner, trajectory
from .errors import (
    CheckpointError,
    ConfigError,
    EmptyWindowError,
    EpisodeDoneError,
    GuidanceError,
    InfeasibleBudgetError,
    ShapeError,
    TrainingDivergenceError,
    UndefinedBoundError,
)

__version__ = "0.1.0"
