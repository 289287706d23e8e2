"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Array shape does not match what the operation requires."""


class TrainingDivergenceError(RuntimeError):
    """Loss or gradients went non-finite during optimisation."""


class GuidanceError(RuntimeError):
    """Guidance produced a non-finite gradient or sample."""


class InfeasibleBudgetError(ValueError):
    """No trajectory in the support satisfies the cost budget."""


class UndefinedBoundError(ValueError):
    """A bound evaluation hit a state-action pair with zero visit count."""


class EmptyWindowError(ValueError):
    """No window of the requested horizon fits in any episode."""


class EpisodeDoneError(RuntimeError):
    """step() was called on an episode that already ended."""


class CheckpointError(ValueError):
    """Checkpoint is malformed or belongs to a different environment."""


class ConfigError(ValueError):
    """Invalid experiment configuration or CLI usage."""
