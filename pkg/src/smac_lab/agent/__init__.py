"""Safety-modulated actor-critic agent and its training loop."""

from .buffer import Batch, ReplayBuffer
from .smac import (
    ROLES,
    InvariantViolation,
    LagrangeState,
    Optimizers,
    SmacNetworks,
    Targets,
    cost_critic_loss,
    cost_critic_update,
    critic_loss,
    critic_update,
    distance,
    distributional_targets,
    kl_gaussian,
    lagrange_update,
    modulate,
    modulator_objective,
    modulator_update,
    risky_objective,
    risky_policy_update,
    soft_update_all,
)
from .trainer import (
    METRIC_COLUMNS,
    DivergenceError,
    Trainer,
    TrainResult,
    load_checkpoint,
    read_metrics,
    save_checkpoint,
    train,
    write_metrics,
)
