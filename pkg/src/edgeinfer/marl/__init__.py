from .gae import gae, gae_bruteforce, normalize_advantages
from .lagrange import LagrangeState, lagrangian_dual_update
from .policies import AllocPolicy, DeployPolicy, UserPolicy, ValueNet, macro_value
from .ppo import ppo_clip_objective
from .trainer import (
    TrainConfig,
    Trainer,
    TrajectoryBatch,
    desk_train_config,
    trainer_from_checkpoint,
)

__all__ = [
    "AllocPolicy",
    "DeployPolicy",
    "LagrangeState",
    "TrainConfig",
    "Trainer",
    "TrajectoryBatch",
    "UserPolicy",
    "ValueNet",
    "desk_train_config",
    "gae",
    "gae_bruteforce",
    "lagrangian_dual_update",
    "macro_value",
    "normalize_advantages",
    "ppo_clip_objective",
    "trainer_from_checkpoint",
]
