"""Replay storage, training objectives, and algorithm compositions."""

from .buffer import ReplayBuffer, TransitionBatch, DEFAULT_CAPACITY, DEFAULT_MIN_FILL
from .losses import (
    loss_td,
    loss_qmax,
    loss_hyper,
    loss_bce,
    loss_pg_advantage,
    loss_ra_align,
    td_target,
)
from .algorithms import (
    ALGORITHMS,
    AgentBase,
    A2CAgent,
    DdpgFamilyAgent,
    SupervisedAgent,
    TrainConfig,
    Trainer,
    build_agent,
    train_step,
)

__all__ = [
    "ReplayBuffer", "TransitionBatch", "DEFAULT_CAPACITY", "DEFAULT_MIN_FILL",
    "loss_td", "loss_qmax", "loss_hyper", "loss_bce", "loss_pg_advantage",
    "loss_ra_align", "td_target",
    "ALGORITHMS", "AgentBase", "A2CAgent", "DdpgFamilyAgent", "SupervisedAgent",
    "TrainConfig", "Trainer", "build_agent", "train_step",
]
