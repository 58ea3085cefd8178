"""Time-adaptive control: policies that choose an action together with how long to hold it."""
from .envcore import (
    AugmentConfig,
    AugmentedAction,
    AugmentedState,
    AugmentedTransition,
    BaseEnv,
    Trajectory,
    augment_step,
    frequency_of,
    observe,
    rollout,
)
from .metrics import EpisodeReport, aggregate, episode_metrics

__version__ = "0.1.0"
