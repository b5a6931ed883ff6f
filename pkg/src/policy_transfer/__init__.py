"""Adapting frozen goal-reaching policies to a new goal from a few demonstrations."""
from .cargoal_env import EnvParams, Task, default_base_tasks, default_target_task
from .config import ExperimentConfig, load_config
from .evaluation import EvalReport, evaluate, switching_rate, wilson_interval
from .math_core import AffineTransform, ConfigurationError, MlpParams
from .optim import CemConfig, SgdConfig, TransitionDataset, bc_loss_alignment, cem_optimize, sgd_train, switching_loss
from .pipelines import METHODS, AdaptSpec, PretrainSpec, adapt, collect_demos, scripted_expert, train_base_policy
from .policies import ActionAlignPolicy, ActionReAlignPolicy, BasePolicy, ObsAlignPolicy, SwitchingPolicy

__all__ = [
    "EnvParams", "Task", "default_base_tasks", "default_target_task", "ExperimentConfig", "load_config",
    "EvalReport", "evaluate", "switching_rate", "wilson_interval", "AffineTransform", "ConfigurationError",
    "MlpParams", "CemConfig", "SgdConfig", "TransitionDataset", "bc_loss_alignment", "cem_optimize", "sgd_train",
    "switching_loss", "METHODS", "AdaptSpec", "PretrainSpec", "adapt", "collect_demos", "scripted_expert",
    "train_base_policy", "ActionAlignPolicy", "ActionReAlignPolicy", "BasePolicy", "ObsAlignPolicy",
    "SwitchingPolicy",
]
