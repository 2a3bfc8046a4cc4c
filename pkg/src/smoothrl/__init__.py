"""Smoothness-regularized policy optimization on small continuous-control tasks."""

from .autodiff import Mlp, Tape, Var
from .ddpg import DdpgConfig, ReplayBuffer, Transition, ddpg_train
from .envs import DisturbanceWrapper, Pendulum, PointMass, make_env
from .harness import ExperimentConfig, parse_config, run_training
from .policy import DeterministicPolicy, GaussianPolicy, QNet
from .smoothreg import AdversaryConfig, PerturbationBall
from .trpo import TrpoConfig, TrpoTrainer, trpo_sr_update

__version__ = "0.1.0"

__all__ = [
    "AdversaryConfig", "DdpgConfig", "DeterministicPolicy", "DisturbanceWrapper",
    "ExperimentConfig", "GaussianPolicy", "Mlp", "Pendulum", "PerturbationBall", "PointMass",
    "QNet", "ReplayBuffer", "Tape", "Transition", "TrpoConfig", "TrpoTrainer", "Var",
    "ddpg_train", "make_env", "parse_config", "run_training", "trpo_sr_update",
]
