"""Offline imitation learning by matching state-action occupancies."""

from .baselines import BCConfig, ValueDiceConfig, bc_train, valuedice_train
from .envs import Bandit1D, Pendulum1D, PointMass2D, PointMassExpert, evaluate_policy, generate_demos, make_env
from .nets import CriticF, TanhGaussianPolicy
from .replay import DemoBuffer, OnlineBuffer
from .softdice import SoftDiceConfig, train

__version__ = "0.1.0"

__all__ = [
    "BCConfig",
    "Bandit1D",
    "CriticF",
    "DemoBuffer",
    "OnlineBuffer",
    "Pendulum1D",
    "PointMass2D",
    "PointMassExpert",
    "SoftDiceConfig",
    "TanhGaussianPolicy",
    "ValueDiceConfig",
    "bc_train",
    "evaluate_policy",
    "generate_demos",
    "make_env",
    "train",
    "valuedice_train",
]
