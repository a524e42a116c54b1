"""Data-driven Youla-Kucera control with a stable-by-construction learned Q parameter."""

from .behavior import HankelModel, PersistentExcitationError, Trajectory, predict_next_output, solve_alpha
from .env import EnvConfig, TankEnv, TankParams, collect_excitation, reward
from .stablenet import LyapunovNet, QParameter, StableDynamics, stable_forward
from .youla import ControllerState, compose_incremental, control_step

__version__ = "0.1.0"

__all__ = [
    "ControllerState",
    "EnvConfig",
    "HankelModel",
    "LyapunovNet",
    "PersistentExcitationError",
    "QParameter",
    "StableDynamics",
    "TankEnv",
    "TankParams",
    "Trajectory",
    "collect_excitation",
    "compose_incremental",
    "control_step",
    "predict_next_output",
    "reward",
    "solve_alpha",
    "stable_forward",
]
