"""Controllers sharing the tick interface ``(state, snapshot, goal) -> (state, torque)``."""

from .aif import ControllerFault, ControllerGains, ControllerState, aic_tick, initial_state, maic_gp_tick
from .classic import MpcConfig, MpcController, critical_damping, ilqr, impedance_tick, mpc_tick
from .vae import maic_vae_tick, mental_simulate

__all__ = [
    "ControllerFault", "ControllerGains", "ControllerState", "MpcConfig", "MpcController", "aic_tick",
    "critical_damping", "ilqr", "impedance_tick", "initial_state", "maic_gp_tick", "maic_vae_tick",
    "mental_simulate", "mpc_tick",
]
