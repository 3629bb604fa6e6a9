"""Multisensory active-inference torque control on a simulated planar arm."""

__version__ = "0.1.0"
