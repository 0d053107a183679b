"""Calibration-free inertial tracking of kinematic chains."""

__version__ = "0.1.0"
