"""Data-driven synthesis and certification of neural incremental ISS Lyapunov functions."""

from deltaiss.dynamics import Box, DiscreteSystem, Trajectory, make_dc_motor, make_scalar_decay, simulate
from deltaiss.lipschitz import KTemplate, composite_L
from deltaiss.network import LyapunovNet
from deltaiss.sampling import SampleSet, build_epsilon_net
from deltaiss.training import Hyperparams, train
from deltaiss.verify import CertificationReport, certify

__all__ = [
    "Box",
    "DiscreteSystem",
    "Trajectory",
    "make_scalar_decay",
    "make_dc_motor",
    "simulate",
    "KTemplate",
    "composite_L",
    "LyapunovNet",
    "SampleSet",
    "build_epsilon_net",
    "Hyperparams",
    "train",
    "CertificationReport",
    "certify",
]

__version__ = "0.1.0"
