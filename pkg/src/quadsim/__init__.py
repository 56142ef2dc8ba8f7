"""Data-parallel differentiable quadrotor simulation and policy learning."""

from quadsim import autodiff
from quadsim.autodiff import Tape, Var

__all__ = [
    "autodiff",
    "Tape",
    "Var",
    "config",
    "dynamics",
    "learners",
    "nets",
    "sensors",
    "tasks",
    "world",
]
__version__ = "0.1.0"
