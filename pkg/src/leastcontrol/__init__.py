"""Control-based training of equilibrium networks.

The library trains dynamical systems that settle to a fixed point by
steering them with an output-driven controller and shrinking the amount
of control needed, instead of differentiating through the equilibrium.
Everything is double precision numpy; every learning rule ships with an
independent numerical oracle (finite differences, adjoint relaxation,
dense linear solves) so the updates can be verified, not trusted.
"""

from leastcontrol.numerics import Activation, Rng
from leastcontrol.network import EquilibriumNetwork, LossSpec
from leastcontrol.solver import SolveConfig, SolveReport, ControlledState
from leastcontrol.controllers import (
    OutputController,
    LinearFeedback,
    DynamicInversion,
    EnergyBased,
    FeedbackLearnCfg,
)

__version__ = "0.1.0"

__all__ = [
    "Activation",
    "Rng",
    "EquilibriumNetwork",
    "LossSpec",
    "SolveConfig",
    "SolveReport",
    "ControlledState",
    "OutputController",
    "LinearFeedback",
    "DynamicInversion",
    "EnergyBased",
    "FeedbackLearnCfg",
]
