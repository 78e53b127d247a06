"""Robust MPC toolkit: disturbance feedback, tube and system level tube MPC."""
__version__ = "0.1.0"

from .horizon import LtiSystem, build_horizon_operators, propagate
from .polytope import Box, Polytope, box
from .controllers import (Kind, MpcController, MpcProblem, min_tightening_gain, benchmark_problem,
                          policy_parameter_counts)
