"""Stochastic optimal control with delay in the control via partial smoothing."""

__version__ = "0.1.0"

from .errors import (ControllabilityFailure, ConvergenceFailure, DelayHJBError, HamiltonianUnbounded,
                     ImageInclusionViolated, InvalidInput, OracleTooLarge, ParseError, TerminalSingularity)
from .system_model import DelaySystem, LiftedState, embed_initial, etAB_first, semigroup_apply
from .hamiltonian import ControlProblem
from .hjb_solver import SolverGrids, ValueRep, eval_gradB_v, eval_v, solve

__all__ = [
    "ControlProblem", "ControllabilityFailure", "ConvergenceFailure", "DelayHJBError", "DelaySystem",
    "HamiltonianUnbounded", "ImageInclusionViolated", "InvalidInput", "LiftedState", "OracleTooLarge",
    "ParseError", "SolverGrids", "TerminalSingularity", "ValueRep", "embed_initial", "etAB_first",
    "eval_gradB_v", "eval_v", "semigroup_apply", "solve",
]
