"""
Soft-constrained MPC for tracking solved with a structure-exploiting ADMM.
"""
from .admm import SolveReport, SolveStatus, WarmStart, solve
from .controller import ADMMController, SlackQPController, make_controller
from .problem import (BoundKind, BoundMode, PlantModel, ProblemData, ReferencePair, StageBounds, Weights,
                      assemble_ingredients, validate, with_constraint_mode)
