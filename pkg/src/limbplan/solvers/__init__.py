"""Desk-scale subproblem solvers: convex QP, branch-and-bound MIQP, and an
augmented-Lagrangian NLP, behind small call interfaces."""

from .qp import QpCore, QpProblem, SolveReport, solve_qp
from .miqp import solve_miqp
from .nlpsol import check_gradients, solve_nlp

__all__ = [
    "QpProblem",
    "QpCore",
    "SolveReport",
    "solve_qp",
    "solve_miqp",
    "solve_nlp",
    "check_gradients",
]
