"""Sparse-Jacobian implicit solver with tape-based AD and a discrete
adjoint.

The package records a model residual once onto an operator tape, extracts
and colors its Jacobian sparsity for compressed derivative evaluation,
integrates the model with an implicit theta rule whose Newton systems can
draw their Jacobians from five interchangeable strategies, and differentiates
terminal objectives through the whole integration by a transposed sweep.
"""

from .ad_core import (ActiveScalar, RecordingError, SeedMatrix, Tape,
                      abort_recording, begin_recording, dump_tape,
                      end_recording, extract_sparsity, forward_propagate,
                      mark_dependent, mark_independent, replay_primal,
                      reverse_propagate)
from .adjoint import (AdjointSolveError, AdjointState, Objective,
                      adjoint_step, adjoint_sweep, terminal_seed)
from .grayscott import (GrayScottModel, GrayScottParams, GridGeometry,
                        center_node, dof_index, initial_conditions,
                        residual_passive)
from .integrate import (JacobianStrategy, NewtonConvergenceError,
                        NewtonSettings, ThetaScheme, Trajectory, integrate,
                        newton_solve, step_jacobian_operator, step_residual)
from .linalg import (AdShellOperator, CsrMatrix, GmresResult, LinearOperator,
                     ScaledOperator, ShiftedOperator, gmres, spmv,
                     spmv_transpose, write_matrix_market)
from .sparse_color import (Coloring, CompressedJacobian, RecoveryMatrix,
                           SparsityPattern, build_recovery, build_seed,
                           color_columns, compressed_jacobian, recover,
                           validate_coloring)
from .stats import AdjointStats, PhaseTimer, SolveStats

__version__ = "0.1.0"

__all__ = [
    "ActiveScalar",
    "AdShellOperator",
    "AdjointSolveError",
    "AdjointState",
    "AdjointStats",
    "Coloring",
    "CompressedJacobian",
    "CsrMatrix",
    "GmresResult",
    "GrayScottModel",
    "GrayScottParams",
    "GridGeometry",
    "JacobianStrategy",
    "LinearOperator",
    "NewtonConvergenceError",
    "NewtonSettings",
    "Objective",
    "PhaseTimer",
    "RecordingError",
    "RecoveryMatrix",
    "ScaledOperator",
    "SeedMatrix",
    "ShiftedOperator",
    "SolveStats",
    "SparsityPattern",
    "Tape",
    "ThetaScheme",
    "Trajectory",
    "abort_recording",
    "adjoint_step",
    "adjoint_sweep",
    "begin_recording",
    "build_recovery",
    "build_seed",
    "center_node",
    "color_columns",
    "compressed_jacobian",
    "dof_index",
    "dump_tape",
    "end_recording",
    "extract_sparsity",
    "forward_propagate",
    "gmres",
    "initial_conditions",
    "integrate",
    "mark_dependent",
    "mark_independent",
    "newton_solve",
    "replay_primal",
    "residual_passive",
    "reverse_propagate",
    "spmv",
    "spmv_transpose",
    "step_jacobian_operator",
    "step_residual",
    "terminal_seed",
    "validate_coloring",
    "write_matrix_market",
]
