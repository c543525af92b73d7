"""Discrete adjoint of the theta-rule integration.

The gradient of a terminal objective psi(x_N) with respect to the initial
state comes from one backward sweep over the stored trajectory. Seeding
lambda_N = d psi / d x_N, each step solves the transposed implicit system

    (I + dt * theta * J_F(x_{n+1}))^T mu = lambda_{n+1}

with transposed GMRES and then applies the explicit part,

    lambda_n = mu - dt * (1 - theta) * J_F(x_n)^T mu,

which degenerates to lambda_n = mu for backward Euler. lambda_0 is the
gradient. This is the exact transpose of the linearized forward recurrence,
so the gradient matches differencing the forward solver to solver accuracy,
not just to discretization accuracy.

Jacobian transposes reuse the same strategy machinery as the forward solve:
assembled matrices apply their transpose without forming it, the matrix-free
shell runs reverse sweeps of the tape recorded once at the final state.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .grayscott import GrayScottParams, center_node, dof_index
from .integrate import (JacobianContext, NewtonSettings, ThetaScheme,
                        Trajectory, _as_strategy)
from .linalg import LinearOperator, ScaledOperator, ShiftedOperator, gmres
from .stats import AdjointStats, PhaseTimer

__all__ = [
    "Objective",
    "AdjointState",
    "AdjointSolveError",
    "terminal_seed",
    "adjoint_step",
    "adjoint_sweep",
]


@dataclass(frozen=True)
class Objective:
    """One component of the final state as the quantity of interest.

    ``dof`` is the flat index into the state vector; ``species`` and
    ``node`` carry the grid meaning along for reporting.
    """

    dof: int
    species: str = "u"
    node: tuple[int, int] = (0, 0)

    @classmethod
    def at_node(cls, params: GrayScottParams, i: int, j: int,
                species: str = "u") -> "Objective":
        return cls(dof=dof_index(params, i, j, species), species=species,
                   node=(int(i), int(j)))

    @classmethod
    def center(cls, params: GrayScottParams,
               species: str = "u") -> "Objective":
        i, j = center_node(params)
        return cls.at_node(params, i, j, species)

    def value(self, x_final: np.ndarray) -> float:
        return float(x_final[self.dof])


@dataclass(frozen=True)
class AdjointState:
    """Adjoint vector lambda_n; ``step`` is the time index it belongs to
    (None for a detached seed)."""

    values: np.ndarray
    step: Optional[int] = None


class AdjointSolveError(RuntimeError):
    """A transposed linear solve did not converge."""

    def __init__(self, message: str, step: Optional[int] = None,
                 residual_norm: Optional[float] = None):
        super().__init__(message)
        self.step = step
        self.residual_norm = residual_norm


def terminal_seed(objective: Objective, x_final: np.ndarray) -> AdjointState:
    """lambda_N: the derivative of the objective with respect to the final
    state, a unit vector for a single-component objective."""
    x_final = np.asarray(x_final)
    if not 0 <= objective.dof < len(x_final):
        raise ValueError(f"objective index {objective.dof} outside state "
                         f"vector of length {len(x_final)}")
    seed = np.zeros(len(x_final))
    seed[objective.dof] = 1.0
    return AdjointState(values=seed, step=None)


def _implicit_operator(j_op: LinearOperator,
                       scheme: ThetaScheme) -> LinearOperator:
    hth = scheme.dt * scheme.theta
    inner = j_op if hth == 1.0 else ScaledOperator(hth, j_op)
    return ShiftedOperator(1.0, inner)


def _backward_step(ctx: JacobianContext, scheme: ThetaScheme, states, n: int,
                   lam: np.ndarray, settings: NewtonSettings,
                   op_next: Optional[LinearOperator]):
    """lambda_{n+1} -> lambda_n. Returns (lambda_n, iters, op at x_n or
    None). ``op_next`` may carry a J_F operator already linearized at
    x_{n+1}."""
    if op_next is None:
        op_next = ctx.j_operator(states[n + 1])
    system = _implicit_operator(op_next, scheme)
    with ctx.timer.phase("adjoint_transpose_solve"):
        solve = gmres(system, lam, rtol=settings.adjoint_rtol,
                      atol=settings.adjoint_atol,
                      max_iters=settings.gmres_max_iters,
                      restart=settings.gmres_restart, transposed=True)
    if not solve.converged:
        raise AdjointSolveError(
            f"transposed linear solve failed at step {n} "
            f"(residual {solve.residual_norm:.3e})",
            step=n, residual_norm=solve.residual_norm)
    mu = solve.x
    if scheme.theta < 1.0:
        op_cur = ctx.j_operator(states[n])
        with ctx.timer.phase("adjoint_transpose_solve"):
            correction = op_cur.apply_transpose(mu)
        lam_prev = mu - scheme.dt * (1.0 - scheme.theta) * correction
    else:
        op_cur = None
        lam_prev = mu
    return lam_prev, solve.iters, op_cur


def adjoint_step(model, trajectory: Trajectory, n: int, lambda_next,
                 strategy, settings: Optional[NewtonSettings] = None,
                 parallel: bool = False) -> AdjointState:
    """One backward step in isolation: consumes lambda_{n+1}, returns
    lambda_n."""
    settings = settings or NewtonSettings()
    states = trajectory.states
    if not 0 <= n < len(states) - 1:
        raise ValueError(f"step index {n} outside trajectory of "
                         f"{len(states) - 1} steps")
    lam = lambda_next.values if isinstance(lambda_next, AdjointState) \
        else np.asarray(lambda_next, dtype=np.float64)
    ctx = JacobianContext(model, _as_strategy(strategy), states[-1],
                          settings, PhaseTimer(), parallel)
    lam_prev, _, _ = _backward_step(ctx, trajectory.scheme, states, n,
                                    lam, settings, None)
    return AdjointState(values=lam_prev, step=n)


def adjoint_sweep(model, trajectory: Trajectory, objective: Objective,
                  strategy, settings: Optional[NewtonSettings] = None,
                  timer: Optional[PhaseTimer] = None,
                  parallel: bool = False):
    """Full backward sweep; returns (gradient, AdjointStats).

    The gradient is lambda_0, the sensitivity of the objective to every
    component of the initial state. For AD strategies the tape is recorded
    once at the final state and re-linearized at each stored iterate. With
    theta < 1 the J_F operator built for the explicit correction at x_n is
    reused as the implicit operator of the next (earlier) step.
    ``stats.linear_iters`` is in sweep order, last step first. A zero-step
    trajectory returns the terminal seed itself.
    """
    strategy = _as_strategy(strategy)
    settings = settings or NewtonSettings()
    timer = timer or PhaseTimer()
    started = time.perf_counter()
    states = trajectory.states
    scheme = trajectory.scheme
    ctx = JacobianContext(model, strategy, states[-1], settings, timer,
                          parallel)
    stats = AdjointStats()
    lam = terminal_seed(objective, states[-1]).values
    cached_index = -1
    cached_op: Optional[LinearOperator] = None
    for n in range(len(states) - 2, -1, -1):
        op_next = cached_op if cached_index == n + 1 else None
        try:
            lam, iters, op_cur = _backward_step(ctx, scheme, states, n, lam,
                                                settings, op_next)
        except AdjointSolveError:
            stats.phase_seconds = timer.snapshot()
            stats.counters = dict(timer.counts)
            stats.wall_seconds = time.perf_counter() - started
            raise
        stats.linear_iters.append(iters)
        cached_index, cached_op = (n, op_cur) if op_cur is not None \
            else (-1, None)
    stats.phase_seconds = timer.snapshot()
    stats.counters = dict(timer.counts)
    stats.wall_seconds = time.perf_counter() - started
    return lam, stats
