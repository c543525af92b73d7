"""Implicit theta-rule time stepping with Newton-Krylov corrections.

One step from u_prev over dt solves G(u) = 0 with

    G(u) = (u - u_prev) / dt - theta * f(u) - (1 - theta) * f(u_prev)

where f is the model right-hand side, so theta = 1 is backward Euler and
theta = 1/2 the trapezoidal rule. The model exposes f through a residual
convention F(x) = -f(x), and every Jacobian provider in this module returns
J_F; the Newton matrix is then (1/dt) I + theta * J_F, assembled lazily as
an operator composition so assembled and matrix-free providers run through
the same solve.

A model is any object with ``n_dofs``, ``rhs(u)``, and whichever Jacobian
providers its strategies need: ``analytic_jacobian(u)`` and
``fd_jacobian(u, eps, parallel)`` return CsrMatrix, ``record_tape(u)``
returns a tape for the residual. The tape is recorded once per run, before
stepping starts, and replayed at every linearization point afterwards.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np

from . import ad_core
from .linalg import (AdShellOperator, CsrMatrix, LinearOperator,
                     ScaledOperator, ShiftedOperator, gmres)
from .sparse_color import (CompressedJacobian, build_recovery, build_seed,
                           color_columns, recover)
from .stats import PhaseTimer, SolveStats

__all__ = [
    "JacobianStrategy",
    "ThetaScheme",
    "NewtonSettings",
    "Trajectory",
    "NewtonConvergenceError",
    "integrate",
    "newton_solve",
    "step_residual",
    "step_jacobian_operator",
]


class JacobianStrategy(Enum):
    """How the Newton matrix gets its Jacobian."""

    ANALYTIC = "analytic"
    FD = "fd"
    AD_UNCOMPRESSED = "uncompressed"
    AD_COMPRESSED = "compressed"
    AD_MATRIX_FREE = "matrix-free"

    @classmethod
    def from_name(cls, name: str) -> "JacobianStrategy":
        key = name.strip().lower().replace("_", "-")
        key = {
            "ad-uncompressed": "uncompressed",
            "ad-compressed": "compressed",
            "ad-matrix-free": "matrix-free",
            "matrixfree": "matrix-free",
        }.get(key, key)
        for member in cls:
            if member.value == key:
                return member
        raise ValueError(f"unknown jacobian strategy {name!r}")


@dataclass(frozen=True)
class ThetaScheme:
    """Time discretization: theta in [0, 1], step size dt, step count."""

    theta: float
    dt: float
    n_steps: int

    def __post_init__(self):
        if not 0.0 <= self.theta <= 1.0:
            raise ValueError("theta must lie in [0, 1]")
        if not self.dt > 0.0:
            raise ValueError("dt must be positive")
        if self.n_steps < 0:
            raise ValueError("n_steps must be nonnegative")

    @classmethod
    def backward_euler(cls, dt: float, n_steps: int) -> "ThetaScheme":
        return cls(theta=1.0, dt=dt, n_steps=n_steps)

    @classmethod
    def trapezoidal(cls, dt: float, n_steps: int) -> "ThetaScheme":
        return cls(theta=0.5, dt=dt, n_steps=n_steps)


@dataclass(frozen=True)
class NewtonSettings:
    """Tolerances for the nonlinear and the inner linear solves.

    Newton stops when ||G|| <= max(rtol * ||G at the predictor||, atol).
    The ``gmres_*`` values govern the inner solves of Newton corrections,
    where the outer iteration absorbs inexactness; ``adjoint_rtol`` and
    ``adjoint_atol`` govern the transposed solves of the backward sweep,
    which has no outer iteration and therefore runs much tighter.
    ``fd_eps`` is the central-difference step of the fd strategy.
    """

    rtol: float = 1e-8
    atol: float = 1e-12
    max_iters: int = 50
    gmres_rtol: float = 1e-5
    gmres_atol: float = 1e-50
    gmres_max_iters: int = 10000
    gmres_restart: int = 30
    adjoint_rtol: float = 1e-12
    adjoint_atol: float = 1e-50
    fd_eps: float = 1e-7


@dataclass
class Trajectory:
    """States produced by one integration, x_0 through x_N inclusive."""

    scheme: ThetaScheme
    states: list

    @property
    def final_state(self) -> np.ndarray:
        return self.states[-1]

    def __len__(self) -> int:
        return len(self.states)


class NewtonConvergenceError(RuntimeError):
    """Newton failed to reach its tolerance within the iteration budget."""

    def __init__(self, message: str, step: Optional[int] = None,
                 residual_norm: Optional[float] = None, history=None):
        super().__init__(message)
        self.step = step
        self.residual_norm = residual_norm
        self.history = history or []


class _TimedShell(LinearOperator):
    """Matrix-free Jacobian shell that books its sweeps into timer phases."""

    def __init__(self, tape, state, timer, parallel):
        self._shell = AdShellOperator(tape, state, parallel=parallel)
        self._timer = timer
        self.shape = self._shell.shape

    def apply(self, v):
        with self._timer.phase("forward_propagation"):
            self._timer.count("forward_propagations")
            return self._shell.apply(v)

    def apply_transpose(self, v):
        with self._timer.phase("reverse_propagation"):
            self._timer.count("reverse_propagations")
            return self._shell.apply_transpose(v)


class JacobianContext:
    """Everything a strategy prepares once per run.

    AD strategies record the tape here; the compressed strategy adds
    sparsity extraction, coloring, seed, and recovery map; the uncompressed
    strategy keeps a reusable dense buffer. ``j_operator`` then produces the
    residual Jacobian J_F at any state, with wall time booked per phase.

    The compressed strategy refills one preallocated matrix in place, so
    the operator returned by ``j_operator`` is only valid until the next
    ``j_operator`` call on the same context.
    """

    def __init__(self, model, strategy: JacobianStrategy, x0: np.ndarray,
                 settings: NewtonSettings, timer: PhaseTimer,
                 parallel: bool = False):
        self.model = model
        self.strategy = strategy
        self.settings = settings
        self.timer = timer
        self.parallel = parallel
        self.colors_used: Optional[int] = None
        self.tape = None
        self.pattern = None
        self.coloring = None
        self._seed = None
        self._recovery = None
        self._dense_buffer = None
        if strategy in (JacobianStrategy.AD_UNCOMPRESSED,
                        JacobianStrategy.AD_COMPRESSED,
                        JacobianStrategy.AD_MATRIX_FREE):
            with timer.phase("tape_record"):
                self.tape = model.record_tape(
                    np.ascontiguousarray(x0, dtype=np.float64))
        if strategy is JacobianStrategy.AD_COMPRESSED:
            with timer.phase("sparsity"):
                self.pattern = ad_core.extract_sparsity(self.tape)
            with timer.phase("coloring_seed"):
                self.coloring = color_columns(self.pattern)
                self._seed = build_seed(self.coloring)
                self._recovery = build_recovery(self.pattern, self.coloring)
                # The scatter recover() performs is state independent, so
                # precompute it: entry (i, j) of the pattern lives at lane
                # color_of[j] of compressed row i.
                offsets, cols = self.pattern.csr_structure()
                row_of = np.repeat(
                    np.arange(self.pattern.n_rows, dtype=np.int64),
                    np.diff(offsets))
                p = self.coloring.n_colors
                self._gather = row_of * p + self.coloring.color_of[cols]
                self._lane_buffer = np.empty((self.pattern.n_rows, p))
                self._recovered = CsrMatrix(
                    self.pattern.n_rows, self.pattern.n_cols, offsets, cols,
                    np.zeros(len(cols)))
            self.colors_used = self.coloring.n_colors
        if strategy is JacobianStrategy.AD_UNCOMPRESSED:
            self._dense_buffer = np.empty(
                (self.tape.n_dependent, self.tape.n_independent))

    def rhs(self, u: np.ndarray) -> np.ndarray:
        with self.timer.phase("residual_eval"):
            self.timer.count("residual_evals")
            return self.model.rhs(u)

    def j_operator(self, u: np.ndarray) -> LinearOperator:
        timer = self.timer
        s = self.strategy
        if s is JacobianStrategy.ANALYTIC:
            with timer.phase("jacobian_assembly"):
                timer.count("jacobian_builds")
                return self.model.analytic_jacobian(u)
        if s is JacobianStrategy.FD:
            with timer.phase("jacobian_assembly"):
                timer.count("jacobian_builds")
                return self.model.fd_jacobian(u, eps=self.settings.fd_eps,
                                              parallel=self.parallel)
        if s is JacobianStrategy.AD_UNCOMPRESSED:
            with timer.phase("forward_propagation"):
                timer.count("forward_propagations",
                            self.tape.n_independent)
                identity = ad_core.SeedMatrix.identity(
                    self.tape.n_independent)
                _, dense = ad_core.forward_propagate(
                    self.tape, u, identity, parallel=self.parallel,
                    out=self._dense_buffer)
            with timer.phase("jacobian_assembly"):
                timer.count("jacobian_builds")
                return CsrMatrix.from_dense(dense)
        if s is JacobianStrategy.AD_COMPRESSED:
            with timer.phase("forward_propagation"):
                timer.count("forward_propagations", self._seed.p)
                _, lanes = ad_core.forward_propagate(
                    self.tape, u, self._seed, parallel=self.parallel,
                    out=self._lane_buffer)
            with timer.phase("recovery"):
                timer.count("recoveries")
                m = self._recovered
                np.take(lanes.ravel(), self._gather, out=m.values)
                # drop the cached scipy views built on the old values
                m._sp = None
                m._spT = None
                return m
        return _TimedShell(self.tape, u, timer, self.parallel)


def _step_operator(j_op: LinearOperator,
                   scheme: ThetaScheme) -> LinearOperator:
    inner = j_op if scheme.theta == 1.0 \
        else ScaledOperator(scheme.theta, j_op)
    return ShiftedOperator(1.0 / scheme.dt, inner)


def _newton(ctx: JacobianContext, u_prev: np.ndarray, scheme: ThetaScheme,
            settings: NewtonSettings):
    h = scheme.dt
    theta = scheme.theta
    f_prev = ctx.rhs(u_prev)
    u = u_prev.copy()
    residual = -f_prev
    norm_cur = float(np.linalg.norm(residual))
    tol = max(settings.rtol * norm_cur, settings.atol)
    history = [norm_cur]
    iters = 0
    linear_total = 0
    while norm_cur > tol:
        if not np.isfinite(norm_cur):
            raise NewtonConvergenceError(
                "Newton residual is not finite",
                residual_norm=norm_cur, history=history)
        if iters >= settings.max_iters:
            raise NewtonConvergenceError(
                f"no convergence within {settings.max_iters} Newton "
                f"iterations (residual {norm_cur:.3e}, tol {tol:.3e})",
                residual_norm=norm_cur, history=history)
        op = _step_operator(ctx.j_operator(u), scheme)
        with ctx.timer.phase("linear_solve"):
            solve = gmres(op, -residual, rtol=settings.gmres_rtol,
                          atol=settings.gmres_atol,
                          max_iters=settings.gmres_max_iters,
                          restart=settings.gmres_restart)
        linear_total += solve.iters
        u = u + solve.x
        f_u = ctx.rhs(u)
        residual = (u - u_prev) / h - theta * f_u - (1.0 - theta) * f_prev
        norm_cur = float(np.linalg.norm(residual))
        history.append(norm_cur)
        iters += 1
    return u, iters, linear_total


def step_residual(model, u_next: np.ndarray, u_prev: np.ndarray,
                  scheme: ThetaScheme) -> np.ndarray:
    """G(u_next) for one step starting at u_prev."""
    u_next = np.asarray(u_next, dtype=np.float64)
    u_prev = np.asarray(u_prev, dtype=np.float64)
    return (u_next - u_prev) / scheme.dt \
        - scheme.theta * model.rhs(u_next) \
        - (1.0 - scheme.theta) * model.rhs(u_prev)


def step_jacobian_operator(model, u: np.ndarray, scheme: ThetaScheme,
                           strategy: JacobianStrategy,
                           settings: Optional[NewtonSettings] = None,
                           parallel: bool = False) -> LinearOperator:
    """Newton matrix (1/dt) I + theta J_F(u) as an operator."""
    ctx = JacobianContext(model, _as_strategy(strategy), np.asarray(u),
                          settings or NewtonSettings(), PhaseTimer(),
                          parallel)
    return _step_operator(ctx.j_operator(np.asarray(u, dtype=np.float64)),
                          scheme)


def _as_strategy(strategy) -> JacobianStrategy:
    if isinstance(strategy, JacobianStrategy):
        return strategy
    return JacobianStrategy.from_name(str(strategy))


def newton_solve(model, u_prev: np.ndarray, scheme: ThetaScheme,
                 strategy=JacobianStrategy.ANALYTIC,
                 settings: Optional[NewtonSettings] = None,
                 parallel: bool = False):
    """Solve one implicit step; returns (u_next, newton_iters, linear_iters).
    """
    settings = settings or NewtonSettings()
    u_prev = np.ascontiguousarray(u_prev, dtype=np.float64)
    ctx = JacobianContext(model, _as_strategy(strategy), u_prev, settings,
                          PhaseTimer(), parallel)
    return _newton(ctx, u_prev, scheme, settings)


def integrate(model, x0: np.ndarray, scheme: ThetaScheme, strategy,
              settings: Optional[NewtonSettings] = None,
              timer: Optional[PhaseTimer] = None, parallel: bool = False):
    """March the model from x0 over n_steps implicit steps.

    Returns (Trajectory, SolveStats). All states stay in memory; the
    trajectory is what an adjoint sweep walks backwards. A zero-step scheme
    returns the initial state alone.
    """
    strategy = _as_strategy(strategy)
    settings = settings or NewtonSettings()
    timer = timer or PhaseTimer()
    x0 = np.ascontiguousarray(x0, dtype=np.float64)
    if x0.shape != (model.n_dofs,):
        raise ValueError(
            f"initial state must have length {model.n_dofs}")
    started = time.perf_counter()
    ctx = JacobianContext(model, strategy, x0, settings, timer, parallel)
    stats = SolveStats(colors_used=ctx.colors_used)
    states = [x0.copy()]
    u = states[0]
    for step in range(scheme.n_steps):
        try:
            u, n_newton, n_linear = _newton(ctx, u, scheme, settings)
        except NewtonConvergenceError as err:
            err.step = step
            raise
        states.append(u)
        stats.newton_iters.append(n_newton)
        stats.linear_iters.append(n_linear)
    stats.phase_seconds = timer.snapshot()
    stats.counters = dict(timer.counts)
    stats.wall_seconds = time.perf_counter() - started
    return Trajectory(scheme=scheme, states=states), stats
