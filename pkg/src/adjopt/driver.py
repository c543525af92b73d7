"""Command line driver: forward solve, adjoint gradient, reports.

``adjopt`` integrates the reaction-diffusion model with the chosen Jacobian
strategy, runs the backward adjoint sweep for a terminal objective, and
writes three artifacts into the output directory: ``solution.csv`` (final
state), ``gradient.csv`` (sensitivity of the objective to the initial
state), and ``report.json`` (configuration echo, per-phase wall times,
iteration counts). ``adjopt --verify`` instead runs a self-check battery of
derivative cross-validations on a small grid and reports a pass/fail table.

Exit codes: 0 success, 1 a verify check failed, 2 configuration error,
3 solver failure, 4 output I/O failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import ad_core
from .adjoint import AdjointSolveError, Objective, adjoint_sweep
from .grayscott import GrayScottModel, GrayScottParams, GridGeometry
from .integrate import (JacobianStrategy, NewtonConvergenceError,
                        ThetaScheme, integrate)
from .linalg import AdShellOperator, CsrMatrix
from .sparse_color import (CompressedJacobian, build_recovery, build_seed,
                           color_columns, recover, validate_coloring)
from .stats import PHASES, PhaseTimer

__all__ = ["RunConfig", "ConfigError", "run", "verify", "main"]

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG = 2
EXIT_SOLVER = 3
EXIT_IO = 4

_STRATEGY_CHOICES = ("analytic", "fd", "uncompressed", "compressed",
                     "matrix-free")


class ConfigError(ValueError):
    """Invalid command line or configuration input."""


@dataclass
class RunConfig:
    """Validated run parameters."""

    mx: int
    my: int
    dt: float = 0.5
    steps: int = 100
    theta: float = 0.5
    strategy: JacobianStrategy = JacobianStrategy.AD_COMPRESSED
    objective_species: str = "u"
    objective_node: Optional[tuple[int, int]] = None
    d1: float = 8.0e-5
    d2: float = 4.0e-5
    gamma: float = 0.024
    kappa: float = 0.06
    out_dir: Path = Path("out")
    seed: int = 0
    parallel: bool = False


def _parse_objective(text: str):
    """'u@center', 'v@center', or 'u@i,j' (species may be omitted)."""
    t = text.strip().lower()
    species, sep, where = t.partition("@")
    if not sep:
        raise ConfigError(
            f"objective must look like 'u@center' or 'v@i,j', got {text!r}")
    species = species or "u"
    if species not in ("u", "v"):
        raise ConfigError(f"objective species must be 'u' or 'v', "
                          f"got {species!r}")
    if where == "center":
        return species, None
    parts = where.split(",")
    if len(parts) == 2:
        try:
            return species, (int(parts[0]), int(parts[1]))
        except ValueError:
            pass
    raise ConfigError(
        f"objective location must be 'center' or 'i,j', got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="adjopt",
        description="Implicit reaction-diffusion solve with sparse "
                    "AD Jacobians and a discrete adjoint gradient.")
    parser.add_argument("--grid", nargs="+", type=int, default=[65],
                        metavar="N",
                        help="grid size MX [MY]; MY defaults to MX")
    parser.add_argument("--dt", type=float, default=0.5,
                        help="time step size")
    parser.add_argument("--steps", type=int, default=100,
                        help="number of implicit steps")
    parser.add_argument("--theta", type=float, default=0.5,
                        help="implicitness parameter in [0, 1]")
    parser.add_argument("--strategy", default="compressed",
                        choices=_STRATEGY_CHOICES,
                        help="Jacobian strategy for Newton and adjoint")
    parser.add_argument("--objective", default="u@center",
                        help="terminal objective: u@center, v@center, "
                             "or u@i,j")
    parser.add_argument("--d1", type=float, default=8.0e-5,
                        help="diffusion coefficient of u")
    parser.add_argument("--d2", type=float, default=4.0e-5,
                        help="diffusion coefficient of v")
    parser.add_argument("--gamma", type=float, default=0.024,
                        help="feed rate")
    parser.add_argument("--kappa", type=float, default=0.06,
                        help="kill rate")
    parser.add_argument("--out-dir", default=None,
                        help="output directory (default: $ADJOPT_OUT_DIR "
                             "or ./out)")
    parser.add_argument("--seed", type=int, default=0,
                        help="random seed for verify probes")
    parser.add_argument("--parallel", action="store_true",
                        help="use threaded propagation kernels")
    parser.add_argument("--verify", action="store_true",
                        help="run the self-check battery instead of a solve")
    return parser


def config_from_args(args: argparse.Namespace) -> RunConfig:
    if len(args.grid) == 1:
        mx = my = args.grid[0]
    elif len(args.grid) == 2:
        mx, my = args.grid
    else:
        raise ConfigError("--grid takes one or two integers")
    if args.dt <= 0:
        raise ConfigError("--dt must be positive")
    if args.steps < 0:
        raise ConfigError("--steps must be nonnegative")
    if not 0.0 <= args.theta <= 1.0:
        raise ConfigError("--theta must lie in [0, 1]")
    species, node = _parse_objective(args.objective)
    out_dir = args.out_dir or os.environ.get("ADJOPT_OUT_DIR") or "out"
    return RunConfig(
        mx=mx, my=my, dt=args.dt, steps=args.steps, theta=args.theta,
        strategy=JacobianStrategy.from_name(args.strategy),
        objective_species=species, objective_node=node,
        d1=args.d1, d2=args.d2, gamma=args.gamma, kappa=args.kappa,
        out_dir=Path(out_dir), seed=args.seed, parallel=args.parallel)


def _make_model(config: RunConfig) -> GrayScottModel:
    try:
        params = GrayScottParams(mx=config.mx, my=config.my, D1=config.d1,
                                 D2=config.d2, gamma=config.gamma,
                                 kappa=config.kappa)
    except ValueError as err:
        raise ConfigError(str(err)) from err
    return GrayScottModel(params)


def _make_objective(config: RunConfig, params: GrayScottParams) -> Objective:
    try:
        if config.objective_node is None:
            return Objective.center(params, config.objective_species)
        i, j = config.objective_node
        return Objective.at_node(params, i, j, config.objective_species)
    except ValueError as err:
        raise ConfigError(str(err)) from err


def _write_state_csv(path: Path, state: np.ndarray,
                     params: GrayScottParams, names) -> None:
    geom = GridGeometry.from_params(params)
    lines = [f"x,y,{names[0]},{names[1]}"]
    for j in range(params.my):
        y = j * geom.hy
        for i in range(params.mx):
            x = i * geom.hx
            base = 2 * (j * params.mx + i)
            lines.append(f"{x:.17g},{y:.17g},{state[base]:.17g},"
                         f"{state[base + 1]:.17g}")
    path.write_text("\n".join(lines) + "\n", encoding="ascii")


def run(config: RunConfig) -> dict:
    """Forward solve plus adjoint sweep; writes artifacts, returns the
    report dictionary."""
    model = _make_model(config)
    params = model.params
    try:
        scheme = ThetaScheme(theta=config.theta, dt=config.dt,
                             n_steps=config.steps)
    except ValueError as err:
        raise ConfigError(str(err)) from err
    objective = _make_objective(config, params)
    if config.strategy is JacobianStrategy.AD_COMPRESSED and \
            (config.mx < 8 or config.my < 8):
        print("warning: on grids below 8x8 the periodic stencil wraps onto "
              "itself and the color count differs from larger grids",
              file=sys.stderr)

    x0 = model.initial_state()
    started = time.perf_counter()
    forward_timer = PhaseTimer()
    trajectory, solve_stats = integrate(model, x0, scheme, config.strategy,
                                        timer=forward_timer,
                                        parallel=config.parallel)
    adjoint_timer = PhaseTimer()
    gradient, adjoint_stats = adjoint_sweep(model, trajectory, objective,
                                            config.strategy,
                                            timer=adjoint_timer,
                                            parallel=config.parallel)
    total_seconds = time.perf_counter() - started

    phases = {name: forward_timer.seconds.get(name, 0.0)
              + adjoint_timer.seconds.get(name, 0.0) for name in PHASES}
    counters: dict = {}
    for source in (forward_timer.counts, adjoint_timer.counts):
        for key, value in source.items():
            counters[key] = counters.get(key, 0) + value
    objective_value = objective.value(trajectory.final_state)
    report = {
        "config": {
            "mx": config.mx, "my": config.my, "dt": config.dt,
            "steps": config.steps, "theta": config.theta,
            "strategy": config.strategy.value,
            "objective": f"{objective.species}@{objective.node[0]},"
                         f"{objective.node[1]}",
            "d1": config.d1, "d2": config.d2, "gamma": config.gamma,
            "kappa": config.kappa, "out_dir": str(config.out_dir),
            "seed": config.seed, "parallel": config.parallel,
        },
        "phase_seconds": phases,
        "phase_seconds_sum": sum(phases.values()),
        "total_seconds": total_seconds,
        "newton_iters": list(solve_stats.newton_iters),
        "linear_iters": {
            "forward": solve_stats.linear_total,
            "adjoint": adjoint_stats.linear_total,
        },
        "colors_used": solve_stats.colors_used,
        "objective_value": objective_value,
        "gradient_norm": float(np.linalg.norm(gradient)),
        "counters": counters,
    }

    out_dir = config.out_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_state_csv(out_dir / "solution.csv", trajectory.final_state,
                     params, ("u", "v"))
    _write_state_csv(out_dir / "gradient.csv", gradient, params,
                     ("du", "dv"))
    (out_dir / "report.json").write_text(json.dumps(report, indent=2) + "\n",
                                         encoding="ascii")

    print(f"grid {config.mx}x{config.my}  dt {config.dt}  "
          f"steps {config.steps}  theta {config.theta}  "
          f"strategy {config.strategy.value}")
    print(f"objective {objective.species}@({objective.node[0]},"
          f"{objective.node[1]}) = {objective_value:.12e}")
    print(f"gradient norm = {report['gradient_norm']:.12e}")
    print(f"newton iterations {sum(solve_stats.newton_iters)}  "
          f"linear iterations forward {solve_stats.linear_total} "
          f"adjoint {adjoint_stats.linear_total}")
    if solve_stats.colors_used is not None:
        print(f"colors used {solve_stats.colors_used}")
    print(f"wall time {total_seconds:.2f} s; artifacts in {out_dir}")
    return report


def _max_abs_diff(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.max(np.abs(a - b))) if a.size else 0.0


def verify(config: RunConfig, corrupt_analytic: bool = False) -> int:
    """Derivative self-checks on a small grid; prints a pass/fail table.

    ``corrupt_analytic`` perturbs one hand-derived Jacobian entry before
    the comparisons run; the analytic checks must then fail, which is how
    the battery itself is tested.
    """
    if config.mx > 32 or config.my > 32:
        raise ConfigError("verify mode is limited to grids up to 32x32")
    model = _make_model(config)
    params = model.params
    n = model.n_dofs
    rng = np.random.default_rng(config.seed)
    state = model.initial_state() + 0.05 * rng.standard_normal(n)

    checks: list[tuple[str, bool, str]] = []

    jac_analytic = model.analytic_jacobian(state)
    if corrupt_analytic:
        values = jac_analytic.values.copy()
        values[0] += 1e-3
        jac_analytic = CsrMatrix(jac_analytic.n_rows, jac_analytic.n_cols,
                                 jac_analytic.row_offsets,
                                 jac_analytic.col_indices, values)
    tape = model.record_tape(state)
    _, dense_ad = ad_core.forward_propagate(
        tape, state, ad_core.SeedMatrix.identity(n))
    jac_fd = model.fd_jacobian(state)

    dense_an = jac_analytic.to_dense()
    dense_fd = jac_fd.to_dense()
    scale = float(np.max(np.abs(dense_ad)))
    rel = _max_abs_diff(dense_an, dense_ad) / scale
    checks.append(("analytic vs ad jacobian", rel <= 1e-13,
                   f"max rel diff {rel:.3e}, bound 1e-13"))
    diff = _max_abs_diff(dense_ad, dense_fd)
    checks.append(("ad vs fd jacobian", diff <= 1e-6,
                   f"max abs diff {diff:.3e}, bound 1e-6"))
    diff = _max_abs_diff(dense_an, dense_fd)
    checks.append(("analytic vs fd jacobian", diff <= 1e-6,
                   f"max abs diff {diff:.3e}, bound 1e-6"))

    pattern = ad_core.extract_sparsity(tape)
    coloring = color_columns(pattern)
    try:
        validate_coloring(pattern, coloring)
        seed_matrix = build_seed(coloring)
        recovery = build_recovery(pattern, coloring)
        _, lanes = ad_core.forward_propagate(tape, state, seed_matrix)
        recovered = recover(CompressedJacobian(values=lanes,
                                               coloring=coloring),
                            recovery, pattern)
        lossless = np.array_equal(recovered.to_dense(), dense_ad)
        checks.append(("compressed recovery lossless", lossless,
                       f"{coloring.n_colors} colors, exact entrywise "
                       "equality"))
    except ValueError as err:
        checks.append(("compressed recovery lossless", False, str(err)))

    shell = AdShellOperator(tape, state)
    worst = 0.0
    for _ in range(20):
        v = rng.standard_normal(n)
        w = rng.standard_normal(n)
        s1 = float(w @ shell.apply(v))
        s2 = float(shell.apply_transpose(w) @ v)
        worst = max(worst, abs(s1 - s2) / max(1.0, abs(s1)))
    checks.append(("transpose dot identity", worst <= 1e-12,
                   f"max rel defect {worst:.3e}, bound 1e-12"))

    probe_steps = min(config.steps, 5) or 1
    scheme = ThetaScheme(theta=config.theta, dt=config.dt,
                         n_steps=probe_steps)
    objective = _make_objective(config, params)
    x0 = model.initial_state()
    trajectory, _ = integrate(model, x0, scheme, config.strategy)
    grad, _ = adjoint_sweep(model, trajectory, objective, config.strategy)

    def objective_of(start):
        probe_traj, _ = integrate(model, start, scheme,
                                  JacobianStrategy.ANALYTIC)
        return objective.value(probe_traj.final_state)

    delta = 1e-5
    probes = rng.choice(n, size=min(5, n), replace=False)
    worst = 0.0
    for dof in probes:
        bumped = x0.copy()
        bumped[dof] = x0[dof] + delta
        plus = objective_of(bumped)
        bumped[dof] = x0[dof] - delta
        minus = objective_of(bumped)
        fd_grad = (plus - minus) / (2.0 * delta)
        if abs(grad[dof]) > 1e-8:
            worst = max(worst, abs(fd_grad - grad[dof]) / abs(grad[dof]))
        else:
            worst = max(worst, abs(fd_grad - grad[dof]))
    checks.append(("adjoint gradient vs differences", worst <= 1e-4,
                   f"max defect {worst:.3e}, bound 1e-4"))

    print("verify checks:")
    for name, passed, detail in checks:
        label = "PASS" if passed else "FAIL"
        print(f"  {label}  {name}  ({detail})")
    failing = [name for name, passed, _ in checks if not passed]
    if failing:
        print(f"FAILED: {', '.join(failing)}")
        return EXIT_CHECK_FAILED
    print("all checks passed")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = config_from_args(args)
        if args.verify:
            return verify(config)
        run(config)
        return EXIT_OK
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (NewtonConvergenceError, AdjointSolveError,
            ZeroDivisionError) as err:
        print(f"solver failure: {err}", file=sys.stderr)
        return EXIT_SOLVER
    except OSError as err:
        print(f"output failure: {err}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
