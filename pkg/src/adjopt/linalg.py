"""Sparse matrices, matrix-free operator shells, and a restarted GMRES.

Everything a Krylov solve needs is expressed through a tiny operator
protocol: ``shape``, ``apply`` (matrix-vector product) and
``apply_transpose``. Assembled matrices in compressed sparse row form and
tape-backed shells satisfy it interchangeably, which is what lets the same
Newton-Krylov loop run assembled or matrix-free. Transposed solves route
every product through ``apply_transpose`` instead; nothing else changes.
"""

from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np

from . import ad_core

__all__ = [
    "LinearOperator",
    "CsrMatrix",
    "AdShellOperator",
    "ShiftedOperator",
    "ScaledOperator",
    "spmv",
    "spmv_transpose",
    "gmres",
    "GmresResult",
    "write_matrix_market",
]


class LinearOperator:
    """Minimal operator interface. Subclasses set ``shape`` and implement
    the two products."""

    shape: tuple[int, int]

    def apply(self, v: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def apply_transpose(self, v: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class CsrMatrix(LinearOperator):
    """Compressed sparse row matrix with strictly increasing column indices
    per row. Products are delegated to a lazily built scipy view sharing the
    same index and value arrays."""

    def __init__(self, n_rows: int, n_cols: int, row_offsets: np.ndarray,
                 col_indices: np.ndarray, values: np.ndarray):
        row_offsets = np.ascontiguousarray(row_offsets, dtype=np.int64)
        col_indices = np.ascontiguousarray(col_indices, dtype=np.int64)
        values = np.ascontiguousarray(values, dtype=np.float64)
        if row_offsets.shape != (n_rows + 1,):
            raise ValueError("row_offsets must have n_rows + 1 entries")
        if row_offsets[0] != 0 or row_offsets[-1] != len(col_indices):
            raise ValueError("row_offsets must span exactly the nonzeros")
        if np.any(np.diff(row_offsets) < 0):
            raise ValueError("row_offsets must be nondecreasing")
        if len(values) != len(col_indices):
            raise ValueError("values and col_indices must align")
        if len(col_indices):
            if col_indices.min() < 0 or col_indices.max() >= n_cols:
                raise ValueError("column index out of range")
            row_of = np.repeat(np.arange(n_rows, dtype=np.int64),
                               np.diff(row_offsets))
            key = row_of * n_cols + col_indices
            if np.any(np.diff(key) <= 0):
                raise ValueError("column indices must be strictly "
                                 "increasing within each row")
        self.n_rows = n_rows
        self.n_cols = n_cols
        self.row_offsets = row_offsets
        self.col_indices = col_indices
        self.values = values
        self.shape = (n_rows, n_cols)
        self._sp = None
        self._spT = None

    @property
    def nnz(self) -> int:
        return len(self.col_indices)

    def _scipy(self):
        if self._sp is None:
            from scipy.sparse import csr_matrix
            self._sp = csr_matrix(
                (self.values, self.col_indices, self.row_offsets),
                shape=self.shape)
        return self._sp

    def apply(self, v: np.ndarray) -> np.ndarray:
        return self._scipy() @ np.asarray(v, dtype=np.float64)

    def apply_transpose(self, v: np.ndarray) -> np.ndarray:
        if self._spT is None:
            self._spT = self._scipy().T
        return self._spT @ np.asarray(v, dtype=np.float64)

    def to_dense(self) -> np.ndarray:
        dense = np.zeros(self.shape)
        row_of = np.repeat(np.arange(self.n_rows), np.diff(self.row_offsets))
        dense[row_of, self.col_indices] = self.values
        return dense

    def transpose(self) -> "CsrMatrix":
        t = self._scipy().T.tocsr()
        t.sort_indices()
        return CsrMatrix(self.n_cols, self.n_rows,
                         t.indptr.astype(np.int64),
                         t.indices.astype(np.int64),
                         t.data.astype(np.float64))

    def scaled(self, alpha: float) -> "CsrMatrix":
        return CsrMatrix(self.n_rows, self.n_cols, self.row_offsets,
                         self.col_indices, alpha * self.values)

    @classmethod
    def from_dense(cls, dense: np.ndarray) -> "CsrMatrix":
        dense = np.asarray(dense, dtype=np.float64)
        if dense.ndim != 2:
            raise ValueError("need a two dimensional array")
        rows, cols = np.nonzero(dense)
        offsets = np.zeros(dense.shape[0] + 1, np.int64)
        np.cumsum(np.bincount(rows, minlength=dense.shape[0]),
                  out=offsets[1:])
        return cls(dense.shape[0], dense.shape[1], offsets,
                   cols.astype(np.int64), dense[rows, cols])

    @classmethod
    def identity(cls, n: int) -> "CsrMatrix":
        idx = np.arange(n, dtype=np.int64)
        offsets = np.arange(n + 1, dtype=np.int64)
        return cls(n, n, offsets, idx, np.ones(n))

    def __repr__(self) -> str:
        return (f"CsrMatrix(shape={self.shape}, nnz={self.nnz})")


def spmv(matrix: CsrMatrix, v: np.ndarray) -> np.ndarray:
    """Sparse matrix times vector."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (matrix.n_cols,):
        raise ValueError(f"vector must have length {matrix.n_cols}")
    return matrix.apply(v)


def spmv_transpose(matrix: CsrMatrix, v: np.ndarray) -> np.ndarray:
    """Transposed sparse matrix times vector, without forming the
    transpose."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (matrix.n_rows,):
        raise ValueError(f"vector must have length {matrix.n_rows}")
    return matrix.apply_transpose(v)


class AdShellOperator(LinearOperator):
    """Jacobian of a taped function as an operator, never assembled.

    ``apply`` runs one tangent sweep, ``apply_transpose`` one adjoint sweep,
    both linearized at the stored state. ``set_state`` re-points the shell at
    a new iterate between solves.
    """

    def __init__(self, tape: ad_core.Tape, state: np.ndarray,
                 parallel: bool = False):
        self.tape = tape
        self.parallel = parallel
        self.shape = (tape.n_dependent, tape.n_independent)
        self.set_state(state)

    def set_state(self, state: np.ndarray) -> None:
        state = np.ascontiguousarray(state, dtype=np.float64)
        if state.shape != (self.tape.n_independent,):
            raise ValueError("state length does not match tape independents")
        self.state = state

    def apply(self, v: np.ndarray) -> np.ndarray:
        _, jv = ad_core.forward_propagate(self.tape, self.state, v,
                                          parallel=self.parallel)
        return jv

    def apply_transpose(self, v: np.ndarray) -> np.ndarray:
        return ad_core.reverse_propagate(self.tape, self.state, v,
                                         parallel=self.parallel)


class ShiftedOperator(LinearOperator):
    """sigma * identity plus an inner operator."""

    def __init__(self, sigma: float, inner: LinearOperator):
        if inner.shape[0] != inner.shape[1]:
            raise ValueError("shifted operator needs a square inner operator")
        self.sigma = float(sigma)
        self.inner = inner
        self.shape = inner.shape

    def apply(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        return self.sigma * v + self.inner.apply(v)

    def apply_transpose(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        return self.sigma * v + self.inner.apply_transpose(v)


class ScaledOperator(LinearOperator):
    """alpha times an inner operator."""

    def __init__(self, alpha: float, inner: LinearOperator):
        self.alpha = float(alpha)
        self.inner = inner
        self.shape = inner.shape

    def apply(self, v: np.ndarray) -> np.ndarray:
        return self.alpha * self.inner.apply(v)

    def apply_transpose(self, v: np.ndarray) -> np.ndarray:
        return self.alpha * self.inner.apply_transpose(v)


class GmresResult:
    """Outcome of one gmres call. ``residual_estimates`` holds the rotated
    least-squares residual magnitudes of each restart cycle, starting from
    the cycle's true initial residual."""

    __slots__ = ("x", "iters", "converged", "residual_norm",
                 "residual_estimates")

    def __init__(self, x, iters, converged, residual_norm,
                 residual_estimates):
        self.x = x
        self.iters = iters
        self.converged = converged
        self.residual_norm = residual_norm
        self.residual_estimates = residual_estimates

    def __iter__(self):
        yield self.x
        yield self.iters
        yield self.converged

    def __repr__(self) -> str:
        return (f"GmresResult(iters={self.iters}, "
                f"converged={self.converged}, "
                f"residual_norm={self.residual_norm:.3e})")


def _back_substitute(H: np.ndarray, g: np.ndarray, k: int
                     ) -> Optional[np.ndarray]:
    y = np.empty(k)
    for i in range(k - 1, -1, -1):
        if H[i, i] == 0.0:
            return None
        y[i] = (g[i] - H[i, i + 1:k] @ y[i + 1:k]) / H[i, i]
    return y


def gmres(op: LinearOperator, b: np.ndarray, x0: Optional[np.ndarray] = None,
          *, rtol: float = 1e-5, atol: float = 1e-50, max_iters: int = 10000,
          restart: int = 30, transposed: bool = False) -> GmresResult:
    """Restarted GMRES without preconditioning.

    Arnoldi vectors are orthogonalized by modified Gram-Schmidt in a single
    pass and the small least-squares problem is carried by Givens rotations,
    so a cheap residual estimate is available each inner iteration.
    Convergence means the true residual satisfies
    ``norm(b - op(x)) <= max(rtol * norm(b), atol)``; the estimate only
    triggers the check. With ``transposed=True`` every product goes through
    ``op.apply_transpose``, solving the transposed system. ``iters`` counts
    operator products used to grow Krylov spaces. An exact Arnoldi breakdown
    ends the solve; it reports converged if the residual test passes.
    """
    if op.shape[0] != op.shape[1]:
        raise ValueError("gmres needs a square operator")
    n = op.shape[1]
    b = np.asarray(b, dtype=np.float64)
    if b.shape != (n,):
        raise ValueError(f"right-hand side must have length {n}")
    if restart < 1:
        raise ValueError("restart must be at least 1")

    def produce(v):
        return op.apply_transpose(v) if transposed else op.apply(v)

    bnorm = float(np.linalg.norm(b))
    tol = max(rtol * bnorm, atol)
    if x0 is None:
        x = np.zeros(n)
        r = b.copy()
    else:
        x = np.asarray(x0, dtype=np.float64).copy()
        if x.shape != (n,):
            raise ValueError(f"initial guess must have length {n}")
        r = b - produce(x)

    iters = 0
    estimates: list[np.ndarray] = []
    while True:
        beta = float(np.linalg.norm(r))
        if beta <= tol:
            return GmresResult(x, iters, True, beta, tuple(estimates))
        if iters >= max_iters:
            return GmresResult(x, iters, False, beta, tuple(estimates))

        V = np.empty((restart + 1, n))
        V[0] = r / beta
        H = np.zeros((restart + 1, restart))
        cs = np.empty(restart)
        sn = np.empty(restart)
        g = np.zeros(restart + 1)
        g[0] = beta
        cycle_est = [beta]
        k = 0
        breakdown = False
        for j in range(restart):
            if iters >= max_iters:
                break
            w = produce(V[j])
            iters += 1
            for i in range(j + 1):
                h = float(V[i] @ w)
                H[i, j] = h
                w -= h * V[i]
            hn = float(np.linalg.norm(w))
            for i in range(j):
                t = cs[i] * H[i, j] + sn[i] * H[i + 1, j]
                H[i + 1, j] = -sn[i] * H[i, j] + cs[i] * H[i + 1, j]
                H[i, j] = t
            denom = math.hypot(H[j, j], hn)
            if denom == 0.0:
                cs[j] = 1.0
                sn[j] = 0.0
            else:
                cs[j] = H[j, j] / denom
                sn[j] = hn / denom
            H[j, j] = cs[j] * H[j, j] + sn[j] * hn
            g[j + 1] = -sn[j] * g[j]
            g[j] = cs[j] * g[j]
            k = j + 1
            cycle_est.append(abs(g[j + 1]))
            if hn == 0.0:
                breakdown = True
                break
            V[j + 1] = w / hn
            if abs(g[j + 1]) <= tol:
                break
        estimates.append(np.asarray(cycle_est))
        if k > 0:
            y = _back_substitute(H, g, k)
            if y is None:
                rn = float(np.linalg.norm(b - produce(x)))
                return GmresResult(x, iters, rn <= tol, rn, tuple(estimates))
            x = x + V[:k].T @ y
        r = b - produce(x)
        rn = float(np.linalg.norm(r))
        if rn <= tol:
            return GmresResult(x, iters, True, rn, tuple(estimates))
        if breakdown:
            return GmresResult(x, iters, False, rn, tuple(estimates))


def write_matrix_market(matrix: CsrMatrix, destination) -> None:
    """Write a matrix in MatrixMarket coordinate format (1-based indices)."""
    row_of = np.repeat(np.arange(matrix.n_rows), np.diff(matrix.row_offsets))
    lines = ["%%MatrixMarket matrix coordinate real general",
             f"{matrix.n_rows} {matrix.n_cols} {matrix.nnz}"]
    for r, c, v in zip(row_of, matrix.col_indices, matrix.values):
        lines.append(f"{r + 1} {c + 1} {v:.17g}")
    text = "\n".join(lines) + "\n"
    if hasattr(destination, "write"):
        destination.write(text)
    else:
        with open(destination, "w", encoding="ascii") as fh:
            fh.write(text)
