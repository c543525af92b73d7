"""Two-species Gray-Scott reaction-diffusion model on a doubly periodic grid.

The state interleaves both species: node (i, j) stores u at flat index
2*(j*mx + i) and v right after it. Node coordinates are x_i = i*hx with
hx = L/mx (and likewise in y), so the grid covers [0, L) periodically.

The residual has one row per degree of freedom,

    f_u = du/dt - D1*(uxx + uyy) + u*v^2 - gamma*(1 - u)
    f_v = dv/dt - D2*(vxx + vyy) - u*v^2 + (gamma + kappa)*v

with second differences such as uxx = (-2*u_c + u_W + u_E)/hx^2. Passive
evaluation (`residual_passive`) and taped recording (`record_residual`)
perform the same elementary operations in the same order, so replaying the
tape at the recording point reproduces the passive values bitwise. Time
derivative terms enter the tape as passive constants equal to zero; time
integrators supply them through the identity part of their stage residuals.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit, prange

from . import ad_core
from .linalg import CsrMatrix

__all__ = [
    "GrayScottParams",
    "GridGeometry",
    "GrayScottModel",
    "initial_conditions",
    "residual_passive",
    "record_residual",
    "analytic_jacobian",
    "fd_jacobian",
    "n_dofs",
    "dof_index",
    "center_node",
]

_FD_THRESH = 1e-12
_FD_CAP = 16


@dataclass(frozen=True)
class GrayScottParams:
    """Physical and discretization parameters.

    The default rate constants give the mitosis-like pattern regime; they are
    deliberate choices of this package, not sourced values, and every run
    interface lets the caller override them.
    """

    mx: int
    my: int
    D1: float = 8.0e-5
    D2: float = 4.0e-5
    gamma: float = 0.024
    kappa: float = 0.06
    L: float = 2.5

    def __post_init__(self):
        if self.mx < 3 or self.my < 3:
            raise ValueError("grid must be at least 3x3 so the periodic "
                             "5-point stencil has distinct neighbors")
        if self.L <= 0:
            raise ValueError("domain length must be positive")
        for name in ("D1", "D2"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")


@dataclass(frozen=True)
class GridGeometry:
    hx: float
    hy: float
    sx: float
    sy: float

    @classmethod
    def from_params(cls, params: GrayScottParams) -> "GridGeometry":
        hx = params.L / params.mx
        hy = params.L / params.my
        return cls(hx=hx, hy=hy, sx=1.0 / (hx * hx), sy=1.0 / (hy * hy))


def n_dofs(params: GrayScottParams) -> int:
    return 2 * params.mx * params.my


def dof_index(params: GrayScottParams, i: int, j: int, species: str) -> int:
    """Flat index of one unknown. species is 'u' or 'v'."""
    if not (0 <= i < params.mx and 0 <= j < params.my):
        raise ValueError(f"node ({i}, {j}) outside {params.mx}x{params.my} "
                         "grid")
    if species not in ("u", "v"):
        raise ValueError("species must be 'u' or 'v'")
    return 2 * (j * params.mx + i) + (0 if species == "u" else 1)


def center_node(params: GrayScottParams) -> tuple[int, int]:
    """Grid node nearest the physical point (1.25, 1.25); ties resolve to
    the lower index."""
    geom = GridGeometry.from_params(params)
    xs = np.arange(params.mx) * geom.hx
    ys = np.arange(params.my) * geom.hy
    return int(np.argmin(np.abs(xs - 1.25))), int(np.argmin(np.abs(ys - 1.25)))


def initial_conditions(params: GrayScottParams) -> np.ndarray:
    """Bump of v inside [1, 1.5]^2 modulated by sin^2 waves, u = 1 - 2v."""
    geom = GridGeometry.from_params(params)
    xs = np.arange(params.mx) * geom.hx
    ys = np.arange(params.my) * geom.hy
    fx = ((xs >= 1.0) & (xs <= 1.5)) * np.sin(4.0 * np.pi * xs) ** 2
    fy = ((ys >= 1.0) & (ys <= 1.5)) * np.sin(4.0 * np.pi * ys) ** 2
    V = 0.25 * np.outer(fy, fx)
    U = 1.0 - 2.0 * V
    state = np.empty(2 * params.mx * params.my)
    state[0::2] = U.ravel()
    state[1::2] = V.ravel()
    return state


@njit(cache=True)
def _k_residual(x, xdot, mx, my, D1, D2, gamma, kappa, sx, sy, gk, out):
    for j in range(my):
        js = j - 1 if j > 0 else my - 1
        jn = j + 1 if j < my - 1 else 0
        row = j * mx
        row_s = js * mx
        row_n = jn * mx
        for i in range(mx):
            iw = i - 1 if i > 0 else mx - 1
            ie = i + 1 if i < mx - 1 else 0
            base = 2 * (row + i)
            uc = x[base]
            vc = x[base + 1]
            kw = 2 * (row + iw)
            ke = 2 * (row + ie)
            ks = 2 * (row_s + i)
            kn = 2 * (row_n + i)
            uxx = (-2.0 * uc + x[kw] + x[ke]) * sx
            uyy = (-2.0 * uc + x[ks] + x[kn]) * sy
            vxx = (-2.0 * vc + x[kw + 1] + x[ke + 1]) * sx
            vyy = (-2.0 * vc + x[ks + 1] + x[kn + 1]) * sy
            uvv = uc * vc * vc
            fu = xdot[base] - D1 * (uxx + uyy)
            fu = fu + uvv
            fu = fu - gamma * (1.0 - uc)
            fv = xdot[base + 1] - D2 * (vxx + vyy)
            fv = fv - uvv
            fv = fv + gk * vc
            out[base] = fu
            out[base + 1] = fv


def residual_passive(state: np.ndarray, state_dot, params: GrayScottParams
                     ) -> np.ndarray:
    """Residual vector at (state, state_dot). state_dot may be None for a
    steady evaluation."""
    nd = n_dofs(params)
    state = np.ascontiguousarray(state, dtype=np.float64)
    if state.shape != (nd,):
        raise ValueError(f"state must have length {nd}")
    if state_dot is None:
        state_dot = np.zeros(nd)
    else:
        state_dot = np.ascontiguousarray(state_dot, dtype=np.float64)
        if state_dot.shape != (nd,):
            raise ValueError(f"state_dot must have length {nd}")
    geom = GridGeometry.from_params(params)
    out = np.empty(nd)
    _k_residual(state, state_dot, params.mx, params.my, params.D1, params.D2,
                params.gamma, params.kappa, geom.sx, geom.sy,
                params.gamma + params.kappa, out)
    return out


def record_residual(state: np.ndarray, params: GrayScottParams,
                    tag: int = 1) -> ad_core.Tape:
    """Record the residual at state_dot = 0 onto a fresh tape.

    Independents are marked in state layout order, so tape column j is the
    derivative with respect to flat unknown j. The arithmetic mirrors
    `residual_passive` operation for operation.
    """
    nd = n_dofs(params)
    state = np.asarray(state, dtype=np.float64)
    if state.shape != (nd,):
        raise ValueError(f"state must have length {nd}")
    mx, my = params.mx, params.my
    geom = GridGeometry.from_params(params)
    sx, sy = geom.sx, geom.sy
    D1, D2 = params.D1, params.D2
    gamma = params.gamma
    gk = params.gamma + params.kappa

    session = ad_core.begin_recording(tag)
    try:
        act = [ad_core.mark_independent(session, state[k]) for k in range(nd)]
        outputs = []
        for j in range(my):
            js = j - 1 if j > 0 else my - 1
            jn = j + 1 if j < my - 1 else 0
            row = j * mx
            row_s = js * mx
            row_n = jn * mx
            for i in range(mx):
                iw = i - 1 if i > 0 else mx - 1
                ie = i + 1 if i < mx - 1 else 0
                base = 2 * (row + i)
                uc = act[base]
                vc = act[base + 1]
                kw = 2 * (row + iw)
                ke = 2 * (row + ie)
                ks = 2 * (row_s + i)
                kn = 2 * (row_n + i)
                uxx = (-2.0 * uc + act[kw] + act[ke]) * sx
                uyy = (-2.0 * uc + act[ks] + act[kn]) * sy
                vxx = (-2.0 * vc + act[kw + 1] + act[ke + 1]) * sx
                vyy = (-2.0 * vc + act[ks + 1] + act[kn + 1]) * sy
                uvv = uc * vc * vc
                fu = 0.0 - D1 * (uxx + uyy)
                fu = fu + uvv
                fu = fu - gamma * (1.0 - uc)
                fv = 0.0 - D2 * (vxx + vyy)
                fv = fv - uvv
                fv = fv + gk * vc
                outputs.append(fu)
                outputs.append(fv)
        for f in outputs:
            ad_core.mark_dependent(session, f)
        return ad_core.end_recording(session)
    except BaseException:
        ad_core.abort_recording(session)
        raise


@njit(cache=True)
def _k_analytic_fill(x, mx, my, D1, D2, gamma, kappa, sx, sy, cols, vals):
    du_c = 2.0 * D1 * (sx + sy)
    dv_c = 2.0 * D2 * (sx + sy)
    for j in range(my):
        js = j - 1 if j > 0 else my - 1
        jn = j + 1 if j < my - 1 else 0
        row = j * mx
        row_s = js * mx
        row_n = jn * mx
        for i in range(mx):
            iw = i - 1 if i > 0 else mx - 1
            ie = i + 1 if i < mx - 1 else 0
            base = 2 * (row + i)
            uc = x[base]
            vc = x[base + 1]
            kw = 2 * (row + iw)
            ke = 2 * (row + ie)
            ks = 2 * (row_s + i)
            kn = 2 * (row_n + i)
            # f_u row
            off = 6 * base
            cols[off] = base
            vals[off] = du_c + vc * vc + gamma
            cols[off + 1] = kw
            vals[off + 1] = -D1 * sx
            cols[off + 2] = ke
            vals[off + 2] = -D1 * sx
            cols[off + 3] = ks
            vals[off + 3] = -D1 * sy
            cols[off + 4] = kn
            vals[off + 4] = -D1 * sy
            cols[off + 5] = base + 1
            vals[off + 5] = 2.0 * uc * vc
            # f_v row
            off = 6 * (base + 1)
            cols[off] = base + 1
            vals[off] = dv_c - 2.0 * uc * vc + gamma + kappa
            cols[off + 1] = kw + 1
            vals[off + 1] = -D2 * sx
            cols[off + 2] = ke + 1
            vals[off + 2] = -D2 * sx
            cols[off + 3] = ks + 1
            vals[off + 3] = -D2 * sy
            cols[off + 4] = kn + 1
            vals[off + 4] = -D2 * sy
            cols[off + 5] = base
            vals[off + 5] = -vc * vc
    # sort the six entries of every row by column index
    for r in range(2 * mx * my):
        off = 6 * r
        for a in range(1, 6):
            ck = cols[off + a]
            vk = vals[off + a]
            b = a - 1
            while b >= 0 and cols[off + b] > ck:
                cols[off + b + 1] = cols[off + b]
                vals[off + b + 1] = vals[off + b]
                b -= 1
            cols[off + b + 1] = ck
            vals[off + b + 1] = vk


def analytic_jacobian(state: np.ndarray, params: GrayScottParams) -> CsrMatrix:
    """Hand-derived residual Jacobian (with respect to state, at
    state_dot = 0) in sparse row form. Every row has six entries."""
    nd = n_dofs(params)
    state = np.ascontiguousarray(state, dtype=np.float64)
    if state.shape != (nd,):
        raise ValueError(f"state must have length {nd}")
    geom = GridGeometry.from_params(params)
    cols = np.empty(6 * nd, np.int64)
    vals = np.empty(6 * nd)
    _k_analytic_fill(state, params.mx, params.my, params.D1, params.D2,
                     params.gamma, params.kappa, geom.sx, geom.sy, cols, vals)
    offsets = 6 * np.arange(nd + 1, dtype=np.int64)
    return CsrMatrix(n_rows=nd, n_cols=nd, row_offsets=offsets,
                     col_indices=cols, values=vals)


def _fd_columns_impl(x, xdot, mx, my, D1, D2, gamma, kappa, sx, sy, gk, eps,
                     rows_buf, vals_buf, counts):
    n = x.shape[0]
    for col in prange(n):
        xp = x.copy()
        outp = np.empty(n)
        outm = np.empty(n)
        xp[col] = x[col] + eps
        _k_residual(xp, xdot, mx, my, D1, D2, gamma, kappa, sx, sy, gk, outp)
        xp[col] = x[col] - eps
        _k_residual(xp, xdot, mx, my, D1, D2, gamma, kappa, sx, sy, gk, outm)
        cnt = 0
        for r in range(n):
            d = (outp[r] - outm[r]) / (2.0 * eps)
            if abs(d) > _FD_THRESH:
                if cnt < _FD_CAP:
                    rows_buf[col, cnt] = r
                    vals_buf[col, cnt] = d
                cnt += 1
        counts[col] = cnt


_k_fd_columns = njit(cache=True)(_fd_columns_impl)
_k_fd_columns_par = njit(cache=True, parallel=True)(_fd_columns_impl)


def fd_jacobian(state: np.ndarray, params: GrayScottParams, eps: float = 1e-7,
                parallel: bool = False) -> CsrMatrix:
    """Central-difference residual Jacobian, column by column.

    Each column differences two full residual evaluations; entries of
    magnitude at most 1e-12 are dropped. Derivative-free by construction,
    which makes it the reference all derivative code is checked against.
    """
    nd = n_dofs(params)
    state = np.ascontiguousarray(state, dtype=np.float64)
    if state.shape != (nd,):
        raise ValueError(f"state must have length {nd}")
    if eps <= 0:
        raise ValueError("eps must be positive")
    geom = GridGeometry.from_params(params)
    rows_buf = np.empty((nd, _FD_CAP), np.int64)
    vals_buf = np.empty((nd, _FD_CAP))
    counts = np.empty(nd, np.int64)
    kern = _k_fd_columns_par if parallel else _k_fd_columns
    kern(state, np.zeros(nd), params.mx, params.my, params.D1, params.D2,
         params.gamma, params.kappa, geom.sx, geom.sy,
         params.gamma + params.kappa, float(eps), rows_buf, vals_buf, counts)
    if np.any(counts > _FD_CAP):
        raise RuntimeError("difference stencil wider than expected; residual "
                           "coupling is not local")
    # transpose the per-column entries into row-major sparse form
    total = int(counts.sum())
    coo_cols = np.repeat(np.arange(nd), counts)
    keep = np.arange(_FD_CAP) < counts[:, None]
    coo_rows = rows_buf[keep]
    coo_vals = vals_buf[keep]
    order = np.lexsort((coo_cols, coo_rows))
    coo_rows = coo_rows[order]
    coo_cols = coo_cols[order]
    coo_vals = coo_vals[order]
    offsets = np.zeros(nd + 1, np.int64)
    np.cumsum(np.bincount(coo_rows, minlength=nd), out=offsets[1:])
    assert offsets[-1] == total
    return CsrMatrix(n_rows=nd, n_cols=nd, row_offsets=offsets,
                     col_indices=coo_cols.astype(np.int64), values=coo_vals)


class GrayScottModel:
    """Adapter bundling the model callbacks the time integrator expects."""

    def __init__(self, params: GrayScottParams):
        self.params = params
        self.geometry = GridGeometry.from_params(params)
        self._tape = None

    @property
    def n_dofs(self) -> int:
        return n_dofs(self.params)

    def initial_state(self) -> np.ndarray:
        return initial_conditions(self.params)

    def residual(self, state, state_dot=None) -> np.ndarray:
        return residual_passive(state, state_dot, self.params)

    def rhs(self, state) -> np.ndarray:
        """Explicit right-hand side f(u) = -F(u, 0)."""
        return -residual_passive(state, None, self.params)

    def record_tape(self, state, tag: int = 1) -> ad_core.Tape:
        # the residual has no branches, so the recorded structure is the
        # same at every state; record once and replay everywhere
        if self._tape is None:
            self._tape = record_residual(state, self.params, tag)
        return self._tape

    def analytic_jacobian(self, state) -> CsrMatrix:
        return analytic_jacobian(state, self.params)

    def fd_jacobian(self, state, eps: float = 1e-7,
                    parallel: bool = False) -> CsrMatrix:
        return fd_jacobian(state, self.params, eps, parallel)
