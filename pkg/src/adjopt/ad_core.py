"""Tape-based algorithmic differentiation by operator overloading.

A computation is recorded once inside a recording session: scalars of type
:class:`ActiveScalar` carry a value and a slot id, and every arithmetic
operation on them appends one record to the session. Ending the session
freezes the records into an immutable :class:`Tape`. The tape can then be

* replayed at new inputs (``replay_primal``),
* propagated forward with a seed matrix to obtain Jacobian-times-seed
  products (``forward_propagate``),
* propagated in reverse with a weight matrix to obtain transposed products
  (``reverse_propagate``),
* scanned structurally for the Jacobian sparsity pattern
  (``extract_sparsity``).

Slots are assigned in SSA style: independents occupy slots
``0 .. n_independent - 1`` in marking order, and the k-th record defines slot
``n_independent + k``. Dependents are marked slots; marking order defines the
output row order, and marking the same slot twice yields duplicated rows.

The propagation sweeps are executed by compiled kernels. Each tape lazily
builds an execution plan that maps logical slots onto a small pool of scratch
registers (a linear-scan allocation over slot live ranges), so the per-slot
derivative rows needed at any moment fit in cache even when the tape has
hundreds of thousands of records. Forward plans copy dependent rows out as
soon as they are produced; reverse plans pin dependent slots so their adjoint
accumulators survive the whole backward sweep. Propagations over many seed
columns are processed in column chunks, and ``parallel=True`` dispatches the
chunks concurrently (results are identical either way, chunks are
independent).

One session may record at a time per process. Sweeps over a finished tape are
reentrant; scratch storage is owned by each call.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, NamedTuple, Optional, Union

import numpy as np
from numba import njit, prange

__all__ = [
    "ActiveScalar",
    "OpRecord",
    "RecordingError",
    "RecordingSession",
    "SeedMatrix",
    "Tape",
    "begin_recording",
    "mark_independent",
    "mark_dependent",
    "end_recording",
    "abort_recording",
    "replay_primal",
    "forward_propagate",
    "reverse_propagate",
    "extract_sparsity",
    "dump_tape",
    "sin",
    "cos",
    "exp",
    "log",
]

OP_ADD = 0
OP_SUB = 1
OP_MUL = 2
OP_DIV = 3
OP_NEG = 4
OP_ADDC = 5
OP_MULC = 6
OP_POWC = 7
OP_SIN = 8
OP_COS = 9
OP_EXP = 10
OP_LN = 11

OPCODE_NAMES = (
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "add-const",
    "mul-const",
    "pow-const",
    "sin",
    "cos",
    "exp",
    "ln",
)

_BINARY_OPS = frozenset((OP_ADD, OP_SUB, OP_MUL, OP_DIV))

_COLUMN_CHUNK = 512


class RecordingError(RuntimeError):
    """Raised on misuse of the recording machinery."""


_active_session: Optional["RecordingSession"] = None


class RecordingSession:
    """Mutable state of one in-progress tape recording."""

    __slots__ = ("tag", "_op", "_a", "_b", "_c", "_n_slots", "_n_independent",
                 "_dependents", "_closed")

    def __init__(self, tag: int):
        self.tag = tag
        self._op: list[int] = []
        self._a: list[int] = []
        self._b: list[int] = []
        self._c: list[float] = []
        self._n_slots = 0
        self._n_independent = 0
        self._dependents: list[int] = []
        self._closed = False

    @property
    def n_records(self) -> int:
        return len(self._op)

    def _check_open(self) -> None:
        if self._closed:
            raise RecordingError("recording session is already closed")

    def _push(self, op: int, a: int, b: int, const: float,
              value: float) -> "ActiveScalar":
        self._op.append(op)
        self._a.append(a)
        self._b.append(b)
        self._c.append(const)
        slot = self._n_slots
        self._n_slots += 1
        return ActiveScalar(value, slot, self)


def _check_operands(x: "ActiveScalar", y: "ActiveScalar") -> RecordingSession:
    s = x._session
    if y._session is not s:
        raise RecordingError(
            "cannot combine active values from different recording sessions")
    s._check_open()
    return s


class ActiveScalar:
    """Scalar participating in a recording. Supports +, -, *, /, ** by a
    constant, and the transcendental helpers in this module."""

    __slots__ = ("value", "slot", "_session")

    def __init__(self, value: float, slot: int, session: RecordingSession):
        self.value = value
        self.slot = slot
        self._session = session

    def __repr__(self) -> str:
        return f"ActiveScalar(value={self.value!r}, slot={self.slot})"

    def __add__(self, other):
        if isinstance(other, ActiveScalar):
            s = _check_operands(self, other)
            return s._push(OP_ADD, self.slot, other.slot, 0.0,
                           self.value + other.value)
        s = self._session
        s._check_open()
        c = float(other)
        return s._push(OP_ADDC, self.slot, -1, c, self.value + c)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, ActiveScalar):
            s = _check_operands(self, other)
            return s._push(OP_SUB, self.slot, other.slot, 0.0,
                           self.value - other.value)
        s = self._session
        s._check_open()
        c = float(other)
        return s._push(OP_ADDC, self.slot, -1, -c, self.value - c)

    def __rsub__(self, other):
        s = self._session
        s._check_open()
        c = float(other)
        t = s._push(OP_NEG, self.slot, -1, 0.0, -self.value)
        return s._push(OP_ADDC, t.slot, -1, c, c - self.value)

    def __mul__(self, other):
        if isinstance(other, ActiveScalar):
            s = _check_operands(self, other)
            return s._push(OP_MUL, self.slot, other.slot, 0.0,
                           self.value * other.value)
        s = self._session
        s._check_open()
        c = float(other)
        return s._push(OP_MULC, self.slot, -1, c, self.value * c)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, ActiveScalar):
            s = _check_operands(self, other)
            return s._push(OP_DIV, self.slot, other.slot, 0.0,
                           self.value / other.value)
        # division by a constant is recorded as multiplication by its
        # reciprocal; the stored value matches what replay computes
        s = self._session
        s._check_open()
        r = 1.0 / float(other)
        return s._push(OP_MULC, self.slot, -1, r, self.value * r)

    def __rtruediv__(self, other):
        s = self._session
        s._check_open()
        c = float(other)
        t = s._push(OP_POWC, self.slot, -1, -1.0, self.value ** -1.0)
        return s._push(OP_MULC, t.slot, -1, c, t.value * c)

    def __neg__(self):
        s = self._session
        s._check_open()
        return s._push(OP_NEG, self.slot, -1, 0.0, -self.value)

    def __pow__(self, exponent):
        if isinstance(exponent, ActiveScalar):
            raise TypeError("exponent must be a passive constant")
        s = self._session
        s._check_open()
        c = float(exponent)
        return s._push(OP_POWC, self.slot, -1, c, self.value ** c)


def _unary(x: ActiveScalar, op: int, value: float) -> ActiveScalar:
    s = x._session
    s._check_open()
    return s._push(op, x.slot, -1, 0.0, value)


def sin(x: ActiveScalar) -> ActiveScalar:
    return _unary(x, OP_SIN, math.sin(x.value))


def cos(x: ActiveScalar) -> ActiveScalar:
    return _unary(x, OP_COS, math.cos(x.value))


def exp(x: ActiveScalar) -> ActiveScalar:
    return _unary(x, OP_EXP, math.exp(x.value))


def log(x: ActiveScalar) -> ActiveScalar:
    return _unary(x, OP_LN, math.log(x.value))


def begin_recording(tag: int) -> RecordingSession:
    """Open a recording session. Only one may be active per process."""
    global _active_session
    if _active_session is not None:
        raise RecordingError("another recording session is already active")
    session = RecordingSession(int(tag))
    _active_session = session
    return session


def mark_independent(session: RecordingSession, value: float) -> ActiveScalar:
    """Register one input of the recorded function and return its active
    scalar. All independents must be marked before any arithmetic so that
    they occupy the leading slots in marking order."""
    session._check_open()
    if session.n_records:
        raise RecordingError(
            "independents must be marked before any arithmetic is recorded")
    slot = session._n_slots
    session._n_slots += 1
    session._n_independent += 1
    return ActiveScalar(float(value), slot, session)


def mark_dependent(session: RecordingSession, x: ActiveScalar) -> int:
    """Mark a slot as an output row; returns the row index. The same slot may
    be marked more than once (the row is duplicated)."""
    session._check_open()
    if x._session is not session:
        raise RecordingError("scalar does not belong to this session")
    row = len(session._dependents)
    session._dependents.append(x.slot)
    return row


def end_recording(session: RecordingSession) -> "Tape":
    """Close the session and freeze its records into an immutable tape."""
    global _active_session
    session._check_open()
    session._closed = True
    if _active_session is session:
        _active_session = None
    return Tape(
        opcode=np.asarray(session._op, dtype=np.int8),
        arg_a=np.asarray(session._a, dtype=np.int64),
        arg_b=np.asarray(session._b, dtype=np.int64),
        const=np.asarray(session._c, dtype=np.float64),
        n_independent=session._n_independent,
        dependents=np.asarray(session._dependents, dtype=np.int64),
        tag=session.tag,
    )


def abort_recording(session: RecordingSession) -> None:
    """Discard an open session (releases the process-wide recording guard)."""
    global _active_session
    session._closed = True
    if _active_session is session:
        _active_session = None


class OpRecord(NamedTuple):
    index: int
    opcode: str
    result: int
    arg_a: int
    arg_b: int
    const: float


@dataclass(frozen=True)
class SeedMatrix:
    """0/1 seed matrix with one row per independent. ``entries is None``
    stands for the n-by-n identity without materializing it."""

    n: int
    p: int
    entries: Optional[np.ndarray]

    @classmethod
    def identity(cls, n: int) -> "SeedMatrix":
        return cls(n=n, p=n, entries=None)

    @classmethod
    def from_dense(cls, entries: np.ndarray) -> "SeedMatrix":
        entries = np.ascontiguousarray(entries, dtype=np.float64)
        if entries.ndim != 2:
            raise ValueError("seed matrix must be two dimensional")
        return cls(n=entries.shape[0], p=entries.shape[1], entries=entries)

    @property
    def is_identity(self) -> bool:
        return self.entries is None


class _ForwardPlan(NamedTuple):
    is_binary: np.ndarray
    a_enc: np.ndarray
    b_enc: np.ndarray
    res_reg: np.ndarray
    out_ptr: np.ndarray
    out_rows: np.ndarray
    passthrough: tuple[tuple[int, int], ...]
    n_scratch: int


class _ReversePlan(NamedTuple):
    is_binary: np.ndarray
    a_enc: np.ndarray
    b_enc: np.ndarray
    res_reg: np.ndarray
    dep_enc: np.ndarray
    n_scratch: int


class Tape:
    """Immutable record of one traced function evaluation."""

    def __init__(self, opcode: np.ndarray, arg_a: np.ndarray,
                 arg_b: np.ndarray, const: np.ndarray, n_independent: int,
                 dependents: np.ndarray, tag: int):
        for arr in (opcode, arg_a, arg_b, const, dependents):
            arr.setflags(write=False)
        self.opcode = opcode
        self.arg_a = arg_a
        self.arg_b = arg_b
        self.const = const
        self.n_independent = int(n_independent)
        self.dependents = dependents
        self.tag = int(tag)
        self._last_values: Optional[np.ndarray] = None
        self._fwd_plan: Optional[_ForwardPlan] = None
        self._rev_plan: Optional[_ReversePlan] = None

    @property
    def n_records(self) -> int:
        return len(self.opcode)

    @property
    def n_slots(self) -> int:
        return self.n_independent + self.n_records

    @property
    def n_dependent(self) -> int:
        return len(self.dependents)

    def records(self) -> Iterator[OpRecord]:
        n = self.n_independent
        for k in range(self.n_records):
            yield OpRecord(k, OPCODE_NAMES[self.opcode[k]], n + k,
                           int(self.arg_a[k]), int(self.arg_b[k]),
                           float(self.const[k]))

    def __repr__(self) -> str:
        return (f"Tape(tag={self.tag}, n_independent={self.n_independent}, "
                f"n_records={self.n_records}, "
                f"n_dependent={self.n_dependent})")

    # ---- execution plans -------------------------------------------------

    def _is_binary(self) -> np.ndarray:
        return np.isin(self.opcode, (OP_ADD, OP_SUB, OP_MUL, OP_DIV)) \
            .astype(np.uint8)

    def _forward_plan_cached(self) -> _ForwardPlan:
        if self._fwd_plan is None:
            self._fwd_plan = _build_forward_plan(self)
        return self._fwd_plan

    def _reverse_plan_cached(self) -> _ReversePlan:
        if self._rev_plan is None:
            self._rev_plan = _build_reverse_plan(self)
        return self._rev_plan


def dump_tape(tape: Tape) -> str:
    """Readable listing of a tape, one record per line."""
    lines = [f"tape tag={tape.tag} independents={tape.n_independent} "
             f"records={tape.n_records}"]
    for rec in tape.records():
        if tape.opcode[rec.index] in _BINARY_OPS:
            args = f"({rec.arg_a}, {rec.arg_b})"
        else:
            args = f"({rec.arg_a})"
        if tape.opcode[rec.index] in (OP_ADDC, OP_MULC, OP_POWC):
            lines.append(f"{rec.result} := {rec.opcode}{args} [{rec.const!r}]")
        else:
            lines.append(f"{rec.result} := {rec.opcode}{args}")
    lines.append("dependents " + " ".join(str(d) for d in tape.dependents))
    return "\n".join(lines)


# ---- compiled kernels ----------------------------------------------------


@njit(cache=True)
def _k_values_partials(opcode, arg_a, arg_b, const, x, n_ind, vals, pa, pb):
    for i in range(n_ind):
        vals[i] = x[i]
    for k in range(len(opcode)):
        op = opcode[k]
        va = vals[arg_a[k]]
        v = 0.0
        p1 = 0.0
        p2 = 0.0
        if op == OP_ADD:
            v = va + vals[arg_b[k]]
            p1 = 1.0
            p2 = 1.0
        elif op == OP_SUB:
            v = va - vals[arg_b[k]]
            p1 = 1.0
            p2 = -1.0
        elif op == OP_MUL:
            vb = vals[arg_b[k]]
            v = va * vb
            p1 = vb
            p2 = va
        elif op == OP_DIV:
            vb = vals[arg_b[k]]
            if vb == 0.0:
                return k
            v = va / vb
            p1 = 1.0 / vb
            p2 = -v / vb
        elif op == OP_NEG:
            v = -va
            p1 = -1.0
        elif op == OP_ADDC:
            v = va + const[k]
            p1 = 1.0
        elif op == OP_MULC:
            v = va * const[k]
            p1 = const[k]
        elif op == OP_POWC:
            c = const[k]
            v = va ** c
            p1 = c * va ** (c - 1.0)
        elif op == OP_SIN:
            v = np.sin(va)
            p1 = np.cos(va)
        elif op == OP_COS:
            v = np.cos(va)
            p1 = -np.sin(va)
        elif op == OP_EXP:
            v = np.exp(va)
            p1 = v
        else:
            v = np.log(va)
            p1 = 1.0 / va
        vals[n_ind + k] = v
        pa[k] = p1
        pb[k] = p2
    return -1


@njit(cache=True)
def _k_allocate(arg_a, arg_b, n_slots, n_ind, pinned, inplace):
    """Linear-scan register allocation over slot live ranges.

    Returns (reg, n_regs) where reg[slot] is the scratch register of each
    non-independent slot (-1 for independents). With inplace=True a record's
    result may reuse a register freed by its own dying argument; reverse
    sweeps need inplace=False so argument and result accumulators stay
    distinct within one record.
    """
    nrec = len(arg_a)
    last = np.full(n_slots, -2, np.int64)
    for k in range(nrec):
        if arg_a[k] >= 0:
            last[arg_a[k]] = k
        if arg_b[k] >= 0:
            last[arg_b[k]] = k
    for s in range(n_slots):
        if pinned[s]:
            last[s] = nrec
    reg = np.full(n_slots, -1, np.int64)
    free = np.empty(n_slots, np.int64)
    nfree = 0
    nregs = 0
    for k in range(nrec):
        a = arg_a[k]
        b = arg_b[k]
        s = n_ind + k
        if inplace:
            if a >= n_ind and last[a] == k:
                free[nfree] = reg[a]
                nfree += 1
            if b >= n_ind and b != a and last[b] == k:
                free[nfree] = reg[b]
                nfree += 1
        if nfree > 0:
            nfree -= 1
            r = free[nfree]
        else:
            r = nregs
            nregs += 1
        reg[s] = r
        if not inplace:
            if a >= n_ind and last[a] == k:
                free[nfree] = reg[a]
                nfree += 1
            if b >= n_ind and b != a and last[b] == k:
                free[nfree] = reg[b]
                nfree += 1
        if last[s] < k:
            free[nfree] = r
            nfree += 1
    return reg, nregs


def _forward_lanes_impl(is_bin, a_enc, b_enc, pa, pb, res_reg, out_ptr,
                        out_rows, seed, identity, n_scratch, Y, chunk):
    p = Y.shape[1]
    nrec = len(is_bin)
    nchunks = (p + chunk - 1) // chunk
    for ci in prange(nchunks):
        c0 = ci * chunk
        w = min(chunk, p - c0)
        SC = np.empty((max(n_scratch, 1), w))
        for k in range(nrec):
            rr = res_reg[k]
            ae = a_enc[k]
            f1 = pa[k]
            if is_bin[k]:
                be = b_enc[k]
                f2 = pb[k]
                if ae >= 0 and be >= 0:
                    if identity:
                        for l in range(w):
                            SC[rr, l] = 0.0
                        ia = ae - c0
                        if 0 <= ia < w:
                            SC[rr, ia] += f1
                        ib = be - c0
                        if 0 <= ib < w:
                            SC[rr, ib] += f2
                    else:
                        for l in range(w):
                            SC[rr, l] = f1 * seed[ae, c0 + l] \
                                + f2 * seed[be, c0 + l]
                elif ae >= 0:
                    rb = -be - 1
                    if identity:
                        for l in range(w):
                            SC[rr, l] = f2 * SC[rb, l]
                        ia = ae - c0
                        if 0 <= ia < w:
                            SC[rr, ia] += f1
                    else:
                        for l in range(w):
                            SC[rr, l] = f1 * seed[ae, c0 + l] + f2 * SC[rb, l]
                elif be >= 0:
                    ra = -ae - 1
                    if identity:
                        for l in range(w):
                            SC[rr, l] = f1 * SC[ra, l]
                        ib = be - c0
                        if 0 <= ib < w:
                            SC[rr, ib] += f2
                    else:
                        for l in range(w):
                            SC[rr, l] = f1 * SC[ra, l] + f2 * seed[be, c0 + l]
                else:
                    ra = -ae - 1
                    rb = -be - 1
                    for l in range(w):
                        SC[rr, l] = f1 * SC[ra, l] + f2 * SC[rb, l]
            else:
                if ae >= 0:
                    if identity:
                        for l in range(w):
                            SC[rr, l] = 0.0
                        ia = ae - c0
                        if 0 <= ia < w:
                            SC[rr, ia] = f1
                    else:
                        for l in range(w):
                            SC[rr, l] = f1 * seed[ae, c0 + l]
                else:
                    ra = -ae - 1
                    for l in range(w):
                        SC[rr, l] = f1 * SC[ra, l]
            for t in range(out_ptr[k], out_ptr[k + 1]):
                orow = out_rows[t]
                for l in range(w):
                    Y[orow, c0 + l] = SC[rr, l]


_k_forward_lanes = njit(cache=True)(_forward_lanes_impl)
_k_forward_lanes_par = njit(cache=True, parallel=True)(_forward_lanes_impl)


@njit(cache=True)
def _k_forward_fused16(opcode, arg_a, arg_b, const, x, n_ind, a_enc, b_enc,
                       res_reg, out_ptr, out_rows, seed16, identity,
                       n_scratch, vals, Y, p):
    """Single-pass forward sweep for at most 16 seed columns.

    Values, local partials, and all lanes advance together record by
    record, so the tape is traversed once instead of twice and the partials
    never touch memory. Lane loops run at a fixed width of 16; columns past
    p are padding that never leaves the scratch block. Returns the failing
    record on division by zero, else -1.
    """
    for i in range(n_ind):
        vals[i] = x[i]
    SC = np.empty((max(n_scratch, 1), 16))
    for k in range(len(opcode)):
        op = opcode[k]
        va = vals[arg_a[k]]
        v = 0.0
        f1 = 0.0
        f2 = 0.0
        binary = False
        if op == OP_ADD:
            v = va + vals[arg_b[k]]
            f1 = 1.0
            f2 = 1.0
            binary = True
        elif op == OP_SUB:
            v = va - vals[arg_b[k]]
            f1 = 1.0
            f2 = -1.0
            binary = True
        elif op == OP_MUL:
            vb = vals[arg_b[k]]
            v = va * vb
            f1 = vb
            f2 = va
            binary = True
        elif op == OP_DIV:
            vb = vals[arg_b[k]]
            if vb == 0.0:
                return k
            v = va / vb
            f1 = 1.0 / vb
            f2 = -v / vb
            binary = True
        elif op == OP_NEG:
            v = -va
            f1 = -1.0
        elif op == OP_ADDC:
            v = va + const[k]
            f1 = 1.0
        elif op == OP_MULC:
            v = va * const[k]
            f1 = const[k]
        elif op == OP_POWC:
            c = const[k]
            v = va ** c
            f1 = c * va ** (c - 1.0)
        elif op == OP_SIN:
            v = np.sin(va)
            f1 = np.cos(va)
        elif op == OP_COS:
            v = np.cos(va)
            f1 = -np.sin(va)
        elif op == OP_EXP:
            v = np.exp(va)
            f1 = v
        else:
            v = np.log(va)
            f1 = 1.0 / va
        vals[n_ind + k] = v
        rr = res_reg[k]
        ae = a_enc[k]
        if binary:
            be = b_enc[k]
            if ae >= 0 and be >= 0:
                if identity:
                    for l in range(16):
                        SC[rr, l] = 0.0
                    SC[rr, ae] += f1
                    SC[rr, be] += f2
                else:
                    for l in range(16):
                        SC[rr, l] = f1 * seed16[ae, l] + f2 * seed16[be, l]
            elif ae >= 0:
                rb = -be - 1
                if identity:
                    for l in range(16):
                        SC[rr, l] = f2 * SC[rb, l]
                    SC[rr, ae] += f1
                else:
                    for l in range(16):
                        SC[rr, l] = f1 * seed16[ae, l] + f2 * SC[rb, l]
            elif be >= 0:
                ra = -ae - 1
                if identity:
                    for l in range(16):
                        SC[rr, l] = f1 * SC[ra, l]
                    SC[rr, be] += f2
                else:
                    for l in range(16):
                        SC[rr, l] = f1 * SC[ra, l] + f2 * seed16[be, l]
            else:
                ra = -ae - 1
                rb = -be - 1
                for l in range(16):
                    SC[rr, l] = f1 * SC[ra, l] + f2 * SC[rb, l]
        else:
            if ae >= 0:
                if identity:
                    for l in range(16):
                        SC[rr, l] = 0.0
                    SC[rr, ae] = f1
                else:
                    for l in range(16):
                        SC[rr, l] = f1 * seed16[ae, l]
            else:
                ra = -ae - 1
                for l in range(16):
                    SC[rr, l] = f1 * SC[ra, l]
        for t in range(out_ptr[k], out_ptr[k + 1]):
            orow = out_rows[t]
            for l in range(p):
                Y[orow, l] = SC[rr, l]
    return -1


def _reverse_lanes_impl(is_bin, a_enc, b_enc, pa, pb, res_reg, dep_enc,
                        weights, xbar, n_scratch, chunk):
    m, q = weights.shape
    nrec = len(is_bin)
    nchunks = (q + chunk - 1) // chunk
    for ci in prange(nchunks):
        c0 = ci * chunk
        w = min(chunk, q - c0)
        SC = np.zeros((max(n_scratch, 1), w))
        for r in range(m):
            de = dep_enc[r]
            if de >= 0:
                for l in range(w):
                    xbar[de, c0 + l] += weights[r, c0 + l]
            else:
                rd = -de - 1
                for l in range(w):
                    SC[rd, l] += weights[r, c0 + l]
        for k in range(nrec - 1, -1, -1):
            rr = res_reg[k]
            ae = a_enc[k]
            f1 = pa[k]
            if ae >= 0:
                for l in range(w):
                    xbar[ae, c0 + l] += f1 * SC[rr, l]
            else:
                ra = -ae - 1
                for l in range(w):
                    SC[ra, l] += f1 * SC[rr, l]
            if is_bin[k]:
                be = b_enc[k]
                f2 = pb[k]
                if be >= 0:
                    for l in range(w):
                        xbar[be, c0 + l] += f2 * SC[rr, l]
                else:
                    rb = -be - 1
                    for l in range(w):
                        SC[rb, l] += f2 * SC[rr, l]
            for l in range(w):
                SC[rr, l] = 0.0


_k_reverse_lanes = njit(cache=True)(_reverse_lanes_impl)
_k_reverse_lanes_par = njit(cache=True, parallel=True)(_reverse_lanes_impl)


# ---- plan construction ---------------------------------------------------


def _encode_args(tape: Tape, reg: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n = tape.n_independent
    a = tape.arg_a
    b = tape.arg_b
    a_enc = np.where(a < n, a, -(reg[np.clip(a, 0, None)] + 1))
    b_enc = np.where(b < 0, 0, np.where(b < n, b,
                                        -(reg[np.clip(b, 0, None)] + 1)))
    return a_enc.astype(np.int64), b_enc.astype(np.int64)


def _build_forward_plan(tape: Tape) -> _ForwardPlan:
    n = tape.n_independent
    nrec = tape.n_records
    pinned = np.zeros(tape.n_slots, np.uint8)
    reg, n_scratch = _k_allocate(tape.arg_a, tape.arg_b, tape.n_slots, n,
                                 pinned, True)
    a_enc, b_enc = _encode_args(tape, reg)
    deps = tape.dependents
    mask = deps >= n
    rec_ids = (deps[mask] - n).astype(np.int64)
    order = np.argsort(rec_ids, kind="stable")
    out_rows = np.flatnonzero(mask)[order].astype(np.int64)
    counts = np.bincount(rec_ids, minlength=nrec)
    out_ptr = np.zeros(nrec + 1, np.int64)
    np.cumsum(counts, out=out_ptr[1:])
    passthrough = tuple((int(r), int(d)) for r, d in enumerate(deps) if d < n)
    res_reg = reg[n:].astype(np.int64) if nrec else np.zeros(0, np.int64)
    return _ForwardPlan(tape._is_binary(), a_enc, b_enc, res_reg, out_ptr,
                        out_rows, passthrough, int(n_scratch))


def _build_reverse_plan(tape: Tape) -> _ReversePlan:
    n = tape.n_independent
    nrec = tape.n_records
    pinned = np.zeros(tape.n_slots, np.uint8)
    for d in tape.dependents:
        if d >= n:
            pinned[d] = 1
    reg, n_scratch = _k_allocate(tape.arg_a, tape.arg_b, tape.n_slots, n,
                                 pinned, False)
    a_enc, b_enc = _encode_args(tape, reg)
    dep_enc = np.where(tape.dependents < n, tape.dependents,
                       -(reg[np.clip(tape.dependents, 0, None)] + 1))
    res_reg = reg[n:].astype(np.int64) if nrec else np.zeros(0, np.int64)
    return _ReversePlan(tape._is_binary(), a_enc, b_enc, res_reg,
                        dep_enc.astype(np.int64), int(n_scratch))


# ---- public sweeps -------------------------------------------------------


def _values_and_partials(tape: Tape, x: np.ndarray):
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.shape != (tape.n_independent,):
        raise ValueError(
            f"expected {tape.n_independent} input values, got {x.shape}")
    vals = np.empty(tape.n_slots)
    pa = np.empty(tape.n_records)
    pb = np.empty(tape.n_records)
    bad = _k_values_partials(tape.opcode, tape.arg_a, tape.arg_b, tape.const,
                             x, tape.n_independent, vals, pa, pb)
    if bad >= 0:
        raise ZeroDivisionError(
            f"division by zero while evaluating tape record {bad}")
    return vals, pa, pb


def replay_primal(tape: Tape, x: np.ndarray) -> np.ndarray:
    """Evaluate the recorded function at new inputs x."""
    vals, _, _ = _values_and_partials(tape, x)
    tape._last_values = vals
    return vals[tape.dependents].copy()


def _as_seed(tape: Tape, seed) -> tuple[Optional[np.ndarray], int, bool]:
    """Normalize a seed argument to (entries, p, was_1d)."""
    if isinstance(seed, SeedMatrix):
        if seed.n != tape.n_independent:
            raise ValueError("seed row count does not match independents")
        return seed.entries, seed.p, False
    arr = np.asarray(seed, dtype=np.float64)
    if arr.ndim == 1:
        if arr.shape[0] != tape.n_independent:
            raise ValueError("seed length does not match independents")
        return np.ascontiguousarray(arr[:, None]), 1, True
    if arr.ndim != 2 or arr.shape[0] != tape.n_independent:
        raise ValueError("seed must have one row per independent")
    return np.ascontiguousarray(arr), arr.shape[1], False


def forward_propagate(tape: Tape, x: np.ndarray, seed,
                      parallel: bool = False,
                      out: Optional[np.ndarray] = None):
    """Tangent sweep: returns (y, Y) with y = F(x) and Y = J(x) @ seed.

    ``seed`` may be a SeedMatrix, a matrix with one row per independent, or a
    single vector (then Y is returned as a vector as well). ``out`` may hold
    a preallocated (n_dependent, p) float64 buffer to receive Y; repeated
    dense propagations can then reuse one block of memory.
    """
    entries, p, was_1d = _as_seed(tape, seed)
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.shape != (tape.n_independent,):
        raise ValueError(
            f"expected {tape.n_independent} input values, got {x.shape}")
    plan = tape._forward_plan_cached()
    m = tape.n_dependent
    if out is None:
        Y = np.empty((m, p))
    else:
        if out.shape != (m, p) or out.dtype != np.float64 \
                or not out.flags.c_contiguous:
            raise ValueError("out must be a C-contiguous float64 array of "
                             f"shape {(m, p)}")
        Y = out
    identity = entries is None
    if identity:
        entries_arr = np.zeros((1, 1))
    else:
        entries_arr = np.ascontiguousarray(entries, dtype=np.float64)
    for row, slot in plan.passthrough:
        if identity:
            Y[row, :] = 0.0
            Y[row, slot] = 1.0
        else:
            Y[row, :] = entries_arr[slot, :]
    if p <= 16 and not parallel:
        # entries are fixed after construction, so the padded form can be
        # cached on the SeedMatrix; raw array seeds may be mutated by the
        # caller and get padded fresh each call
        seed16 = getattr(seed, "_padded16", None) \
            if isinstance(seed, SeedMatrix) else None
        if seed16 is None:
            seed16 = np.zeros((tape.n_independent, 16))
            if not identity:
                seed16[:, :p] = entries_arr
            if isinstance(seed, SeedMatrix):
                object.__setattr__(seed, "_padded16", seed16)
        vals = np.empty(tape.n_slots)
        bad = _k_forward_fused16(
            tape.opcode, tape.arg_a, tape.arg_b, tape.const, x,
            tape.n_independent, plan.a_enc, plan.b_enc, plan.res_reg,
            plan.out_ptr, plan.out_rows, seed16, identity, plan.n_scratch,
            vals, Y, p)
        if bad >= 0:
            raise ZeroDivisionError(
                f"division by zero while evaluating tape record {bad}")
    else:
        vals, pa, pb = _values_and_partials(tape, x)
        kern = _k_forward_lanes_par if parallel else _k_forward_lanes
        kern(plan.is_binary, plan.a_enc, plan.b_enc, pa, pb, plan.res_reg,
             plan.out_ptr, plan.out_rows, entries_arr, identity,
             plan.n_scratch, Y, _COLUMN_CHUNK)
    y = vals[tape.dependents].copy()
    if was_1d:
        return y, Y[:, 0].copy()
    return y, Y


def reverse_propagate(tape: Tape, x: np.ndarray, weights,
                      parallel: bool = False) -> np.ndarray:
    """Adjoint sweep: returns J(x)^T @ weights.

    ``weights`` has one row per dependent (or is a single vector). A primal
    sweep at x runs internally to supply the local partials.
    """
    arr = np.asarray(weights, dtype=np.float64)
    was_1d = arr.ndim == 1
    if was_1d:
        arr = arr[:, None]
    if arr.ndim != 2 or arr.shape[0] != tape.n_dependent:
        raise ValueError("weights must have one row per dependent")
    arr = np.ascontiguousarray(arr)
    vals, pa, pb = _values_and_partials(tape, x)
    plan = tape._reverse_plan_cached()
    xbar = np.zeros((tape.n_independent, arr.shape[1]))
    kern = _k_reverse_lanes_par if parallel else _k_reverse_lanes
    kern(plan.is_binary, plan.a_enc, plan.b_enc, pa, pb, plan.res_reg,
         plan.dep_enc, arr, xbar, plan.n_scratch, _COLUMN_CHUNK)
    if was_1d:
        return xbar[:, 0].copy()
    return xbar


@njit(cache=True)
def _k_index_sets(opcode, arg_a, arg_b, is_binary, n_ind, buf):
    """Propagate sorted independent-index sets through the records.

    Each slot's set is a (offset, length) slice of ``buf``. Unary results
    alias their argument's slice; binary results append a two-pointer merge.
    Returns -1 as the fill position when ``buf`` is too small.
    """
    n_slots = n_ind + opcode.size
    offs = np.empty(n_slots, np.int64)
    lens = np.empty(n_slots, np.int64)
    if n_ind > buf.size:
        return offs, lens, -1
    for i in range(n_ind):
        buf[i] = i
        offs[i] = i
        lens[i] = 1
    pos = n_ind
    for k in range(opcode.size):
        slot = n_ind + k
        a = arg_a[k]
        if not is_binary[opcode[k]]:
            offs[slot] = offs[a]
            lens[slot] = lens[a]
            continue
        b = arg_b[k]
        if offs[a] == offs[b] and lens[a] == lens[b]:
            offs[slot] = offs[a]
            lens[slot] = lens[a]
            continue
        ia = offs[a]
        ea = ia + lens[a]
        ib = offs[b]
        eb = ib + lens[b]
        start = pos
        while ia < ea or ib < eb:
            if pos >= buf.size:
                return offs, lens, -1
            if ib >= eb:
                buf[pos] = buf[ia]
                ia += 1
            elif ia >= ea:
                buf[pos] = buf[ib]
                ib += 1
            else:
                va = buf[ia]
                vb = buf[ib]
                if va < vb:
                    buf[pos] = va
                    ia += 1
                elif vb < va:
                    buf[pos] = vb
                    ib += 1
                else:
                    buf[pos] = va
                    ia += 1
                    ib += 1
            pos += 1
        offs[slot] = start
        lens[slot] = pos - start
    return offs, lens, pos


_IS_BINARY = np.zeros(len(OPCODE_NAMES), np.uint8)
for _op in _BINARY_OPS:
    _IS_BINARY[_op] = 1


def extract_sparsity(tape: Tape):
    """Structural Jacobian sparsity of the taped function.

    Index sets are propagated through the records, so the result is a
    superset of the numerical nonzeros at any particular input and does not
    depend on the recording point values.
    """
    from .sparse_color import SparsityPattern

    n = tape.n_independent
    cap = max(4 * (n + tape.n_records), 1024)
    while True:
        buf = np.empty(cap, np.int64)
        offs, lens, fill = _k_index_sets(tape.opcode, tape.arg_a,
                                         tape.arg_b, _IS_BINARY, n, buf)
        if fill >= 0:
            break
        cap *= 4
    rows = [buf[offs[d]:offs[d] + lens[d]].copy() for d in tape.dependents]
    return SparsityPattern(n_rows=tape.n_dependent, n_cols=n, rows=rows)
