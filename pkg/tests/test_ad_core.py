"""Tape recording, replay, and derivative propagation."""

import math

import numpy as np
import pytest

from adjopt import ad_core
from adjopt.ad_core import (RecordingError, SeedMatrix, abort_recording,
                            begin_recording, dump_tape, end_recording,
                            extract_sparsity, forward_propagate,
                            mark_dependent, mark_independent, replay_primal,
                            reverse_propagate)


def record_sample(a=0.7, b=1.3):
    # f(a, b) = sin(a) * b + a / b
    s = begin_recording(1)
    xa = mark_independent(s, a)
    xb = mark_independent(s, b)
    mark_dependent(s, ad_core.sin(xa) * xb + xa / xb)
    return end_recording(s)


def sample_value(a, b):
    return math.sin(a) * b + a / b


def sample_grad(a, b):
    return np.array([math.cos(a) * b + 1.0 / b,
                     math.sin(a) - a / (b * b)])


def random_tape(rng, n_in=4, n_ops=40):
    """Op soup over a pool of live scalars; returns (tape, inputs)."""
    x0 = rng.uniform(0.5, 1.5, size=n_in)
    s = begin_recording(7)
    pool = [mark_independent(s, float(v)) for v in x0]
    for _ in range(n_ops):
        pick = int(rng.integers(0, 8))
        x = pool[int(rng.integers(0, len(pool)))]
        if pick == 0:
            z = x + pool[int(rng.integers(0, len(pool)))]
        elif pick == 1:
            z = x - pool[int(rng.integers(0, len(pool)))]
        elif pick == 2:
            # damp products so values stay in a safe range
            z = (x * pool[int(rng.integers(0, len(pool)))]) * 0.45
        elif pick == 3:
            z = x + float(rng.uniform(-1.0, 1.0))
        elif pick == 4:
            z = x * float(rng.uniform(0.3, 0.9))
        elif pick == 5:
            z = -x
        elif pick == 6:
            z = ad_core.sin(x)
        else:
            z = ad_core.cos(x)
        pool.append(z)
    for d in rng.choice(len(pool), size=3, replace=False):
        mark_dependent(s, pool[int(d)])
    return end_recording(s), x0


def fd_jacobian_of_replay(tape, x, h=1e-6):
    cols = []
    for j in range(len(x)):
        e = np.zeros(len(x))
        e[j] = h
        cols.append((replay_primal(tape, x + e)
                     - replay_primal(tape, x - e)) / (2.0 * h))
    return np.column_stack(cols)


class TestRecording:

    def test_recorded_value_matches_direct_evaluation(self):
        tape = record_sample(0.7, 1.3)
        y = replay_primal(tape, np.array([0.7, 1.3]))
        assert y.shape == (1,)
        assert y[0] == pytest.approx(sample_value(0.7, 1.3), abs=0.0)

    def test_replay_at_new_inputs(self):
        """The tape re-evaluates the function, not the recorded numbers."""
        tape = record_sample()
        y = replay_primal(tape, np.array([1.1, 0.4]))
        assert y[0] == pytest.approx(sample_value(1.1, 0.4), rel=1e-15)

    def test_slot_numbering_is_ssa(self):
        # independents take slots 0..n-1, record k defines slot n + k
        tape = record_sample()
        assert tape.n_independent == 2
        assert tape.arg_a.min() >= 0
        assert tape.arg_a.max() < tape.n_slots
        assert tape.n_slots == tape.n_independent + tape.n_records
        # every argument slot is defined before it is used
        for k in range(tape.n_records):
            assert tape.arg_a[k] < tape.n_independent + k
            if tape.arg_b[k] >= 0:
                assert tape.arg_b[k] < tape.n_independent + k

    def test_mark_independent_after_arithmetic_raises(self):
        s = begin_recording(2)
        xa = mark_independent(s, 1.0)
        _ = xa + 1.0
        with pytest.raises(RecordingError):
            mark_independent(s, 2.0)
        abort_recording(s)

    def test_only_one_open_session(self):
        s = begin_recording(3)
        with pytest.raises(RecordingError):
            begin_recording(4)
        abort_recording(s)
        s2 = begin_recording(4)  # released by abort
        abort_recording(s2)

    def test_closed_session_rejects_new_operations(self):
        s = begin_recording(5)
        xa = mark_independent(s, 1.0)
        mark_dependent(s, xa * 2.0)
        end_recording(s)
        with pytest.raises(RecordingError):
            _ = xa + 1.0

    def test_duplicate_dependent_rows_allowed(self):
        s = begin_recording(6)
        xa = mark_independent(s, 2.0)
        y = xa * 3.0
        mark_dependent(s, y)
        mark_dependent(s, y)
        tape = end_recording(s)
        out = replay_primal(tape, np.array([2.0]))
        assert out.tolist() == [6.0, 6.0]

    def test_passthrough_dependent(self):
        # an independent marked as dependent is a pure copy row
        s = begin_recording(8)
        xa = mark_independent(s, 1.5)
        xb = mark_independent(s, 2.5)
        mark_dependent(s, xb)
        mark_dependent(s, xa * xb)
        tape = end_recording(s)
        x = np.array([3.0, 4.0])
        assert replay_primal(tape, x).tolist() == [4.0, 12.0]
        _, J = forward_propagate(tape, x, np.eye(2))
        assert J.tolist() == [[0.0, 1.0], [4.0, 3.0]]

    def test_active_exponent_rejected(self):
        s = begin_recording(9)
        xa = mark_independent(s, 2.0)
        with pytest.raises(TypeError):
            _ = xa ** xa
        abort_recording(s)

    def test_division_by_zero_reports_record(self):
        s = begin_recording(10)
        xa = mark_independent(s, 1.0)
        xb = mark_independent(s, 2.0)
        mark_dependent(s, xa / xb)
        tape = end_recording(s)
        with pytest.raises(ZeroDivisionError, match="record 0"):
            replay_primal(tape, np.array([1.0, 0.0]))

    def test_constant_division_stores_reciprocal(self):
        # x / c records a single multiply by 1/c
        s = begin_recording(11)
        xa = mark_independent(s, 3.0)
        mark_dependent(s, xa / 4.0)
        tape = end_recording(s)
        assert tape.n_records == 1
        assert tape.opcode[0] == ad_core.OP_MULC
        assert tape.const[0] == 0.25

    def test_dump_names_operations(self):
        text = dump_tape(record_sample())
        assert "sin" in text
        assert "mul" in text


# closed-form value and derivative for every operator path
UNARY_CASES = [
    ("add_const", lambda x: x + 2.5, lambda v: v + 2.5, lambda v: 1.0),
    ("radd_const", lambda x: 2.5 + x, lambda v: 2.5 + v, lambda v: 1.0),
    ("sub_const", lambda x: x - 1.5, lambda v: v - 1.5, lambda v: 1.0),
    ("rsub_const", lambda x: 3.0 - x, lambda v: 3.0 - v, lambda v: -1.0),
    ("mul_const", lambda x: x * 3.0, lambda v: v * 3.0, lambda v: 3.0),
    ("rmul_const", lambda x: 4.0 * x, lambda v: 4.0 * v, lambda v: 4.0),
    ("div_const", lambda x: x / 4.0, lambda v: v * 0.25, lambda v: 0.25),
    ("rdiv_const", lambda x: 5.0 / x, lambda v: 5.0 / v,
     lambda v: -5.0 / v ** 2),
    ("neg", lambda x: -x, lambda v: -v, lambda v: -1.0),
    ("pow_const", lambda x: x ** 3, lambda v: v ** 3, lambda v: 3.0 * v ** 2),
    ("sin", ad_core.sin, math.sin, math.cos),
    ("cos", ad_core.cos, math.cos, lambda v: -math.sin(v)),
    ("exp", ad_core.exp, math.exp, math.exp),
    ("log", ad_core.log, math.log, lambda v: 1.0 / v),
]

BINARY_CASES = [
    ("add", lambda x, y: x + y, lambda a, b: a + b, (1.0, 1.0)),
    ("sub", lambda x, y: x - y, lambda a, b: a - b, (1.0, -1.0)),
    ("mul", lambda x, y: x * y, lambda a, b: a * b, None),
    ("div", lambda x, y: x / y, lambda a, b: a / b, None),
]


class TestOperators:

    @pytest.mark.parametrize("name,build,value,deriv", UNARY_CASES,
                             ids=[c[0] for c in UNARY_CASES])
    def test_unary_value_and_derivative(self, name, build, value, deriv):
        v0 = 0.8
        s = begin_recording(20)
        xa = mark_independent(s, v0)
        mark_dependent(s, build(xa))
        tape = end_recording(s)
        y, J = forward_propagate(tape, np.array([v0]), np.eye(1))
        assert y[0] == pytest.approx(value(v0), rel=1e-15)
        assert J[0, 0] == pytest.approx(deriv(v0), rel=1e-15)
        # and away from the recording point
        y2 = replay_primal(tape, np.array([1.7]))
        assert y2[0] == pytest.approx(value(1.7), rel=1e-15)

    @pytest.mark.parametrize("name,build,value,grad", BINARY_CASES,
                             ids=[c[0] for c in BINARY_CASES])
    def test_binary_value_and_gradient(self, name, build, value, grad):
        a0, b0 = 0.9, 1.7
        s = begin_recording(21)
        xa = mark_independent(s, a0)
        xb = mark_independent(s, b0)
        mark_dependent(s, build(xa, xb))
        tape = end_recording(s)
        y, J = forward_propagate(tape, np.array([a0, b0]), np.eye(2))
        assert y[0] == pytest.approx(value(a0, b0), rel=1e-15)
        if grad is None:
            grad = (b0, a0) if name == "mul" else (1.0 / b0,
                                                   -a0 / b0 ** 2)
        assert J[0, 0] == pytest.approx(grad[0], rel=1e-15)
        assert J[0, 1] == pytest.approx(grad[1], rel=1e-15)

    def test_same_argument_twice(self):
        # x * x and x - x use one slot for both arguments
        s = begin_recording(22)
        xa = mark_independent(s, 1.3)
        mark_dependent(s, xa * xa)
        mark_dependent(s, xa - xa)
        tape = end_recording(s)
        _, J = forward_propagate(tape, np.array([1.3]), np.eye(1))
        assert J[0, 0] == pytest.approx(2.6, rel=1e-15)
        assert J[1, 0] == 0.0


class TestPropagation:

    def test_forward_gradient_closed_form(self):
        a, b = 0.7, 1.3
        tape = record_sample(a, b)
        _, J = forward_propagate(tape, np.array([a, b]), np.eye(2))
        assert np.allclose(J[0], sample_grad(a, b), rtol=1e-15)

    def test_reverse_matches_forward(self):
        a, b = 0.4, 2.1
        tape = record_sample()
        x = np.array([a, b])
        _, J = forward_propagate(tape, x, np.eye(2))
        g = reverse_propagate(tape, x, np.array([1.0]))
        assert np.allclose(g, J[0], rtol=1e-14, atol=0.0)

    def test_identity_seed_matches_dense_identity(self):
        # equal entrywise; the identity fast path may flip the sign of a
        # zero (0.0 where the dense product gives -1.0 * 0.0), so bitwise
        # equality is asserted on the nonzeros only
        rng = np.random.default_rng(0)
        tape, x0 = random_tape(rng)
        _, J1 = forward_propagate(tape, x0, SeedMatrix.identity(len(x0)))
        _, J2 = forward_propagate(tape, x0, np.eye(len(x0)))
        assert np.array_equal(J1, J2)
        nz = J1 != 0.0
        assert np.array_equal(J1[nz].view(np.uint64),
                              J2[nz].view(np.uint64))

    def test_vector_seed_returns_vector(self):
        tape = record_sample()
        x = np.array([0.7, 1.3])
        v = np.array([0.3, -0.2])
        _, Jv = forward_propagate(tape, x, v)
        assert Jv.shape == (1,)
        assert Jv[0] == pytest.approx(sample_grad(0.7, 1.3) @ v, rel=1e-14)

    def test_wide_seed_crosses_column_chunk(self):
        # more lanes than one chunk holds
        p = ad_core._COLUMN_CHUNK + 40
        tape = record_sample()
        x = np.array([0.7, 1.3])
        seed = np.zeros((2, p))
        seed[0, ::2] = 1.0
        seed[1, 1::2] = 1.0
        _, Y = forward_propagate(tape, x, seed)
        g = sample_grad(0.7, 1.3)
        assert np.allclose(Y[0, ::2], g[0], rtol=1e-15)
        assert np.allclose(Y[0, 1::2], g[1], rtol=1e-15)

    def test_out_buffer_is_used(self):
        tape = record_sample()
        x = np.array([0.7, 1.3])
        buf = np.empty((1, 2))
        _, Y = forward_propagate(tape, x, np.eye(2), out=buf)
        assert Y is buf

    def test_out_buffer_validation(self):
        tape = record_sample()
        x = np.array([0.7, 1.3])
        with pytest.raises(ValueError, match="out"):
            forward_propagate(tape, x, np.eye(2), out=np.empty((2, 2)))
        with pytest.raises(ValueError, match="out"):
            forward_propagate(tape, x, np.eye(2),
                              out=np.empty((1, 2), dtype=np.float32))

    def test_parallel_matches_serial_bitwise(self):
        rng = np.random.default_rng(1)
        tape, x0 = random_tape(rng)
        seed = rng.standard_normal((len(x0), 5))
        _, Y1 = forward_propagate(tape, x0, seed)
        _, Y2 = forward_propagate(tape, x0, seed, parallel=True)
        assert np.array_equal(Y1.view(np.uint64), Y2.view(np.uint64))
        w = rng.standard_normal(tape.n_dependent)
        g1 = reverse_propagate(tape, x0, w)
        g2 = reverse_propagate(tape, x0, w, parallel=True)
        assert np.array_equal(g1.view(np.uint64), g2.view(np.uint64))

    def test_seed_shape_validation(self):
        tape = record_sample()
        with pytest.raises(ValueError):
            forward_propagate(tape, np.array([1.0, 2.0]), np.eye(3))
        with pytest.raises(ValueError):
            reverse_propagate(tape, np.array([1.0, 2.0]), np.zeros(2))

    def test_input_length_validation(self):
        tape = record_sample()
        with pytest.raises(ValueError):
            replay_primal(tape, np.array([1.0]))
        with pytest.raises(ValueError):
            forward_propagate(tape, np.array([1.0, 2.0, 3.0]), np.eye(2))


class TestRandomTapes:
    """Seeded sweeps over generated tapes against independent oracles."""

    def test_jacobian_matches_finite_differences(self):
        rng = np.random.default_rng(42)
        for _ in range(20):
            tape, x0 = random_tape(rng)
            _, J = forward_propagate(tape, x0,
                                     SeedMatrix.identity(len(x0)))
            ref = fd_jacobian_of_replay(tape, x0)
            assert np.allclose(J, ref, rtol=1e-5, atol=1e-7)

    def test_transpose_dot_identity(self):
        # <J v, w> == <v, J^T w> up to roundoff
        rng = np.random.default_rng(43)
        for _ in range(20):
            tape, x0 = random_tape(rng)
            v = rng.standard_normal(len(x0))
            w = rng.standard_normal(tape.n_dependent)
            _, Jv = forward_propagate(tape, x0, v)
            JTw = reverse_propagate(tape, x0, w)
            left = float(Jv @ w)
            right = float(v @ JTw)
            assert left == pytest.approx(right, rel=1e-12, abs=1e-12)

    def test_sparsity_covers_numerical_nonzeros(self):
        rng = np.random.default_rng(44)
        for _ in range(10):
            tape, x0 = random_tape(rng)
            pattern = extract_sparsity(tape)
            _, J = forward_propagate(tape, x0,
                                     SeedMatrix.identity(len(x0)))
            mask = pattern.to_dense_mask()
            assert not np.any((J != 0.0) & ~mask)

    def test_reverse_full_jacobian_matches_forward(self):
        rng = np.random.default_rng(45)
        tape, x0 = random_tape(rng)
        _, J = forward_propagate(tape, x0, SeedMatrix.identity(len(x0)))
        JT = reverse_propagate(tape, x0, np.eye(tape.n_dependent))
        assert np.allclose(JT, J.T, rtol=1e-14, atol=1e-16)
