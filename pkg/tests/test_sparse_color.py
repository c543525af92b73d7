"""Sparsity patterns, distance-2 coloring, seed and recovery."""

import numpy as np
import pytest

from adjopt import (Coloring, SparsityPattern, begin_recording, build_recovery,
                    build_seed, color_columns, compressed_jacobian,
                    end_recording, extract_sparsity, forward_propagate,
                    mark_dependent, mark_independent, recover,
                    validate_coloring)
from adjopt.ad_core import SeedMatrix
from adjopt.sparse_color import dump_coloring, dump_pattern


def tridiagonal_pattern(n):
    rows = [np.arange(max(0, i - 1), min(n, i + 2)) for i in range(n)]
    return SparsityPattern(n_rows=n, n_cols=n, rows=rows)


def linear_tape_for(mask, rng):
    """A taped linear map whose Jacobian has exactly the mask's pattern."""
    m, n = mask.shape
    coeffs = np.where(mask, rng.uniform(1.0, 2.0, size=mask.shape), 0.0)
    s = begin_recording(30)
    xs = [mark_independent(s, float(v)) for v in rng.uniform(0.5, 1.5, n)]
    for i in range(m):
        acc = None
        for j in range(n):
            if mask[i, j]:
                term = xs[j] * float(coeffs[i, j])
                acc = term if acc is None else acc + term
        mark_dependent(s, acc)
    return end_recording(s), coeffs


def random_mask(rng, m, n, density=0.25):
    mask = rng.random((m, n)) < density
    for i in range(m):  # no empty rows: the taped row would be constant
        if not mask[i].any():
            mask[i, rng.integers(0, n)] = True
    return mask


class TestSparsityPattern:

    def test_counts_and_mask(self):
        pat = tridiagonal_pattern(4)
        assert pat.nnz == 10
        mask = pat.to_dense_mask()
        assert mask.sum() == 10
        assert mask[0].tolist() == [True, True, False, False]

    def test_csr_structure(self):
        pat = tridiagonal_pattern(3)
        offsets, cols = pat.csr_structure()
        assert offsets.tolist() == [0, 2, 5, 7]
        assert cols.tolist() == [0, 1, 0, 1, 2, 1, 2]

    def test_validate_rejects_unsorted(self):
        pat = SparsityPattern(n_rows=1, n_cols=3,
                              rows=[np.array([2, 1])])
        with pytest.raises(ValueError, match="row 0"):
            pat.validate()

    def test_validate_rejects_out_of_range(self):
        pat = SparsityPattern(n_rows=1, n_cols=2, rows=[np.array([0, 5])])
        with pytest.raises(ValueError):
            pat.validate()


class TestColoring:

    def test_tridiagonal_natural_coloring(self):
        """Greedy natural order on a 6x6 tridiagonal: colors 0,1,2 repeat."""
        coloring = color_columns(tridiagonal_pattern(6))
        assert coloring.color_of.tolist() == [0, 1, 2, 0, 1, 2]
        assert coloring.n_colors == 3

    def test_coloring_is_deterministic(self):
        pat = tridiagonal_pattern(9)
        a = color_columns(pat)
        b = color_columns(pat)
        assert np.array_equal(a.color_of, b.color_of)

    def test_smallest_last_is_valid(self):
        rng = np.random.default_rng(0)
        mask = random_mask(rng, 14, 11)
        rows = [np.flatnonzero(mask[i]) for i in range(14)]
        pat = SparsityPattern(n_rows=14, n_cols=11, rows=rows)
        coloring = color_columns(pat, ordering="smallest_last")
        validate_coloring(pat, coloring)

    def test_unknown_ordering_rejected(self):
        with pytest.raises(ValueError, match="ordering"):
            color_columns(tridiagonal_pattern(3), ordering="rainbow")

    def test_random_patterns_yield_valid_colorings(self):
        rng = np.random.default_rng(1)
        for _ in range(25):
            m = int(rng.integers(3, 20))
            n = int(rng.integers(3, 20))
            mask = random_mask(rng, m, n)
            rows = [np.flatnonzero(mask[i]) for i in range(m)]
            pat = SparsityPattern(n_rows=m, n_cols=n, rows=rows)
            coloring = color_columns(pat)
            # direct row scan, independent of validate_coloring
            for i in range(m):
                cs = coloring.color_of[rows[i]]
                assert len(set(cs.tolist())) == len(cs)
            assert coloring.n_colors >= max(len(r) for r in rows)

    def test_validate_coloring_names_bad_row(self):
        pat = tridiagonal_pattern(3)
        bad = Coloring(color_of=np.zeros(3, dtype=np.int64), n_colors=1)
        with pytest.raises(ValueError, match="row 0"):
            validate_coloring(pat, bad)

    def test_coloring_size_consistency(self):
        with pytest.raises(ValueError):
            Coloring(color_of=np.array([0, 2]), n_colors=2)


class TestSeedAndRecovery:

    def test_seed_is_color_indicator(self):
        coloring = color_columns(tridiagonal_pattern(6))
        seed = build_seed(coloring)
        assert seed.entries.shape == (6, 3)
        assert np.array_equal(seed.entries.sum(axis=1), np.ones(6))
        for j, c in enumerate(coloring.color_of):
            assert seed.entries[j, c] == 1.0

    def test_recovery_matrix_by_hand(self):
        pat = tridiagonal_pattern(6)
        rec = build_recovery(pat, color_columns(pat))
        assert rec.entries[0].tolist() == [0, 1, -1]
        assert rec.entries[1].tolist() == [0, 1, 2]
        assert rec.entries[5].tolist() == [-1, 4, 5]

    def test_recovery_rejects_conflicts(self):
        pat = SparsityPattern(n_rows=1, n_cols=2,
                              rows=[np.array([0, 1])])
        clash = Coloring(color_of=np.array([0, 0]), n_colors=1)
        with pytest.raises(ValueError, match="columns 0 and 1 share color"):
            build_recovery(pat, clash)

    def test_recovery_size_checks(self):
        pat = tridiagonal_pattern(4)
        with pytest.raises(ValueError):
            build_recovery(pat, color_columns(tridiagonal_pattern(5)))


class TestCompressedRoundtrip:

    def test_tridiagonal_recovery_is_exact(self):
        rng = np.random.default_rng(2)
        n = 6
        mask = tridiagonal_pattern(n).to_dense_mask()
        tape, coeffs = linear_tape_for(mask, rng)
        pattern = extract_sparsity(tape)
        coloring = color_columns(pattern)
        x = rng.uniform(0.5, 1.5, n)
        comp = compressed_jacobian(tape, x, coloring)
        rec = recover(comp, build_recovery(pattern, coloring), pattern)
        assert np.array_equal(rec.to_dense(), coeffs)

    def test_random_patterns_recover_uncompressed_exactly(self):
        """Compressed then scattered equals the identity-seed Jacobian with
        no tolerance at all."""
        rng = np.random.default_rng(3)
        for _ in range(15):
            m = int(rng.integers(4, 16))
            n = int(rng.integers(4, 16))
            mask = random_mask(rng, m, n, density=0.3)
            tape, _ = linear_tape_for(mask, rng)
            pattern = extract_sparsity(tape)
            coloring = color_columns(pattern)
            x = rng.uniform(0.5, 1.5, n)
            _, dense = forward_propagate(tape, x, SeedMatrix.identity(n))
            comp = compressed_jacobian(tape, x, coloring)
            rec = recover(comp, build_recovery(pattern, coloring), pattern)
            assert np.array_equal(rec.to_dense(), dense)
            assert coloring.n_colors <= n

    def test_compressed_values_are_jacobian_times_seed(self):
        rng = np.random.default_rng(4)
        mask = random_mask(rng, 8, 8, density=0.35)
        tape, _ = linear_tape_for(mask, rng)
        pattern = extract_sparsity(tape)
        coloring = color_columns(pattern)
        x = rng.uniform(0.5, 1.5, 8)
        _, dense = forward_propagate(tape, x, SeedMatrix.identity(8))
        comp = compressed_jacobian(tape, x, coloring)
        assert np.allclose(comp.values,
                           dense @ build_seed(coloring).entries,
                           rtol=1e-15)

    def test_recover_validates_shapes(self):
        pat = tridiagonal_pattern(5)
        coloring = color_columns(pat)
        rec = build_recovery(pat, coloring)
        rng = np.random.default_rng(5)
        mask = pat.to_dense_mask()
        tape, _ = linear_tape_for(mask, rng)
        comp = compressed_jacobian(tape, rng.uniform(1, 2, 5), coloring)
        other = tridiagonal_pattern(6)
        with pytest.raises(ValueError):
            recover(comp, rec, other)
        with pytest.raises(ValueError):
            recover(comp, build_recovery(other, color_columns(other)), pat)


class TestDumps:

    def test_pattern_dump(self):
        text = dump_pattern(tridiagonal_pattern(3))
        assert "3x3" in text
        assert "row 0: 0 1" in text

    def test_coloring_dump(self):
        text = dump_coloring(color_columns(tridiagonal_pattern(3)))
        assert "colors=3" in text
        assert "col 2: 2" in text
