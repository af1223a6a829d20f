"""
Unit tests for Galerkin assembly of flow generators and noisy Koopman operators.
"""

import numpy as np
import pytest
from scipy import sparse

from viscosity_lab.exceptions import ArgumentError
from viscosity_lab.generator_assembly import (
    FourierTruncation,
    OperatorKind,
    apply,
    assemble_flow_generator,
    assemble_noisy_koopman,
    conjugate_spectrum_check,
    imaginary_bound,
)
from viscosity_lab.phase_models import (
    TWO_PI,
    MapSystem,
    cat_map,
    nose_hoover_field,
    rotation_field,
    translation_field,
    trig_field,
)


class TestFourierTruncation:
    """Mode indexing."""

    def test_index_is_bijection(self, small_truncation_2d):
        idx, inside = small_truncation_2d.indices(small_truncation_2d.modes)
        assert inside.all()
        np.testing.assert_array_equal(np.sort(idx), np.arange(small_truncation_2d.size))
        assert small_truncation_2d.size == 49

    def test_lexicographic_order(self):
        trunc = FourierTruncation(2, 1)
        assert trunc.modes[0].tolist() == [-1, -1]
        assert trunc.modes[1].tolist() == [-1, 0]
        assert trunc.index((0, 0)) == 4

    def test_reflection(self, small_truncation_2d):
        p = small_truncation_2d.reflection()
        np.testing.assert_array_equal(small_truncation_2d.modes[p], -small_truncation_2d.modes)

    def test_out_of_range_mode(self, small_truncation_2d):
        _, inside = small_truncation_2d.indices(np.array([[4, 0], [0, 3]]))
        assert inside.tolist() == [False, True]
        with pytest.raises(ArgumentError):
            small_truncation_2d.index((4, 0))

    def test_boundary_mask(self):
        trunc = FourierTruncation(1, 4)
        assert trunc.boundary_mask().sum() == 2
        assert trunc.boundary_mask(width=1).sum() == 4

    def test_invalid(self):
        with pytest.raises(ArgumentError):
            FourierTruncation(0, 3)


class TestFlowGenerator:
    """assemble_flow_generator."""

    def test_rotation_is_diagonal(self):
        trunc = FourierTruncation(1, 4)
        op = assemble_flow_generator(rotation_field(), 0.1, trunc)
        matrix = op.dense()
        np.testing.assert_array_equal(matrix, np.diag(np.diag(matrix)))
        assert matrix[trunc.index((2,)), trunc.index((2,))] == pytest.approx(2 - 0.4j)
        assert op.kind == OperatorKind.FLOW_GENERATOR

    def test_translation_diagonal_entry(self):
        trunc = FourierTruncation(2, 2)
        op = assemble_flow_generator(translation_field(1.0, 2.0), 0.01, trunc)
        i = trunc.index((1, 1))
        assert op.dense()[i, i] == pytest.approx(3 - 0.02j)

    def test_shear_bands(self):
        trunc = FourierTruncation(2, 2)
        field = trig_field("sin_x2", [[((0, 1), 0.0, 1.0)], []])
        matrix = assemble_flow_generator(field, 0.0, trunc).dense()
        rows, cols = np.nonzero(matrix)
        shifts = trunc.modes[rows] - trunc.modes[cols]
        assert set(map(tuple, shifts.tolist())) <= {(0, 1), (0, -1)}
        np.testing.assert_allclose(
            np.abs(matrix[rows, cols]), np.abs(trunc.modes[cols, 0]) / 2.0
        )

    def test_matches_galerkin_quadrature(self):
        trunc = FourierTruncation(2, 2)
        field = trig_field("sin_x2", [[((0, 1), 0.0, 1.0)], []])
        matrix = assemble_flow_generator(field, 0.0, trunc).dense()

        axis = np.linspace(0.0, TWO_PI, 64, endpoint=False)
        x1, x2 = np.meshgrid(axis, axis, indexing="ij")
        points = np.stack([x1.ravel(), x2.ravel()], axis=-1)
        basis = np.exp(1j * points @ trunc.modes.T.astype(float))
        # (1/i) sin(x2) d_1 e^{ik.x} = k_1 sin(x2) e^{ik.x}
        image = np.sin(points[:, 1])[:, None] * trunc.modes[:, 0][None, :] * basis
        oracle = basis.conj().T @ image / points.shape[0]
        np.testing.assert_allclose(matrix, oracle, atol=1e-12)

    def test_negative_epsilon(self, rotation):
        with pytest.raises(ArgumentError):
            assemble_flow_generator(rotation, -0.1, FourierTruncation(1, 4))

    def test_harmonic_exceeds_cutoff(self):
        field = trig_field("high", [[((0, 3), 1.0, 0.0)], []])
        with pytest.raises(ArgumentError):
            assemble_flow_generator(field, 0.1, FourierTruncation(2, 2))

    def test_rejects_closed_form_field(self):
        with pytest.raises(ArgumentError):
            assemble_flow_generator(nose_hoover_field("W"), 0.1, FourierTruncation(3, 2))

    def test_storage_switch(self, shear):
        trunc = FourierTruncation(2, 3)
        assert not assemble_flow_generator(shear, 0.1, trunc).is_sparse
        op = assemble_flow_generator(shear, 0.1, trunc, sparse_threshold=10)
        assert op.is_sparse
        assert sparse.issparse(op.entries)
        dense = assemble_flow_generator(shear, 0.1, trunc, storage="dense")
        np.testing.assert_array_equal(op.dense(), dense.dense())

    def test_triplets_row_major(self, shear, small_truncation_2d):
        op = assemble_flow_generator(shear, 0.1, small_truncation_2d)
        rows, cols, vals = op.triplets()
        keys = rows * op.size + cols
        assert np.all(np.diff(keys) > 0)
        np.testing.assert_array_equal(op.dense()[rows, cols], vals)


class TestNoisyKoopman:
    """assemble_noisy_koopman."""

    def test_linear_cat_column(self, linear_cat):
        trunc = FourierTruncation(2, 3)
        matrix = assemble_noisy_koopman(linear_cat, 0.1, trunc).dense()
        column = matrix[:, trunc.index((1, 0))]
        assert np.count_nonzero(column) == 1
        assert column[trunc.index((2, 1))] == pytest.approx(np.exp(-0.5))

    def test_at_most_one_nonzero_per_column(self, linear_cat):
        matrix = assemble_noisy_koopman(linear_cat, 0.05, FourierTruncation(2, 4)).dense()
        assert np.max(np.count_nonzero(matrix, axis=0)) <= 1

    @pytest.mark.parametrize("epsilon", [0.01, 0.1, 1.0])
    def test_constant_mode_is_fixed(self, linear_cat, epsilon):
        trunc = FourierTruncation(2, 3)
        i = trunc.index((0, 0))
        assert assemble_noisy_koopman(linear_cat, epsilon, trunc).dense()[i, i] == 1.0

    def test_linear_entry_matches_sampled_mode(self, linear_cat):
        # f*(e^{ik.x}) sampled on a grid projects onto the single mode A^T k
        trunc = FourierTruncation(2, 3)
        k = np.array([1, -1])
        axis = np.linspace(0.0, TWO_PI, 32, endpoint=False)
        x1, x2 = np.meshgrid(axis, axis, indexing="ij")
        points = np.stack([x1.ravel(), x2.ravel()], axis=-1)
        pulled = np.exp(1j * linear_cat.apply(points) @ k.astype(float))
        target = linear_cat.integer_matrix.T @ k
        coefficient = np.mean(pulled * np.exp(-1j * points @ target.astype(float)))
        assert coefficient == pytest.approx(1.0)

        matrix = assemble_noisy_koopman(linear_cat, 0.1, trunc).dense()
        expected = np.exp(-0.1 * float(target @ target))
        assert matrix[trunc.index(target), trunc.index(k)] == pytest.approx(expected)

    def test_zero_perturbation_matches_linear(self, linear_cat):
        zero = trig_field("zero", [[((1, 0), 0.0, 0.0)], [((1, 0), 0.0, 0.0)]])
        perturbed = MapSystem(linear_cat.matrix, zero, name="zero_perturbation")
        trunc = FourierTruncation(2, 3)
        np.testing.assert_allclose(
            assemble_noisy_koopman(perturbed, 0.1, trunc).dense(),
            assemble_noisy_koopman(linear_cat, 0.1, trunc).dense(),
            atol=1e-12,
        )

    def test_dropped_mass_bound(self, linear_cat):
        op = assemble_noisy_koopman(linear_cat, 0.1, FourierTruncation(2, 3))
        assert op.dropped_mass_bound == pytest.approx(np.exp(-0.9))

    def test_non_positive_epsilon(self, linear_cat):
        with pytest.raises(ArgumentError):
            assemble_noisy_koopman(linear_cat, 0.0, FourierTruncation(2, 3))

    def test_quadrature_grid_too_small(self):
        with pytest.raises(ArgumentError):
            assemble_noisy_koopman(
                cat_map(delta=0.05), 0.1, FourierTruncation(2, 4), quadrature_points=16
            )


class TestApply:
    """apply and matrix-free products."""

    def test_rotation_unit_vector(self, rotation):
        trunc = FourierTruncation(1, 4)
        op = assemble_flow_generator(rotation, 0.1, trunc)
        unit = np.zeros(trunc.size, dtype=complex)
        unit[trunc.index((2,))] = 1.0
        np.testing.assert_allclose(apply(op, unit), (2 - 0.4j) * unit)

    def test_matrix_free_matches_materialized(self, shear, rng):
        op = assemble_flow_generator(shear, 0.05, FourierTruncation(2, 8))
        for _ in range(3):
            u = rng.standard_normal(op.size) + 1j * rng.standard_normal(op.size)
            diff = apply(op, u, matrix_free=True) - apply(op, u)
            assert np.max(np.abs(diff)) <= 1e-12

    def test_koopman_preserves_constant_component(self, linear_cat):
        trunc = FourierTruncation(2, 3)
        op = assemble_noisy_koopman(linear_cat, 0.1, trunc)
        out = apply(op, np.ones(trunc.size))
        assert out[trunc.index((0, 0))] == 1.0

    def test_size_mismatch(self, rotation):
        op = assemble_flow_generator(rotation, 0.1, FourierTruncation(1, 4))
        with pytest.raises(ArgumentError):
            apply(op, np.ones(3))


class TestConjugateSymmetry:
    """Reality identities under k -> -k."""

    def test_rotation_exact(self, rotation):
        op = assemble_flow_generator(rotation, 0.1, FourierTruncation(1, 8))
        assert conjugate_spectrum_check(op).violation == 0.0

    def test_shear_generator(self):
        field = trig_field("sin_x2", [[((0, 1), 0.0, 1.0)], []])
        op = assemble_flow_generator(field, 0.05, FourierTruncation(2, 4))
        assert conjugate_spectrum_check(op).violation <= 1e-14

    def test_linear_koopman_is_real(self, linear_cat):
        op = assemble_noisy_koopman(linear_cat, 0.1, FourierTruncation(2, 3))
        assert np.max(np.abs(op.dense().imag)) <= 1e-14
        assert conjugate_spectrum_check(op).violation <= 1e-14

    def test_perturbed_koopman(self):
        op = assemble_noisy_koopman(cat_map(delta=0.05), 0.1, FourierTruncation(2, 3))
        report = conjugate_spectrum_check(op)
        assert report.identity == "conj(K) = RKR"
        assert report.violation <= 1e-12


class TestImaginaryBound:
    def test_divergence_free_fields(self, shear, translation):
        assert imaginary_bound(shear) == pytest.approx(0.0, abs=1e-15)
        assert imaginary_bound(translation) == 0.0

    def test_compressible_field(self):
        # V = sin(x1) d_1, F = cos(x1)/2
        field = trig_field("compressible", [[((1, 0), 0.0, 1.0)], []])
        assert imaginary_bound(field) == pytest.approx(0.5)
