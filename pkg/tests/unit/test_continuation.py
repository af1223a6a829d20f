"""
Unit tests for viscosity continuation: sweeps, branch matching and extrapolation.
"""

from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

from viscosity_lab.continuation import (
    Branch,
    BranchStatus,
    TruncationPolicy,
    boundary_contamination,
    chain_spectra,
    extrapolate,
    gap_diagnostic,
    geometric_schedule,
    mirror_negative_viscosity,
    modulus_gap_count,
    sweep,
)
from viscosity_lab.eigensolver import ResonanceSet, SolverKind, Window, dense_spectrum
from viscosity_lab.exceptions import ArgumentError, PreconditionError
from viscosity_lab.generator_assembly import FourierTruncation, assemble_noisy_koopman

SCHEDULE = [0.2, 0.1, 0.05, 0.025]
ROTATION_WINDOW = Window(-4.5, 4.5, -1.0, 0.1)
TRANSLATION_WINDOW = Window(-3.0, 3.0, -0.22, 0.1)
SQRT2 = np.sqrt(2.0)


def synthetic_branch(values_fn, schedule=SCHEDULE, noise=None):
    branch = Branch(identifier=0, dimension=1)
    for i, eps in enumerate(schedule):
        value = values_fn(eps)
        if noise is not None:
            value += noise[i]
        branch.append(eps, value, cutoff=8, mass=0.0)
    return branch


def branch_through(branches, value, epsilon):
    for branch in branches:
        current = branch.value_at(epsilon)
        if current is not None and abs(current - value) < 1e-9:
            return branch
    raise AssertionError(f"No branch through {value} at eps={epsilon}")


@pytest.fixture
def rotation_branches(rotation):
    return sweep(rotation, SCHEDULE, ROTATION_WINDOW)


@pytest.fixture
def translation_branches(translation):
    return sweep(translation, SCHEDULE, TRANSLATION_WINDOW, TruncationPolicy(fixed_cutoff=6))


class TestTruncationPolicy:
    def test_adaptive_cutoff(self):
        policy = TruncationPolicy()
        assert policy.cutoff_for(0.1, 1) == 13
        assert policy.cutoff_for(0.2, 1) == 9
        assert policy.cutoff_for(1.0, 1) == 8

    def test_dense_cap(self):
        assert TruncationPolicy().cutoff_for(0.001, 2) == 31
        assert TruncationPolicy(method="arnoldi").cutoff_for(0.001, 2) == 127

    def test_fixed_cutoff(self):
        assert TruncationPolicy(fixed_cutoff=6).cutoff_for(1e-6, 2) == 6

    def test_uses_arnoldi(self):
        assert not TruncationPolicy().uses_arnoldi(100)
        assert TruncationPolicy().uses_arnoldi(5000)
        assert TruncationPolicy(method="arnoldi").uses_arnoldi(100)
        assert not TruncationPolicy(method="dense").uses_arnoldi(5000)


class TestSweep:
    """sweep on exactly solvable systems."""

    def test_rotation_branches(self, rotation_branches):
        assert len(rotation_branches) == 9
        branch = branch_through(rotation_branches, 2 - 0.8j, 0.2)
        for eps, value in zip(branch.epsilons, branch.values):
            assert value == pytest.approx(2 - 4j * eps, abs=1e-10)
        assert branch.epsilons == SCHEDULE

    def test_rotation_statuses(self, rotation_branches):
        counts = {}
        for branch in rotation_branches:
            counts[branch.status] = counts.get(branch.status, 0) + 1
        # k = 0, +-1, +-2, +-3 have >= 3 points; +-4 enter at eps = 0.05
        assert counts == {BranchStatus.CONVERGED: 7, BranchStatus.INSUFFICIENT: 2}

    def test_rotation_limits(self, rotation_branches):
        branch = branch_through(rotation_branches, 2 - 0.8j, 0.2)
        assert branch.extrapolated == pytest.approx(2 + 0j, abs=1e-12)
        assert branch.extrapolation_order == 1
        for b in rotation_branches:
            if b.status == BranchStatus.CONVERGED:
                assert abs(b.extrapolated - round(b.extrapolated.real)) <= 1e-8

    def test_monotone_damping(self, rotation_branches):
        for branch in rotation_branches:
            imag = np.imag(branch.values)
            assert np.all(np.diff(imag) >= -1e-12)

    def test_translation_never_confuses_modes(self, translation_branches):
        for branch in translation_branches:
            eps0, value0 = branch.epsilons[0], branch.values[0]
            candidates = [
                (j, m)
                for j in range(-6, 7)
                for m in range(-6, 7)
                if abs(j + SQRT2 * m - 1j * eps0 * (j * j + m * m) - value0) < 1e-9
            ]
            assert len(candidates) == 1
            j, m = candidates[0]
            for eps, value in zip(branch.epsilons, branch.values):
                assert abs(value - (j + SQRT2 * m - 1j * eps * (j * j + m * m))) < 1e-9

    def test_koopman_constant_branch(self, linear_cat):
        window = Window(0.5, 1.5, -0.5, 0.5)
        branches = sweep(linear_cat, SCHEDULE, window, TruncationPolicy(fixed_cutoff=4))
        assert len(branches) == 1
        np.testing.assert_allclose(branches[0].values, 1.0, atol=1e-12)
        assert branches[0].extrapolated == pytest.approx(1.0, abs=1e-10)

    def test_empty_window(self, rotation):
        assert sweep(rotation, SCHEDULE, Window(100.0, 101.0, 0.0, 1.0)) == []

    def test_executor_is_deterministic(self, rotation, rotation_branches):
        with ThreadPoolExecutor(max_workers=4) as executor:
            parallel = sweep(rotation, SCHEDULE, ROTATION_WINDOW, executor=executor)
        assert [b.values for b in parallel] == [b.values for b in rotation_branches]
        assert [b.status for b in parallel] == [b.status for b in rotation_branches]

    @pytest.mark.parametrize(
        "schedule", [[], [0.1, 0.2], [0.1, 0.1], [0.1, 0.0], [0.1, -0.05]]
    )
    def test_invalid_schedule(self, rotation, schedule):
        with pytest.raises(ArgumentError):
            sweep(rotation, schedule, ROTATION_WINDOW)

    def test_geometric_schedule(self):
        assert geometric_schedule() == pytest.approx([0.2, 0.1, 0.05, 0.025, 0.0125, 0.00625])
        with pytest.raises(ArgumentError):
            geometric_schedule(ratio=1.5)


class TestChaining:
    def test_tie_break_by_real_part(self):
        def spectrum(values, eps):
            values = np.asarray(values, dtype=complex)
            return ResonanceSet(values, np.zeros(values.size), eps, SolverKind.DENSE)

        branches = chain_spectra(
            [0.2, 0.1], [spectrum([0.0], 0.2), spectrum([0.1, -0.1], 0.1)], dimension=1
        )
        assert len(branches) == 2
        assert branches[0].values == [0.0, -0.1]
        assert branches[1].values == [0.1]

    def test_far_candidate_starts_new_branch(self):
        def spectrum(values, eps):
            values = np.asarray(values, dtype=complex)
            return ResonanceSet(values, np.zeros(values.size), eps, SolverKind.DENSE)

        branches = chain_spectra(
            [0.2, 0.1], [spectrum([0.0], 0.2), spectrum([2.0], 0.1)], dimension=1
        )
        assert [b.values for b in branches] == [[0.0], [2.0]]


class TestExtrapolate:
    """extrapolate."""

    def test_quadratic_branch(self):
        truth = 0.3 - 0.2j
        branch = synthetic_branch(lambda e: truth + (1 + 1j) * e + 2 * e**2)
        assert extrapolate(branch) == pytest.approx(truth, abs=1e-8)
        assert branch.extrapolation_order == 2
        assert branch.status == BranchStatus.CONVERGED

    def test_noisy_branch(self, rng):
        truth = 0.3 - 0.2j
        schedule = geometric_schedule()
        noise = 1e-6 * (rng.standard_normal(len(schedule)) + 1j * rng.standard_normal(len(schedule)))
        branch = synthetic_branch(
            lambda e: truth + (1 + 1j) * e + 2 * e**2, schedule=schedule, noise=noise
        )
        assert abs(extrapolate(branch) - truth) <= 1e-4
        assert 0.0 < branch.residual_of_fit < 1e-5
        assert branch.status == BranchStatus.CONVERGED

    def test_non_smooth_branch_is_downgraded(self):
        jumps = {0.2: 0.0, 0.1: 1.0, 0.05: 0.0, 0.025: 1.0}
        branch = synthetic_branch(lambda e: complex(jumps[e]))
        limit = extrapolate(branch)
        assert np.isfinite(limit)
        assert branch.status == BranchStatus.NON_SMOOTH

    def test_preconditions(self):
        short = synthetic_branch(lambda e: 1.0, schedule=[0.2, 0.1])
        with pytest.raises(PreconditionError):
            extrapolate(short)
        lost = synthetic_branch(lambda e: 1.0)
        lost.status = BranchStatus.LOST
        with pytest.raises(PreconditionError):
            extrapolate(lost)


class TestBoundaryContamination:
    def unit_branch(self, mode, cutoff=16):
        trunc = FourierTruncation(1, cutoff)
        vector = np.zeros(trunc.size, dtype=complex)
        vector[trunc.index((mode,))] = 1.0
        branch = Branch(identifier=0, dimension=1)
        branch.append(0.1, complex(mode), cutoff, 0.0)
        return branch, [vector]

    def test_interior_mode(self):
        branch, vectors = self.unit_branch(2)
        assert not boundary_contamination(branch, vectors)

    def test_boundary_mode(self):
        branch, vectors = self.unit_branch(16)
        assert boundary_contamination(branch, vectors)
        branch, vectors = self.unit_branch(15)
        assert boundary_contamination(branch, vectors)

    def test_recorded_masses(self):
        branch = synthetic_branch(lambda e: 1.0)
        assert not boundary_contamination(branch)
        branch.boundary_masses[-1] = 0.02
        assert boundary_contamination(branch)

    def test_vector_count_mismatch(self):
        branch, vectors = self.unit_branch(2)
        with pytest.raises(ArgumentError):
            boundary_contamination(branch, vectors * 2)


class TestGapDiagnostic:
    """gap_diagnostic and its map analog."""

    def test_rotation_strip(self, rotation_branches):
        report = gap_diagnostic(rotation_branches, gamma0=0.19, delta=0.0, radius=0.5)
        assert report.strip_half_width == pytest.approx(0.095)
        assert report.strip_count == 0
        # k = +-1 sit at Im = -eps inside the strip at both finest epsilons
        assert report.raw_strip_counts == {0.05: 2, 0.025: 2}
        assert report.strip_stable

    def test_translation_box_counts(self, translation_branches):
        report = gap_diagnostic(translation_branches, gamma0=0.32, delta=0.0, radius=2.9)
        for eps in SCHEDULE:
            expected = sum(
                1
                for j in range(-6, 7)
                for m in range(-6, 7)
                if abs(j + SQRT2 * m) <= 2.9 and eps * (j * j + m * m) <= 0.16
            )
            assert report.box_counts[eps] == expected

    def test_requires_positive_gamma(self, rotation_branches):
        with pytest.raises(PreconditionError):
            gap_diagnostic(rotation_branches, gamma0=0.0, delta=0.0, radius=1.0)
        with pytest.raises(ArgumentError):
            gap_diagnostic(rotation_branches, gamma0=0.2, delta=0.3, radius=1.0)

    @pytest.mark.parametrize("cutoff", [8, 12])
    def test_cat_map_modulus_gap(self, linear_cat, cutoff):
        op = assemble_noisy_koopman(linear_cat, 0.05, FourierTruncation(2, cutoff))
        gamma0 = float(np.log((3 + np.sqrt(5)) / 2))
        assert modulus_gap_count(dense_spectrum(op, residual_tol=1e-6), gamma0) == 0

    def test_modulus_gap_counts_interior(self):
        values = np.array([1.0, 0.9, 0.5j, 0.1])
        assert modulus_gap_count(values, gamma0=2.0) == 2

    def test_negative_viscosity_mirror(self, rotation_branches):
        limits = mirror_negative_viscosity(rotation_branches)
        assert len(limits) == 7
        for branch, mirrored in zip(
            [b for b in rotation_branches if b.status == BranchStatus.CONVERGED], limits
        ):
            assert mirrored == np.conj(branch.extrapolated)
