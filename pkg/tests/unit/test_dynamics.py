"""
Unit tests for Lyapunov exponents, Poincare sections and paired trajectories.
"""

from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

from viscosity_lab.dynamics import (
    SECTION_TIME_PER_CROSSING,
    SECTION_TOLERANCE,
    SectionCrossings,
    SectionPlane,
    TangentCocycle,
    axis_seeds,
    classify_section,
    gamma0_estimate,
    lyapunov_spectrum,
    poincare_section,
    rk4_step,
    spacing_dimension,
    stochastic_vs_deterministic,
)
from viscosity_lab.exceptions import ArgumentError, PreconditionError
from viscosity_lab.phase_models import TWO_PI, cat_map, nose_hoover_field

CAT_EXPONENT = float(np.log((3.0 + np.sqrt(5.0)) / 2.0))


class TestLyapunov:
    """lyapunov_spectrum and the tangent cocycle."""

    def test_rk4_local_error(self):
        x = rk4_step(lambda y: -y, np.array([1.0]), 0.1)
        assert x[0] == pytest.approx(np.exp(-0.1), abs=1e-7)

    def test_linear_cat_exponents(self, linear_cat):
        result = lyapunov_spectrum(linear_cat, [0.3, 1.1], horizon=400)
        exponents = result.for_seed(0)
        assert exponents[0] == pytest.approx(CAT_EXPONENT, abs=5e-3)
        assert exponents[1] == pytest.approx(-CAT_EXPONENT, abs=5e-3)
        # area preservation: the sum is log |det A| = 0
        assert exponents.sum() == pytest.approx(0.0, abs=1e-10)
        assert result.orthonormality_defect <= 1e-12

    def test_perturbed_cat_is_area_preserving(self):
        result = lyapunov_spectrum(cat_map(delta=0.05), [0.3, 1.1], horizon=400)
        assert result.for_seed(0).sum() == pytest.approx(0.0, abs=1e-8)
        assert result.for_seed(0)[0] > 0.5

    def test_rotation_has_zero_exponents(self, rotation):
        result = lyapunov_spectrum(rotation, [0.2], horizon=1.0, renorm_every=0.1, dt=1e-2)
        np.testing.assert_allclose(result.exponents, 0.0, atol=1e-14)
        assert not result.truncated.any()

    def test_batched_seeds_are_sorted(self, linear_cat, rng):
        seeds = rng.uniform(0.0, TWO_PI, size=(3, 2))
        result = lyapunov_spectrum(linear_cat, seeds, horizon=100)
        assert result.exponents.shape == (3, 2)
        assert np.all(np.diff(result.exponents, axis=1) <= 0)

    def test_escaping_trajectory_is_truncated(self):
        result = lyapunov_spectrum(
            nose_hoover_field("V"), [0.0, 5.0, 0.0], horizon=0.1, renorm_every=0.01, dt=1e-3
        )
        assert result.truncated.all()

    def test_invalid_horizon(self, linear_cat):
        with pytest.raises(ArgumentError):
            lyapunov_spectrum(linear_cat, [0.1, 0.2], horizon=0)
        with pytest.raises(ArgumentError):
            lyapunov_spectrum(linear_cat, [0.1, 0.2], horizon=3, renorm_every=1)
        with pytest.raises(ArgumentError):
            lyapunov_spectrum(linear_cat, [0.1, 0.2, 0.3], horizon=100)

    def test_cocycle_needs_time(self):
        cocycle = TangentCocycle(np.zeros((1, 2)), np.eye(2)[None], np.zeros((1, 2)))
        with pytest.raises(PreconditionError):
            cocycle.exponents()


class TestGamma0:
    """gamma0_estimate."""

    def test_linear_cat(self, linear_cat, rng):
        seeds = rng.uniform(0.0, TWO_PI, size=(4, 2))
        report = gamma0_estimate(linear_cat, seeds, horizon=400, chunk=2)
        assert report.gamma0 == pytest.approx(CAT_EXPONENT, abs=5e-3)
        assert report.spread <= 1e-12
        assert report.unstable_dimension.tolist() == [1, 1, 1, 1]
        assert report.flagged_seeds == []

    def test_executor_matches_serial(self, linear_cat, rng):
        seeds = rng.uniform(0.0, TWO_PI, size=(5, 2))
        serial = gamma0_estimate(linear_cat, seeds, horizon=100, chunk=2)
        with ThreadPoolExecutor(max_workers=3) as executor:
            parallel = gamma0_estimate(linear_cat, seeds, horizon=100, executor=executor, chunk=2)
        np.testing.assert_array_equal(serial.exponents, parallel.exponents)

    def test_no_expansion(self, rotation):
        with pytest.raises(PreconditionError):
            gamma0_estimate(rotation, [[0.1], [0.2]], horizon=1.0, renorm_every=0.1, dt=1e-2)

    def test_perturbed_cat(self, rng):
        seeds = rng.uniform(0.0, TWO_PI, size=(8, 2))
        report = gamma0_estimate(cat_map(delta=0.05), seeds, horizon=2000, chunk=4)
        assert 0.9 <= report.gamma0 <= 1.03
        assert report.spread < 0.05
        assert report.unstable_dimension.tolist() == [1] * 8
        assert report.flagged_seeds == []

    def test_matches_vector_growth(self):
        system = cat_map(delta=0.05)
        seed = np.array([[0.7, 2.1]])
        report = gamma0_estimate(system, seed, horizon=1000, renorm_every=1)

        # top exponent from the growth of a single tangent vector
        x, v, total = seed.copy(), np.array([1.0, 0.0]), 0.0
        for _ in range(1000):
            v = system.jacobian(x)[0] @ v
            norm = np.linalg.norm(v)
            total += np.log(norm)
            v /= norm
            x = system.apply(x)
        assert report.gamma0 == pytest.approx(total / 1000, abs=1e-6)
        assert report.gamma0 == pytest.approx(report.exponents[0, 0], abs=1e-12)

    def test_horizon_doubling(self, rng):
        system = cat_map(delta=0.05)
        seeds = rng.uniform(0.0, TWO_PI, size=(6, 2))
        short = gamma0_estimate(system, seeds, horizon=1000)
        long = gamma0_estimate(system, seeds, horizon=2000)
        assert abs(long.gamma0 - short.gamma0) < 1e-2


class TestPoincareSection:
    """poincare_section and orbit classification."""

    def test_translation_crossings(self, translation):
        plane = SectionPlane(coordinate=1, level=0.0, direction=1)
        crossings = poincare_section(translation, plane, [[0.0, 0.1]], n_crossings=3, dt=1e-2)
        assert crossings.points.shape == (3, 1)
        j = np.arange(1, 4)
        expected = np.mod((TWO_PI * j - 0.1) / np.sqrt(2.0), TWO_PI)
        np.testing.assert_allclose(crossings.points[:, 0], expected, atol=1e-9)
        assert crossings.residuals.max() <= 1e-9
        assert crossings.incomplete == []

    def test_wrong_direction_never_crosses(self, translation):
        plane = SectionPlane(coordinate=1, level=0.0, direction=-1)
        crossings = poincare_section(
            translation, plane, [[0.0, 0.1]], n_crossings=2, dt=1e-2, max_time=10.0
        )
        assert crossings.points.shape == (0, 1)
        assert crossings.incomplete == [0]

    def test_escape_is_reported(self):
        plane = SectionPlane(coordinate=2, level=0.0, direction=1)
        crossings = poincare_section(
            nose_hoover_field("V"), plane, [[0.0, 5.0, 0.0]], n_crossings=1, dt=1e-3, max_time=1.0
        )
        assert crossings.escaped == [0]

    def test_default_time_budget(self, translation, caplog):
        plane = SectionPlane(coordinate=1, level=0.0, direction=-1)
        crossings = poincare_section(translation, plane, [[0.0, 0.1]], n_crossings=1, dt=1e-2)
        assert crossings.points.shape == (0, 1)
        assert crossings.incomplete == [0]
        assert crossings.escaped == []
        assert f"by t = {SECTION_TIME_PER_CROSSING}" in caplog.text

    def test_nose_hoover_refinement(self):
        plane = SectionPlane(coordinate=2, level=0.0, direction=1)
        crossings = poincare_section(
            nose_hoover_field("W"), plane, axis_seeds(3, (1.0, 3.0)), n_crossings=20, dt=1e-2
        )
        assert crossings.points.shape == (60, 2)
        assert crossings.escaped == [] and crossings.incomplete == []
        # residual is |x3| at the refined crossing
        assert crossings.residuals.max() <= SECTION_TOLERANCE

    def test_sections_are_deterministic(self):
        field = nose_hoover_field("W")
        plane = SectionPlane(coordinate=2, level=0.0, direction=1)
        seeds = axis_seeds(4, (0.5, 5.0))
        first = poincare_section(field, plane, seeds, n_crossings=30, dt=1e-2)
        second = poincare_section(field, plane, seeds, n_crossings=30, dt=1e-2)
        np.testing.assert_array_equal(first.points, second.points)
        np.testing.assert_array_equal(first.tags, second.tags)
        np.testing.assert_array_equal(first.residuals, second.residuals)

        # seed chunks see the same per-seed arithmetic as the full batch
        halves = [poincare_section(field, plane, seeds[i:i + 2], n_crossings=30, dt=1e-2) for i in (0, 2)]
        np.testing.assert_array_equal(first.points, np.concatenate([h.points for h in halves]))

    @pytest.mark.slow
    def test_nose_hoover_mixed_phase_space(self):
        plane = SectionPlane(coordinate=2, level=0.0, direction=1)
        crossings = poincare_section(
            nose_hoover_field("W"), plane, axis_seeds(20, (0.5, 5.0)), n_crossings=500, dt=1e-2
        )
        assert crossings.points.shape[0] >= 10_000
        assert crossings.residuals.max() <= SECTION_TOLERANCE
        labels = set(classify_section(crossings).values())
        assert {"curve", "scatter"} <= labels

    def test_invalid_plane(self, translation):
        with pytest.raises(ArgumentError):
            SectionPlane(direction=0)
        with pytest.raises(ArgumentError):
            poincare_section(translation, SectionPlane(coordinate=2), [[0.0, 0.0]], 1)

    def test_spacing_dimension(self, rng):
        angles = rng.uniform(0.0, TWO_PI, 2000)
        circle = np.stack([np.cos(angles), np.sin(angles)], axis=1)
        square = rng.uniform(0.0, 1.0, size=(4000, 2))
        assert 0.8 < spacing_dimension(circle) < 1.3
        assert 1.6 < spacing_dimension(square) < 2.5
        assert np.isnan(spacing_dimension(square[:5]))

    def test_classify_section(self, rng):
        angles = rng.uniform(0.0, TWO_PI, 2000)
        circle = np.stack([np.cos(angles), np.sin(angles)], axis=1)
        square = rng.uniform(-1.0, 1.0, size=(4000, 2))
        few = np.zeros((3, 2))
        points = np.concatenate([circle, square, few])
        tags = np.repeat([0, 1, 2], [2000, 4000, 3])
        crossings = SectionCrossings(SectionPlane(), points, tags, np.zeros(tags.size))
        assert classify_section(crossings) == {0: "curve", 1: "scatter", 2: "undetermined"}


class TestPairedTrajectories:
    """stochastic_vs_deterministic."""

    def test_zero_noise_tracks_flow(self, rotation):
        paired = stochastic_vs_deterministic(rotation, 0.0, [0.0], horizon=1.0, dt=1e-2, record_every=10)
        assert paired.times.size == 11
        assert paired.deterministic[-1, 0] == pytest.approx(-1.0)
        assert paired.separation.max() <= 1e-12
        assert paired.divergence_time is None
        assert not paired.escaped

    def test_seeded_noise_is_reproducible(self, rotation):
        a = stochastic_vs_deterministic(rotation, 0.1, [0.0], horizon=1.0, dt=1e-2, seed=4)
        b = stochastic_vs_deterministic(rotation, 0.1, [0.0], horizon=1.0, dt=1e-2, seed=4)
        np.testing.assert_array_equal(a.stochastic, b.stochastic)
        assert a.separation.max() > 0

    def test_escape(self):
        paired = stochastic_vs_deterministic(
            nose_hoover_field("V"), 0.01, [0.0, 5.0, 0.0], horizon=1.0, dt=1e-3
        )
        assert paired.escaped

    def test_invalid_arguments(self, rotation):
        with pytest.raises(ArgumentError):
            stochastic_vs_deterministic(rotation, -0.1, [0.0], horizon=1.0)

    def test_axis_seeds(self):
        seeds = axis_seeds(3, (0.5, 1.5))
        assert seeds.shape == (3, 3)
        np.testing.assert_allclose(seeds[:, 1], [0.5, 1.0, 1.5])
        np.testing.assert_array_equal(seeds[:, [0, 2]], 0.0)
        with pytest.raises(ArgumentError):
            axis_seeds(0, (0.5, 1.5))
