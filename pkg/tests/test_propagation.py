import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from csmfit.propagation import (
    dipole_direction,
    dipole_green,
    greens_matrix,
    monopole_green,
    propagation_columns,
    steering_matrix_iv,
    steering_vector_iv,
)
from csmfit.scene import MicArray, line_array

FOUR_PI = 4.0 * np.pi

coords = st.floats(min_value=-3.0, max_value=3.0, allow_nan=False)


def mp_monopole(x, y, k):
    """Arbitrary-precision oracle for the monopole transfer function."""
    with mpmath.workdps(50):
        d = mpmath.sqrt(sum((mpmath.mpf(a) - mpmath.mpf(b)) ** 2 for a, b in zip(x, y)))
        val = mpmath.exp(-1j * mpmath.mpf(k) * d) / (4 * mpmath.pi * d)
        return complex(val)


class TestMonopole:
    def test_zero_frequency_limit(self):
        h = monopole_green([0, 0, 0], [0, 0, 1], 0.0)
        assert h == pytest.approx(1.0 / FOUR_PI, rel=1e-15)
        assert h.imag == 0.0

    def test_magnitude_is_inverse_distance(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            x, y = rng.normal(size=3), rng.normal(size=3)
            k = rng.uniform(0, 500)
            d = np.linalg.norm(x - y)
            if d == 0:
                continue
            assert abs(monopole_green(x, y, k)) == pytest.approx(1 / (FOUR_PI * d), rel=1e-13)

    def test_oracle_value(self):
        # k for 6144 Hz at a = 343 m/s, source-sensor distance 0.5 m
        k = 2 * np.pi * 6144.0 / 343.0
        x, y = [0.5, 0.0, 0.0], [0.5, 0.5, 0.0]
        expected = mp_monopole(x, y, k)
        got = monopole_green(x, y, k)
        assert got == pytest.approx(expected, rel=1e-12)

    def test_singularity(self):
        with pytest.raises(ValueError):
            monopole_green([1, 2, 3], [1, 2, 3], 10.0)

    @given(coords, coords, coords, coords, coords, coords,
           st.floats(min_value=0.0, max_value=600.0))
    @settings(max_examples=100, deadline=None)
    def test_reciprocity_of_magnitude(self, x1, x2, x3, y1, y2, y3, k):
        x, y = np.array([x1, x2, x3]), np.array([y1, y2, y3])
        if np.linalg.norm(x - y) < 1e-6:
            return
        a = abs(monopole_green(x, y, k))
        b = abs(monopole_green(y, x, k))
        assert a == pytest.approx(b, rel=1e-12)


class TestDipoleDirection:
    def test_polar_axis(self):
        for phi in (0.0, 1.0, 5.0):
            assert np.allclose(dipole_direction(0.0, phi), [0, 0, 1], atol=1e-15)

    def test_case6_axes(self):
        assert np.allclose(dipole_direction(np.pi / 2, 0.0), [1, 0, 0], atol=1e-15)
        assert np.allclose(dipole_direction(np.pi / 2, np.pi / 2), [0, 1, 0], atol=1e-15)

    @given(st.floats(-10, 10), st.floats(-10, 10))
    @settings(max_examples=100, deadline=None)
    def test_unit_norm(self, theta, phi):
        assert np.linalg.norm(dipole_direction(theta, phi)) == pytest.approx(1.0, rel=1e-12)


class TestDipole:
    def test_null_plane(self):
        # dipole along x1, observation along x2: exactly zero
        h = dipole_green([0, 1, 0], [0, 0, 0], 50.0, np.pi / 2, 0.0)
        assert h == 0.0

    def test_static_parallel_limit(self):
        # k = 0, axis parallel to the line of sight: 1/(4 pi d^2), real
        d = 2.0
        h = dipole_green([d, 0, 0], [0, 0, 0], 0.0, np.pi / 2, 0.0)
        assert h.imag == 0.0
        assert h.real == pytest.approx(1.0 / (FOUR_PI * d * d), rel=1e-13)

    def test_far_field_dominance(self):
        # k*d = 100: |h| matches the k/(4 pi d) asymptote within 0.01%
        d = 1.0
        k = 100.0
        h = dipole_green([d, 0, 0], [0, 0, 0], k, np.pi / 2, 0.0)
        asymptote = k / (FOUR_PI * d)
        assert abs(h) == pytest.approx(asymptote, rel=1e-4)
        # direct-evaluation oracle: |h| = sqrt(1/d^4 + k^2/d^2)/(4 pi)
        exact = np.hypot(1.0 / d**2, k / d) / FOUR_PI
        assert abs(h) == pytest.approx(exact, rel=1e-13)

    def test_continuity_to_null(self):
        values = []
        for eps in (1e-2, 1e-4, 1e-6):
            # observation direction almost perpendicular to the axis
            h = dipole_green([np.sin(eps), np.cos(eps), 0.0], [0, 0, 0], 30.0,
                             np.pi / 2, 0.0)
            values.append(abs(h))
        assert values[0] > values[1] > values[2]
        assert values[2] < 1e-5

    def test_axis_flip_changes_sign_only(self):
        x, y, k = [0.3, 0.7, 0.1], [0.0, 0.0, 0.0], 77.0
        h = dipole_green(x, y, k, 0.4, 1.1)
        h_flip = dipole_green(x, y, k, np.pi - 0.4, 1.1 + np.pi)
        assert h_flip == pytest.approx(-h, rel=1e-12)


class TestGreensMatrix:
    def test_matches_scalar_function(self):
        array = line_array(4)
        pos = np.array([[0.2, 0.7, 0.1], [-0.1, 0.9, 0.0]])
        k = 31.0
        h_mat = greens_matrix(array, pos, k)
        for m in range(4):
            for n in range(2):
                assert h_mat[m, n] == pytest.approx(
                    monopole_green(array.positions[m], pos[n], k), rel=1e-14
                )

    def test_case3_column_magnitudes(self, case3):
        k = float(case3.grid.wavenumbers[0])
        h = greens_matrix(case3.array, case3.sources[0].position[None, :], k)
        assert h.shape == (11, 1)
        d = np.linalg.norm(case3.array.positions - case3.sources[0].position, axis=1)
        assert np.allclose(np.abs(h[:, 0]), 1.0 / (FOUR_PI * d), rtol=1e-13)

    def test_source_permutation_permutes_columns(self):
        array = line_array(4)
        pos = np.array([[0.2, 0.7, 0.1], [-0.1, 0.9, 0.0], [0.4, 0.4, 0.2]])
        k = 12.0
        h = greens_matrix(array, pos, k)
        h_perm = greens_matrix(array, pos[[2, 0, 1]], k)
        assert np.array_equal(h_perm, h[:, [2, 0, 1]])

    def test_singularity_reports_indices(self):
        array = line_array(3)  # mics at x1 = -0.5, 0, 0.5
        with pytest.raises(ValueError, match="source 1 .* microphone 2"):
            greens_matrix(array, np.array([[0, 1, 0], [0.5, 0, 0]]), 5.0)

    def test_dipole_needs_angles(self):
        with pytest.raises(ValueError):
            greens_matrix(line_array(3), np.array([[0, 1, 0]]), 5.0, pole="dipole")

    def test_dipole_main_lobe_along_x3(self):
        # mics at equal distance, one aligned with the x3 axis
        mics = MicArray(
            [[0.0, 0.0, 1.0], [0.0, 1.0, 0.0], [np.sqrt(0.5), np.sqrt(0.5), 0.0]]
        )
        h = greens_matrix(mics, np.array([[0.0, 0.0, 0.0]]), 40.0, pole="dipole",
                          theta=[0.0], phi=[0.0])
        mags = np.abs(h[:, 0])
        assert mags[0] == mags.max()
        assert mags[1] == pytest.approx(0.0, abs=1e-15)


class TestPropagationColumns:
    def test_two_mic_hand_case(self):
        # h = [1, j], q = 1 -> C = [[1, -j], [j, 1]]
        h = np.array([[1.0], [1.0j]])
        t = propagation_columns(h)
        csm = (t @ np.array([1.0])).reshape(2, 2)
        expected = np.array([[1.0, -1.0j], [1.0j, 1.0]])
        assert np.array_equal(csm, expected)

    def test_reshape_is_outer_product(self):
        rng = np.random.default_rng(5)
        h = rng.normal(size=(4, 3)) + 1j * rng.normal(size=(4, 3))
        t = propagation_columns(h)
        assert t.shape == (16, 3)
        for n in range(3):
            outer = np.outer(h[:, n], h[:, n].conj())
            mat = t[:, n].reshape(4, 4)
            assert np.allclose(mat, outer, rtol=1e-14, atol=1e-14)
            assert np.array_equal(mat, mat.conj().T)
            assert np.trace(mat).real == pytest.approx(np.sum(np.abs(h[:, n]) ** 2))

    def test_rank_one_psd(self):
        rng = np.random.default_rng(7)
        h = rng.normal(size=(6, 2)) + 1j * rng.normal(size=(6, 2))
        t = propagation_columns(h)
        for n in range(2):
            eigs = np.linalg.eigvalsh(t[:, n].reshape(6, 6))
            norm_sq = np.sum(np.abs(h[:, n]) ** 2)
            assert eigs[-1] == pytest.approx(norm_sq, rel=1e-10)
            assert np.all(np.abs(eigs[:-1]) <= 1e-10 * norm_sq)

    def test_identical_sources_identical_columns(self):
        array = line_array(4)
        pos = np.array([[0.1, 0.8, 0.0], [0.1, 0.8, 0.0]])
        t = propagation_columns(greens_matrix(array, pos, 9.0))
        assert np.array_equal(t[:, 0], t[:, 1])


class TestSteering:
    def test_equidistant_magnitudes(self):
        # grid point equidistant from both mics: |w_m| = 1/M
        array = MicArray([[-0.5, 0.0, 0.0], [0.5, 0.0, 0.0]])
        w = steering_vector_iv([0.0, 1.0, 0.0], array, 25.0)
        assert np.allclose(np.abs(w), 1.0 / array.m, rtol=1e-13)

    def test_normalization_identity(self):
        array = line_array(7)
        point = np.array([0.3, 0.6, 0.1])
        r = np.linalg.norm(array.positions - point, axis=1)
        w = steering_vector_iv(point, array, 55.0)
        total = np.sum(np.abs(w) ** 2 * r**2) * (array.m * np.sum(r**-2.0))
        assert total == pytest.approx(array.m, rel=1e-12)

    def test_output_at_source_real_positive(self, case3):
        k = float(case3.grid.wavenumbers[5])
        pos = case3.sources[0].position
        h = greens_matrix(case3.array, pos[None, :], k)[:, 0]
        w = steering_vector_iv(pos, case3.array, k)
        value = np.vdot(w, 4.0 * np.outer(h, h.conj()) @ w)
        assert abs(value.imag) <= 1e-14 * value.real
        assert value.real > 0.0

    def test_psf_peaks_at_source(self, case3):
        # exhaustive scan over the focus line through the source
        k = float(case3.grid.wavenumbers[10])
        pos = case3.sources[0].position
        h = greens_matrix(case3.array, pos[None, :], k)[:, 0]
        x1 = np.arange(-1.0, 1.0 + 1e-9, 0.01)
        points = np.column_stack([x1, np.full_like(x1, 0.5), np.zeros_like(x1)])
        w = steering_matrix_iv(points, case3.array, k)
        response = np.abs(w.conj() @ h) ** 2
        assert x1[int(np.argmax(response))] == pytest.approx(0.5, abs=1e-9)

    def test_matrix_matches_vector(self):
        array = line_array(5)
        points = np.array([[0.1, 0.5, 0.0], [-0.4, 0.8, 0.2]])
        w_mat = steering_matrix_iv(points, array, 33.0)
        for p in range(2):
            assert np.allclose(w_mat[p], steering_vector_iv(points[p], array, 33.0),
                               rtol=1e-14)

    def test_coincident_point_rejected(self):
        array = line_array(3)
        with pytest.raises(ValueError):
            steering_vector_iv([0.0, 0.0, 0.0], array, 10.0)
