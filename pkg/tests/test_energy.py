import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import csmfit
from csmfit.baseline import FocusGrid
from csmfit.csm import CsmSet, synthesize_csm, upper_tri_pairs
from csmfit.energy import (
    EnergyFunction,
    ParameterVector,
    SourceLayout,
    SourceTemplate,
    broadband_energy,
    find_local_maxima,
    find_local_minima,
    psf,
    slice_landscape,
    standard_energy,
    truth_vector,
)
from csmfit.scene import (
    FrequencyGrid,
    MicArray,
    Scene,
    SourceObject,
    line_array,
    power_from_db,
)

from conftest import freq_index


def empty_vector(n_freqs: int) -> ParameterVector:
    layout = SourceLayout([], n_freqs)
    return ParameterVector(np.empty(0), np.empty(0), np.empty(0), layout)


class TestLayoutPacking:
    def test_layout_structure(self):
        layout = SourceLayout(
            [SourceTemplate(monopole=True, dipole=True), SourceTemplate()], 4
        )
        # geometry first: [x1 x2 x3 theta phi] + [x1 x2 x3], then powers
        assert layout.n_geometry == 8
        assert layout.n_params == 8 + 2 * 4 + 4
        assert layout.names[0] == "s0:x1"
        assert layout.names[3] == "s0:theta"
        assert layout.names[8] == "s0:monopole:L0"
        assert np.array_equal(layout.position_indices(1), [5, 6, 7])

    def test_pack_unpack_round_trip(self, case6):
        tv = truth_vector(case6)
        sources = tv.sources()
        repacked = tv.layout.pack(sources)
        assert np.array_equal(repacked, tv.values)

    def test_silent_pole_packs_to_minus_inf(self, case6):
        tv = truth_vector(case6)
        rows = tv.layout.power_indices(1, "monopole")
        assert np.all(tv.values[rows] == -np.inf)
        # and decodes back to exactly zero power
        assert np.all(tv.sources()[1].monopole == 0.0)

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=30, deadline=None)
    def test_random_round_trip(self, seed):
        rng = np.random.default_rng(seed)
        templates = []
        for _ in range(rng.integers(1, 4)):
            kind = rng.integers(0, 3)
            templates.append(
                SourceTemplate(monopole=kind != 1, dipole=kind != 0)
            )
        layout = SourceLayout(templates, int(rng.integers(1, 5)))
        values = rng.normal(size=layout.n_params)
        sources = layout.unpack(values)
        # positions and powers survive; angles only up to canonicalization
        repacked = layout.pack(sources)
        for n in range(layout.n_sources):
            idx = layout.position_indices(n)
            assert np.array_equal(repacked[idx], values[idx])
            for pole in ("monopole", "dipole"):
                if getattr(templates[n], pole):
                    rows = layout.power_indices(n, pole)
                    assert np.allclose(repacked[rows], values[rows], rtol=1e-12)

    def test_bounds_validation(self):
        layout = SourceLayout([SourceTemplate()], 2)
        lo, hi = layout.make_bounds([-1, -1, 0], [1, 1, 0])
        values = np.zeros(layout.n_params)
        values[3:] = lo[3]
        ParameterVector(values, lo, hi, layout)  # fine
        bad = values.copy()
        bad[0] = 2.0
        with pytest.raises(ValueError, match="s0:x1"):
            ParameterVector(bad, lo, hi, layout)

    def test_swap_sources(self, case2):
        tv = truth_vector(case2)
        swapped = tv.swap_sources(0, 1)
        assert np.allclose(swapped.sources()[0].position, case2.sources[1].position)
        assert np.array_equal(swapped.swap_sources(0, 1).values, tv.values)


class TestStandardEnergy:
    def test_zero_at_truth(self, case1, case1_csm):
        tv = truth_vector(case1)
        fi = freq_index(case1, 6144.0)
        assert standard_energy(tv, case1_csm, case1.array, fi) <= 1e-18

    def test_empty_model_equals_measured_power(self, case3, case3_csm):
        fi = 4
        expected = float(np.sum(np.abs(case3_csm.pair_entries()[fi]) ** 2))
        got = standard_energy(empty_vector(case3.grid.f), case3_csm, case3.array, fi)
        assert got == pytest.approx(expected, rel=1e-14)

    def test_two_mic_hand_case(self):
        # M = 2: single off-diagonal entry, difference computed by hand
        array = MicArray([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
        grid = FrequencyGrid([343.0])  # k = 2 pi
        source = SourceObject([0.0, 2.0, 0.0], monopole=[1.0])
        scene = Scene(array, grid, (source,))
        measured = synthesize_csm(scene)
        layout = SourceLayout([SourceTemplate()], 1)
        values = layout.pack([SourceObject([0.5, 1.5, 0.0], monopole=[2.0])])
        full = np.full(layout.n_params, np.inf)
        params = ParameterVector(values, -full, full, layout)
        # oracle with plain python complex arithmetic
        k = 2 * np.pi
        def h(x, y):
            import math
            d = math.dist(x, y)
            return complex(math.cos(-k * d), math.sin(-k * d)) / (4 * math.pi * d)
        c_meas = 1.0 * h((0, 0, 0), (0, 2, 0)) * h((1, 0, 0), (0, 2, 0)).conjugate()
        c_mod = 2.0 * h((0, 0, 0), (0.5, 1.5, 0)) * h((1, 0, 0), (0.5, 1.5, 0)).conjugate()
        # pairs are (i > j): entry (1, 0) = conj of (0, 1)
        expected = abs(c_mod.conjugate() - c_meas.conjugate()) ** 2
        got = standard_energy(params, measured, array, 0)
        assert got == pytest.approx(expected, rel=1e-12)

    def test_invalid_f_index(self, case3, case3_csm):
        tv = truth_vector(case3)
        with pytest.raises(ValueError):
            standard_energy(tv, case3_csm, case3.array, 99)

    def test_decode_length_check(self, case3, case3_csm):
        energy = EnergyFunction(case3_csm, case3.array, truth_vector(case3).layout)
        with pytest.raises(ValueError):
            energy(np.zeros(3))


class TestBroadbandEnergy:
    @pytest.mark.parametrize("case_id", ["case1", "case2", "case3", "case4", "case6"])
    def test_zero_at_truth(self, case_id):
        scene = csmfit.builtin_case(case_id)
        measured = synthesize_csm(scene)
        assert broadband_energy(truth_vector(scene), measured, scene.array) <= 1e-18

    @pytest.mark.parametrize("case_id", ["case1", "case2", "case3", "case4", "case6"])
    def test_empty_model_is_one(self, case_id):
        scene = csmfit.builtin_case(case_id)
        measured = synthesize_csm(scene)
        e = broadband_energy(empty_vector(scene.grid.f), measured, scene.array)
        assert e == pytest.approx(1.0, abs=1e-12)

    def test_scaling_invariance(self, case3, case3_csm):
        # scaling measured and modeled CSM at one frequency leaves E unchanged
        alpha, fi = 7.3, 11
        tv = truth_vector(case3)
        perturbed = tv.values.copy()
        perturbed[tv.layout.position_indices(0)[0]] += 0.07  # nonzero energy
        base = broadband_energy(tv.replace_values(perturbed), case3_csm, case3.array)
        scaled_data = case3_csm.data.copy()
        scaled_data[fi] *= alpha
        scaled_csm = CsmSet(scaled_data, case3_csm.grid)
        scaled_values = perturbed.copy()
        scaled_values[tv.layout.power_indices(0, "monopole")[fi]] += np.log10(alpha)
        scaled = broadband_energy(
            tv.replace_values(scaled_values), scaled_csm, case3.array
        )
        assert scaled == pytest.approx(base, rel=1e-12)

    def test_cross_identity_with_standard(self, case4, case4_csm):
        # broadband == mean over f of standard(f) / (n_pairs * normalizer(f))
        tv = truth_vector(case4)
        work = tv.values.copy()
        work[tv.layout.position_indices(1)[1]] += 0.04
        params = tv.replace_values(work)
        pairs = case4_csm.pair_entries()
        n_pair = pairs.shape[1]
        normalizer = np.mean(np.abs(pairs) ** 2, axis=1)
        standards = np.array([
            standard_energy(params, case4_csm, case4.array, fi)
            for fi in range(case4_csm.f)
        ])
        expected = float(np.mean(standards / (n_pair * normalizer)))
        got = broadband_energy(params, case4_csm, case4.array)
        assert got == pytest.approx(expected, rel=1e-12)

    def test_all_zero_frequency_rejected(self, case3):
        data = np.zeros((2, 3, 3), dtype=complex)
        data[0] = np.eye(3)  # nonzero diagonal only; off-diagonals all zero
        grid = FrequencyGrid([100.0, 200.0])
        measured = CsmSet(data, grid)
        layout = SourceLayout([SourceTemplate()], 2)
        with pytest.raises(ValueError, match="all-zero"):
            EnergyFunction(measured, line_array(3), layout)

    def test_mic_count_mismatch(self, case3_csm):
        layout = SourceLayout([SourceTemplate()], case3_csm.f)
        with pytest.raises(ValueError, match="microphones"):
            EnergyFunction(case3_csm, line_array(5), layout)


class TestInvariances:
    def test_permutation_bit_identical(self, case2, case2_csm):
        tv = truth_vector(case2)
        swapped = tv.swap_sources(0, 1)
        fi = freq_index(case2, 6144.0)
        # evaluate away from the minimum so the energies are nonzero
        for pv in (tv, swapped):
            assert pv.values.shape == tv.values.shape
        work = tv.values.copy()
        work[tv.layout.position_indices(0)[0]] += 0.03
        moved = tv.replace_values(work)
        moved_swapped = moved.swap_sources(0, 1)
        e1 = standard_energy(moved, case2_csm, case2.array, fi)
        e2 = standard_energy(moved_swapped, case2_csm, case2.array, fi)
        assert e1 == e2  # bit-identical
        b1 = broadband_energy(moved, case2_csm, case2.array)
        b2 = broadband_energy(moved_swapped, case2_csm, case2.array)
        assert b1 == b2

    def test_silent_source_neutrality(self, case3, case3_csm):
        tv = truth_vector(case3)
        work = tv.values.copy()
        work[0] += 0.05
        base = broadband_energy(tv.replace_values(work), case3_csm, case3.array)
        base_std = standard_energy(tv.replace_values(work), case3_csm, case3.array, 3)
        # append an estimated source with q = 0 at an arbitrary position
        layout2 = SourceLayout([SourceTemplate(), SourceTemplate()], case3.grid.f)
        sources = tv.layout.unpack(work)
        silent = SourceObject([0.2, 0.9, 0.0], monopole=np.zeros(case3.grid.f))
        values2 = layout2.pack(sources + [silent])
        full = np.full(layout2.n_params, np.inf)
        params2 = ParameterVector(values2, -full, full, layout2)
        assert broadband_energy(params2, case3_csm, case3.array) == base
        assert standard_energy(params2, case3_csm, case3.array, 3) == base_std


class TestSliceLandscape:
    def test_case1a_minimum_at_truth(self, case1, case1_csm):
        tv = truth_vector(case1)
        fi = freq_index(case1, 6144.0)
        x1_axis = ("s0:x1", np.arange(0.3, 0.7 + 1e-9, 0.01))
        q_axis = ("s0:q", np.logspace(-1, 1, 21))  # includes q = 1 exactly
        landscape = slice_landscape(
            case1_csm, case1.array, tv, x1_axis, q_axis, f_index=fi
        )
        assert landscape.energies.shape == (41, 21)
        amin = np.unravel_index(np.argmin(landscape.energies), (41, 21))
        assert landscape.axis_values[0][amin[0]] == pytest.approx(0.5, abs=1e-12)
        assert landscape.axis_values[1][amin[1]] == pytest.approx(1.0, rel=1e-12)
        assert landscape.energies[amin] <= 1e-18

    def test_truth_row_contains_global_minimum(self, case1, case1_csm):
        tv = truth_vector(case1)
        axis = ("s0:x2", np.arange(0.4, 0.6 + 1e-9, 0.01))
        landscape = slice_landscape(case1_csm, case1.array, tv, axis)
        assert landscape.energies.shape == (21,)
        assert landscape.energies.min() <= 1e-18
        assert landscape.axis_values[0][np.argmin(landscape.energies)] == pytest.approx(0.5)

    def test_axis_overlap_rejected(self, case1, case1_csm):
        tv = truth_vector(case1)
        with pytest.raises(ValueError, match="overlap"):
            slice_landscape(
                case1_csm, case1.array, tv,
                ("s0:x1", [0.4, 0.5]), ("s0:x1", [0.4, 0.5]),
            )

    def test_unknown_axis_rejected(self, case1, case1_csm):
        tv = truth_vector(case1)
        with pytest.raises(ValueError):
            slice_landscape(case1_csm, case1.array, tv, ("s0:bogus", [1.0]))

    def test_csv_round_trip(self, case1, case1_csm, tmp_path):
        tv = truth_vector(case1)
        landscape = slice_landscape(
            case1_csm, case1.array, tv,
            ("s0:x1", [0.4, 0.5, 0.6]), ("s0:x2", [0.45, 0.55]),
        )
        path = tmp_path / "slice.csv"
        landscape.to_csv(path)
        lines = path.read_text().splitlines()
        assert lines[1] == "# mode: broadband"
        assert "# axis1: s0:x1" in lines
        data = np.array([
            [float(v) for v in line.split(",")]
            for line in lines if not line.startswith("#")
        ])
        assert np.allclose(data, landscape.energies, rtol=1e-15)


class TestLocalExtrema:
    def test_1d(self):
        values = np.array([3.0, 1.0, 2.0, 0.5, 4.0])
        mask = find_local_minima(values)
        assert list(np.flatnonzero(mask)) == [1, 3]

    def test_1d_boundary(self):
        # boundary cells count when smaller than their one existing neighbor
        assert list(np.flatnonzero(find_local_minima(np.array([0.0, 1.0, 0.5])))) == [0, 2]

    def test_2d_eight_neighborhood(self):
        grid = np.full((5, 5), 10.0)
        grid[2, 2] = 1.0
        grid[0, 4] = 0.5
        mask = find_local_minima(grid)
        assert mask[2, 2] and mask[0, 4]
        assert mask.sum() == 2

    def test_plateau_not_strict_minimum(self):
        grid = np.zeros((3, 3))
        assert find_local_minima(grid).sum() == 0

    def test_maxima(self):
        values = np.array([0.0, 2.0, 1.0])
        assert list(np.flatnonzero(find_local_maxima(values))) == [1]


class TestPsf:
    def test_unity_at_source(self, case1):
        grid = FocusGrid((0.5, 0.5, 1.0), (0.5, 0.5, 1.0))  # exactly the source point
        k = float(case1.grid.wavenumbers[5])
        value = psf(case1.array, [0.5, 0.5, 0.0], grid, k)
        assert value.reshape(-1)[0] == pytest.approx(1.0, rel=1e-12)

    def test_averaged_requires_flag(self, case1):
        grid = FocusGrid((-0.5, 0.5, 0.5), (0.5, 0.5, 1.0))
        with pytest.raises(ValueError):
            psf(case1.array, [0.5, 0.5, 0.0], grid, case1.grid.wavenumbers)

    def test_averaged_smooths_secondary_maxima(self, case1):
        # frequency-averaged PSF has a lower secondary maximum than any
        # single frequency's PSF (exhaustive scan over the focus line)
        grid = FocusGrid((-1.0, 1.0, 0.01), (0.5, 0.5, 1.0))
        source = [0.5, 0.5, 0.0]
        ks = case1.grid.wavenumbers

        def secondary(values):
            flat = values.reshape(-1)
            mask = find_local_maxima(flat)
            peaks = np.sort(flat[mask])
            return peaks[-2] if peaks.size > 1 else 0.0

        singles = [secondary(psf(case1.array, source, grid, k)) for k in ks]
        averaged = secondary(psf(case1.array, source, grid, ks, averaged=True))
        assert averaged < min(singles)
