import numpy as np
import pytest

import csmfit
from csmfit.energy import (
    EnergyFunction,
    ParameterVector,
    SourceLayout,
    SourceTemplate,
    truth_vector,
)
from csmfit.optimize import (
    FitResult,
    OptimizerConfig,
    export_fit_json,
    global_fit,
    local_fit,
    multi_start,
    source_parts_from_fits,
    standard_fit_per_frequency,
)


def quick_config(seed=0, budget=4000):
    return OptimizerConfig(seed=seed, max_evaluations=budget, maxiter=30)


@pytest.fixture(scope="module")
def case1_setup(case1, case1_csm):
    layout = SourceLayout([SourceTemplate()], case1.grid.f)
    bounds = layout.make_bounds([-1.0, 0.3, 0.0], [1.0, 0.7, 0.0])
    return case1, case1_csm, layout, bounds


class TestConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            OptimizerConfig(max_evaluations=0)
        with pytest.raises(ValueError):
            OptimizerConfig(grad_tol=0.0)
        with pytest.raises(ValueError):
            OptimizerConfig(mode="annealing")
        with pytest.raises(ValueError):
            OptimizerConfig(anneal_fraction=0.0)


class TestGlobalFit:
    def test_determinism(self, case1_setup):
        case1, measured, layout, bounds = case1_setup
        a = global_fit(measured, case1.array, layout, bounds, quick_config(seed=5))
        b = global_fit(measured, case1.array, layout, bounds, quick_config(seed=5))
        assert a.energy == b.energy
        assert np.array_equal(a.params.values, b.params.values)
        assert np.array_equal(a.trace, b.trace)
        c = global_fit(measured, case1.array, layout, bounds, quick_config(seed=6))
        assert not np.array_equal(a.params.values, c.params.values)

    def test_bound_respect_and_energy_consistency(self, case1_setup):
        case1, measured, layout, bounds = case1_setup
        fit = global_fit(measured, case1.array, layout, bounds, quick_config(seed=1))
        assert np.all(fit.params.values >= fit.params.lower)
        assert np.all(fit.params.values <= fit.params.upper)
        energy = EnergyFunction(measured, case1.array, layout)
        again = energy(fit.params.values)
        assert fit.energy == pytest.approx(again, rel=1e-12)

    def test_budget_enforced(self, case1_setup):
        case1, measured, layout, bounds = case1_setup
        fit = global_fit(measured, case1.array, layout, bounds,
                         quick_config(seed=2, budget=500))
        assert fit.evaluations <= 500

    def test_trace_envelope_non_increasing(self, case1_setup):
        case1, measured, layout, bounds = case1_setup
        fit = global_fit(measured, case1.array, layout, bounds, quick_config(seed=3))
        envelope = fit.best_so_far()
        assert np.all(np.diff(envelope) <= 0.0)
        assert envelope[-1] == pytest.approx(min(fit.trace))

    def test_frozen_dimensions_respected(self, case1_setup):
        case1, measured, layout, bounds = case1_setup
        lower, upper = (b.copy() for b in bounds)
        x3 = layout.position_indices(0)[2]
        assert lower[x3] == upper[x3] == 0.0
        fit = global_fit(measured, case1.array, layout, (lower, upper),
                         quick_config(seed=1))
        assert fit.params.values[x3] == 0.0

    def test_infeasible_bounds_rejected(self, case1_setup):
        case1, measured, layout, bounds = case1_setup
        lower, upper = (b.copy() for b in bounds)
        lower[0], upper[0] = 1.0, -1.0
        with pytest.raises(ValueError):
            global_fit(measured, case1.array, layout, (lower, upper), quick_config())

    def test_infinite_free_bounds_rejected(self, case1_setup):
        case1, measured, layout, bounds = case1_setup
        lower, upper = (b.copy() for b in bounds)
        upper[0] = np.inf
        with pytest.raises(ValueError, match="finite"):
            global_fit(measured, case1.array, layout, (lower, upper), quick_config())

    def test_all_frozen_rejected(self, case1_setup):
        case1, measured, layout, _ = case1_setup
        tv = truth_vector(case1)
        with pytest.raises(ValueError, match="frozen"):
            global_fit(measured, case1.array, layout,
                       (tv.values.copy(), tv.values.copy()), quick_config())

    def test_single_frequency_mode(self, case1_setup):
        case1, measured, layout, bounds = case1_setup
        layout1 = SourceLayout([SourceTemplate()], 1)
        bounds1 = layout1.make_bounds([-1.0, 0.3, 0.0], [1.0, 0.7, 0.0])
        sliced = measured.select([7])
        fit = global_fit(sliced, case1.array, layout1, bounds1,
                         quick_config(seed=4, budget=3000))
        assert fit.frequencies.size == 1
        assert fit.energy >= 0.0


class TestLocalFit:
    def test_start_at_truth_converges_immediately(self, case3, case3_csm):
        tv = truth_vector(case3)
        lower = tv.values - 0.1
        upper = tv.values + 0.1
        initial = ParameterVector(tv.values, lower, upper, tv.layout)
        fit = local_fit(case3_csm, case3.array, initial,
                        OptimizerConfig(mode="local", seed=0))
        assert fit.energy <= 1e-16
        assert fit.evaluations < 500
        assert fit.iterate_energies[0] <= 1e-16

    def test_monotone_iterates(self, case3, case3_csm):
        tv = truth_vector(case3)
        values = tv.values.copy()
        layout = tv.layout
        values[layout.position_indices(0)[0]] += 0.02
        values[layout.power_indices(0, "monopole")] -= 2.0
        lower = np.full(layout.n_params, -np.inf)
        upper = np.full(layout.n_params, np.inf)
        x3 = layout.position_indices(0)[2]
        lower[x3] = upper[x3] = 0.0
        initial = ParameterVector(values, lower, upper, layout)
        fit = local_fit(case3_csm, case3.array, initial,
                        OptimizerConfig(mode="local", seed=0))
        assert np.all(np.diff(fit.iterate_energies) <= 1e-12)
        assert fit.energy <= 1e-12

    def test_out_of_bounds_initial_rejected(self, case3):
        tv = truth_vector(case3)
        with pytest.raises(ValueError):
            ParameterVector(tv.values, tv.values + 0.5, tv.values + 1.0, tv.layout)


class TestMultiStart:
    def test_single_start_equals_global_fit(self, case1_setup):
        case1, measured, layout, bounds = case1_setup
        cfg = quick_config(seed=11, budget=2000)
        solo = global_fit(measured, case1.array, layout, bounds, cfg)
        multi = multi_start(measured, case1.array, layout, bounds, cfg, starts=1)
        assert multi.energy == solo.energy
        assert np.array_equal(multi.params.values, solo.params.values)
        assert multi.run_energies == [solo.energy]

    def test_best_of_k_non_increasing(self, case1_setup):
        case1, measured, layout, bounds = case1_setup
        cfg = quick_config(seed=20, budget=1500)
        result = multi_start(measured, case1.array, layout, bounds, cfg, starts=3)
        assert len(result.run_energies) == 3
        prefix_best = np.minimum.accumulate(result.run_energies)
        assert np.all(np.diff(prefix_best) <= 0.0)
        assert result.energy == min(result.run_energies)

    def test_starts_validation(self, case1_setup):
        case1, measured, layout, bounds = case1_setup
        with pytest.raises(ValueError):
            multi_start(measured, case1.array, layout, bounds, quick_config(), starts=0)


class TestStandardPerFrequency:
    def test_structure_and_parts(self, case1, case1_csm):
        templates = [SourceTemplate()]
        layout1 = SourceLayout(templates, 1)
        bounds = layout1.make_bounds([-1.0, 0.3, 0.0], [1.0, 0.7, 0.0])
        cfg = quick_config(seed=3, budget=1200)
        fits = standard_fit_per_frequency(case1_csm, case1.array, templates, bounds, cfg)
        assert len(fits) == case1.grid.f
        assert [f.seed for f in fits] == [3 + i for i in range(case1.grid.f)]
        for fit, f_hz in zip(fits, case1.grid.frequencies):
            assert fit.frequencies.tolist() == [f_hz]
        parts = source_parts_from_fits(fits)
        assert len(parts) == case1.grid.f  # one estimated source per frequency
        assert np.all(parts.powers > 0.0)

    def test_threaded_matches_serial(self, case1, case1_csm):
        templates = [SourceTemplate()]
        layout1 = SourceLayout(templates, 1)
        bounds = layout1.make_bounds([-1.0, 0.3, 0.0], [1.0, 0.7, 0.0])
        cfg = quick_config(seed=3, budget=400)
        sub = case1_csm.select([0, 5, 10])
        serial = standard_fit_per_frequency(sub, case1.array, templates, bounds, cfg, threads=1)
        threaded = standard_fit_per_frequency(sub, case1.array, templates, bounds, cfg, threads=3)
        for a, b in zip(serial, threaded):
            assert a.energy == b.energy
            assert np.array_equal(a.params.values, b.params.values)


class TestExport:
    def test_fit_json(self, case1_setup, tmp_path):
        import json

        case1, measured, layout, bounds = case1_setup
        fit = global_fit(measured, case1.array, layout, bounds,
                         quick_config(seed=8, budget=800))
        path = tmp_path / "fit.json"
        export_fit_json(fit, path)
        doc = json.loads(path.read_text())
        assert doc["seed"] == 8
        assert doc["evaluations"] == fit.evaluations
        assert len(doc["values"]) == layout.n_params
        # batched kernel calls count against the budget but do not add
        # scalar entries to the trace
        assert 0 < len(doc["energy_trace"]) <= fit.evaluations
        assert doc["parameter_names"][0] == "s0:x1"
        assert doc["sources"][0]["monopole_pa2_per_hz"]
        restored = np.asarray(doc["values"])
        assert np.array_equal(restored, fit.params.values)
