"""Global and local minimization of the fitting energies.

The global path runs generalized simulated annealing (scipy's dual
annealing, which interleaves local refinement from the current best point)
on the broadband energy over the free entries of a parameter vector,
followed by a bounded quasi-Newton polish. The local path is L-BFGS-B with
central-difference gradients. Parameters whose lower and upper bounds
coincide are frozen and excluded from the search space. All runs are
deterministic for a fixed seed, and every energy evaluation (including
finite-difference probes) counts against ``max_evaluations``.
"""

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import dual_annealing, minimize, nnls

from .baseline import SourcePartSet
from .csm import CsmSet
from .energy import EnergyFunction, ParameterVector, SourceLayout, SourceTemplate
from .scene import MicArray


@dataclass(frozen=True)
class OptimizerConfig:
    """Hyper-parameters for both optimizer modes.

    Global defaults are the conventional generalized-simulated-annealing
    values (initial temperature 5230, visiting parameter 2.62, acceptance
    parameter -5.0, restart temperature ratio 2e-5). Local settings pin the
    central-difference steps (relative 1e-6 on positions/angles, 1e-4 on
    log-powers) and the convergence tolerances on gradient norm, step
    floor, and energy decrease.
    """

    mode: str = "global"
    seed: int = 0
    max_evaluations: int = 200_000
    # global: generalized simulated annealing
    maxiter: int = 1000
    initial_temp: float = 5230.0
    restart_temp_ratio: float = 2e-5
    visit: float = 2.62
    accept: float = -5.0
    polish: bool = True
    anneal_fraction: float = 0.9  # share of the budget before the final polish
    # local: bounded quasi-Newton with central differences
    fd_rel_step_geometry: float = 1e-6
    fd_rel_step_power: float = 1e-4
    min_step: float = 1e-12
    grad_tol: float = 1e-12
    energy_tol: float = 1e-18
    local_maxiter: int = 20_000
    round_maxiter: int = 250  # per-round descent cap between projections
    # conditional-power projection between descent rounds; counters the
    # exponentially flat energy when amplitudes sit orders of magnitude off
    # (pure descent stalls there because the log-power gradient scales with q)
    power_projection: bool = True
    projection_rounds: int = 8
    # descent rounds stop early below this energy (exact synthetic fits
    # bottom out near the arithmetic floor anyway)
    energy_floor: float = 1e-16
    # position coordinates are rescaled by ln(10)/k_max during descent so
    # their curvature matches the log-power block; 0 = automatic
    geometry_scale: float = 0.0

    def __post_init__(self):
        if self.mode not in ("global", "local"):
            raise ValueError(f"unknown optimizer mode {self.mode!r}")
        if self.max_evaluations < 1:
            raise ValueError("max_evaluations must be >= 1")
        for name in ("fd_rel_step_geometry", "fd_rel_step_power", "min_step",
                     "grad_tol", "energy_tol", "initial_temp", "restart_temp_ratio",
                     "visit"):
            if not getattr(self, name) > 0.0:
                raise ValueError(f"{name} must be > 0")
        if not 0.0 < self.anneal_fraction <= 1.0:
            raise ValueError("anneal_fraction must be in (0, 1]")


@dataclass
class FitResult:
    """Outcome of one fit: best point, bookkeeping, and decoded sources."""

    params: ParameterVector
    energy: float
    evaluations: int
    trace: np.ndarray  # energy of every counted evaluation, in call order
    sources: list
    frequencies: np.ndarray
    seed: int
    config: OptimizerConfig
    run_energies: Optional[list] = None  # multi-start: final energy per run
    iterate_energies: Optional[np.ndarray] = None  # local: accepted-step energies

    def best_so_far(self) -> np.ndarray:
        """Non-increasing envelope of the evaluation trace."""
        return np.minimum.accumulate(self.trace)


class _BudgetExceeded(Exception):
    pass


class _CountingEnergy:
    """Records every evaluation, tracks the best point, enforces the budget."""

    def __init__(self, fn, limit: int):
        self.fn = fn
        self.limit = int(limit)
        self.count = 0
        self.trace = []
        self.best_x = None
        self.best_f = np.inf

    def __call__(self, x):
        if self.count >= self.limit:
            raise _BudgetExceeded
        f = self.fn(x)
        self.count += 1
        self.trace.append(f)
        if f < self.best_f:
            self.best_f = f
            self.best_x = np.array(x, dtype=float)
        return f


class _Embedding:
    """Maps between the full parameter vector and its free entries."""

    def __init__(self, lower: np.ndarray, upper: np.ndarray):
        if np.any(lower > upper):
            raise ValueError("infeasible bounds: lower > upper")
        self.lower = lower
        self.upper = upper
        self.free = upper > lower
        self.base = np.where(self.free, 0.0, lower)

    @property
    def n_free(self) -> int:
        return int(np.count_nonzero(self.free))

    def expand(self, x_free: np.ndarray) -> np.ndarray:
        full = self.base.copy()
        full[self.free] = x_free
        return full

    def restrict(self, full: np.ndarray) -> np.ndarray:
        return np.asarray(full, dtype=float)[self.free]

    def free_bounds(self) -> list:
        return list(zip(self.lower[self.free], self.upper[self.free]))


def _fd_steps(layout: SourceLayout, config: OptimizerConfig, free_mask: np.ndarray) -> np.ndarray:
    rel = np.where(layout.geometry_mask(), config.fd_rel_step_geometry,
                   config.fd_rel_step_power)
    return rel[free_mask]


class _PowerProjector:
    """Analytic conditional power optimum for fixed source geometry.

    For fixed positions and angles the modeled CSM is linear in the pole
    powers, so the per-frequency optimum solves a small nonnegative
    least-squares problem over the off-diagonal residuals. Projecting the
    log-power entries there before each local refinement turns the
    annealing chain into an effective search over the geometry variables.
    Basis evaluations are charged to the evaluation budget (one per source
    pole).
    """

    def __init__(self, energy_fn: EnergyFunction, embedding: "_Embedding",
                 counting: "_CountingEnergy"):
        self.energy_fn = energy_fn
        self.embedding = embedding
        self.counting = counting
        layout = energy_fn.layout
        self.layout = layout
        n_freq = energy_fn._n_freq
        f_sel = slice(None) if energy_fn.f_index is None else [energy_fn.f_index]
        self.pole_rows = []  # packed parameter rows per (source, pole), (F_used,)
        self.pole_ids = []  # (source, pole)
        for n in range(layout.n_sources):
            for pole in ("monopole", "dipole"):
                if (n, pole) in layout._power_rows:
                    self.pole_ids.append((n, pole))
                    self.pole_rows.append(layout._power_rows[(n, pole)][f_sel])
        self.n_freq = n_freq
        self.c_meas = energy_fn.measured_pairs

    def __call__(self, x_free: np.ndarray) -> np.ndarray:
        emb = self.embedding
        full = emb.expand(np.asarray(x_free, dtype=float))
        ef = self.energy_fn
        c_meas = self.c_meas
        # Basis: modeled pair entries of each pole at unit power.
        bases = []
        for (src, pole) in self.pole_ids:
            probe = full.copy()
            for s, p in self.pole_ids:
                rows = self.layout._power_rows[(s, p)]
                probe[rows] = 0.0 if (s, p) == (src, pole) else -np.inf
            bases.append(ef.model_pair_entries(probe))
            self.counting.count += 1
        if not bases:
            return np.asarray(x_free, dtype=float)
        new_full = full.copy()
        for fi in range(self.n_freq):
            cols = []
            fixed = np.zeros(c_meas.shape[1], dtype=complex)
            free_ids = []
            for k, (src, pole) in enumerate(self.pole_ids):
                row = self.pole_rows[k][fi]
                if emb.free[row]:
                    free_ids.append(k)
                    cols.append(bases[k][fi])
                else:
                    fixed += 10.0 ** emb.lower[row] * bases[k][fi]
            if not free_ids:
                continue
            target = c_meas[fi] - fixed
            a_mat = np.concatenate(
                [np.stack([c.real for c in cols], axis=1),
                 np.stack([c.imag for c in cols], axis=1)], axis=0
            )
            y = np.concatenate([target.real, target.imag])
            q_opt, _ = nnls(a_mat, y)
            for pos, k in enumerate(free_ids):
                row = self.pole_rows[k][fi]
                l_val = np.log10(q_opt[pos]) if q_opt[pos] > 0.0 else -np.inf
                floor = emb.lower[row] if np.isfinite(emb.lower[row]) else -20.0
                new_full[row] = min(max(l_val, floor), emb.upper[row])
        return emb.restrict(new_full)


def _projected_search_method(fun, x0, args=(), bounds=None, projector=None,
                             inner=None, **unused):
    """Custom local-search method: project powers, then bounded L-BFGS-B."""
    x = projector(np.asarray(x0, dtype=float))
    return minimize(fun, x, method="L-BFGS-B", bounds=bounds, options=dict(inner or {}))


def _central_diff_jac(counting, rel_steps: np.ndarray, min_step: float):
    """Plain per-coordinate central differences (reference implementation)."""

    def jac(x):
        grad = np.empty(x.size)
        for i in range(x.size):
            h = max(rel_steps[i] * max(abs(x[i]), 1.0), min_step)
            step = np.zeros_like(x)
            step[i] = h
            grad[i] = (counting(x + step) - counting(x - step)) / (2.0 * h)
        return grad

    return jac


class _BatchedCentralJac:
    """Central-difference gradient exploiting per-frequency separability.

    Geometry entries are probed one coordinate at a time. The log-power
    entries of one (source, pole) block only influence their own
    frequency's residual sum, so the whole block's central differences come
    out of two batched evaluations of the per-frequency sums; the values
    equal the per-coordinate differences while costing two kernel calls per
    pole instead of two per packed power entry.
    """

    def __init__(self, energy_fn: EnergyFunction, embedding: "_Embedding",
                 layout: SourceLayout, counting: "_CountingEnergy",
                 config: OptimizerConfig):
        self.energy_fn = energy_fn
        self.embedding = embedding
        self.counting = counting
        self.min_step = config.min_step
        free = embedding.free
        free_pos = np.cumsum(free) - 1
        geom = layout.geometry_mask()
        self.geom_free = np.flatnonzero(geom[free])
        self.geom_rel = np.full(self.geom_free.size, config.fd_rel_step_geometry)
        self.power_rel = config.fd_rel_step_power
        f_sel = slice(None) if energy_fn.f_index is None else [energy_fn.f_index]
        weights = energy_fn._weights
        if weights is None:
            weights = np.ones(energy_fn._n_freq)
        self.weights = weights
        # per (source, pole): free-vector indices and their frequency index
        self.groups = []
        for (s, pole), rows in layout._power_rows.items():
            rows = rows[f_sel]
            f_ids = np.flatnonzero(free[rows])
            if f_ids.size:
                self.groups.append((free_pos[rows[f_ids]], f_ids))

    def __call__(self, x_free: np.ndarray) -> np.ndarray:
        counting = self.counting
        emb = self.embedding
        grad = np.zeros(x_free.size)
        for k, i in enumerate(self.geom_free):
            h = max(self.geom_rel[k] * max(abs(x_free[i]), 1.0), self.min_step)
            probe = x_free.copy()
            probe[i] = x_free[i] + h
            f_plus = counting(probe)
            probe[i] = x_free[i] - h
            f_minus = counting(probe)
            grad[i] = (f_plus - f_minus) / (2.0 * h)
        for idx, f_ids in self.groups:
            h = np.maximum(self.power_rel * np.maximum(np.abs(x_free[idx]), 1.0),
                           self.min_step)
            for sign in (1.0, -1.0):
                probe = x_free.copy()
                probe[idx] = x_free[idx] + sign * h
                if counting.count >= counting.limit:
                    raise _BudgetExceeded
                sums = self.energy_fn.residual_sums(emb.expand(probe))
                counting.count += 1
                if sign > 0:
                    s_plus = sums[f_ids]
                else:
                    s_minus = sums[f_ids]
            grad[idx] = self.weights[f_ids] * (s_plus - s_minus) / (2.0 * h)
        return grad


def _clip_to_bounds(x: np.ndarray, bounds: list) -> np.ndarray:
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])
    return np.clip(x, lo, hi)


def _polish(counting, x_free, embedding, layout, config, projector=None,
            energy_fn=None):
    """Bounded quasi-Newton refinement; silently stops on budget exhaustion."""
    if energy_fn is not None:
        jac = _BatchedCentralJac(energy_fn, embedding, layout, counting, config)
        scale = _descent_scale(layout, energy_fn, config, embedding.free)
    else:
        rel_steps = _fd_steps(layout, config, embedding.free)
        jac = _central_diff_jac(counting, rel_steps, config.min_step)
        scale = np.ones(embedding.n_free)
    bounds_scaled = [
        (lo / s if np.isfinite(lo) else -np.inf, hi / s if np.isfinite(hi) else np.inf)
        for (lo, hi), s in zip(embedding.free_bounds(), scale)
    ]
    try:
        if projector is not None:
            x_free = projector(x_free)
        minimize(
            lambda u: counting(u * scale), x_free / scale, method="L-BFGS-B",
            jac=lambda u: scale * jac(u * scale),
            bounds=bounds_scaled,
            options={
                "maxiter": config.local_maxiter,
                "ftol": config.energy_tol,
                "gtol": config.grad_tol,
                "maxfun": max(config.max_evaluations, 1),
                "maxls": 60,
                "maxcor": 25,
            },
        )
    except _BudgetExceeded:
        pass


def _make_result(energy_fn: EnergyFunction, counting: _CountingEnergy,
                 embedding: _Embedding, layout: SourceLayout, measured: CsmSet,
                 config: OptimizerConfig, seed: int,
                 iterate_energies=None) -> FitResult:
    # finite-difference probes may sit a half-step outside the bounds;
    # report the clipped point and its re-evaluated energy
    best_free = np.clip(counting.best_x, embedding.lower[embedding.free],
                        embedding.upper[embedding.free])
    best_full = embedding.expand(best_free)
    final_energy = energy_fn(best_full)
    params = ParameterVector(best_full, embedding.lower, embedding.upper, layout)
    return FitResult(
        params=params,
        energy=final_energy,
        evaluations=counting.count,
        trace=np.asarray(counting.trace),
        sources=layout.unpack(best_full),
        frequencies=measured.grid.frequencies.copy(),
        seed=seed,
        config=config,
        iterate_energies=iterate_energies,
    )


def global_fit(measured: CsmSet, array: MicArray, layout: SourceLayout,
               bounds: tuple, config: Optional[OptimizerConfig] = None,
               f_index: Optional[int] = None) -> FitResult:
    """Fit an estimation scenario to a measured CsmSet by dual annealing.

    ``bounds`` is an (lower, upper) pair over the packed layout; entries
    with equal bounds are frozen, all other bounds must be finite. The fit
    minimizes the broadband energy unless ``f_index`` selects a single
    frequency. A bounded quasi-Newton polish runs from the best annealing
    point within the same evaluation budget.
    """
    config = config or OptimizerConfig()
    lower, upper = (np.asarray(b, dtype=float) for b in bounds)
    embedding = _Embedding(lower, upper)
    if embedding.n_free == 0:
        raise ValueError("all parameters are frozen; nothing to optimize")
    if not (np.all(np.isfinite(lower[embedding.free]))
            and np.all(np.isfinite(upper[embedding.free]))):
        raise ValueError("global optimization requires finite bounds on free parameters")
    energy_fn = EnergyFunction(measured, array, layout, f_index)
    counting = _CountingEnergy(lambda xf: energy_fn(embedding.expand(xf)),
                               config.max_evaluations)
    anneal_budget = max(1, int(config.anneal_fraction * config.max_evaluations))
    projector = _PowerProjector(energy_fn, embedding, counting)
    n_free = embedding.n_free
    local_search = {
        "method": _projected_search_method,
        "bounds": embedding.free_bounds(),
        "options": {
            "projector": projector,
            "inner": {"maxiter": min(max(6 * n_free, 100), 1000)},
        },
    }
    try:
        dual_annealing(
            counting,
            bounds=embedding.free_bounds(),
            maxiter=config.maxiter,
            initial_temp=config.initial_temp,
            restart_temp_ratio=config.restart_temp_ratio,
            visit=config.visit,
            accept=config.accept,
            maxfun=anneal_budget,
            rng=config.seed,
            minimizer_kwargs=local_search,
        )
    except _BudgetExceeded:
        pass
    if config.polish and counting.count < config.max_evaluations:
        _polish(counting, counting.best_x.copy(), embedding, layout, config,
                projector=projector, energy_fn=energy_fn)
    return _make_result(energy_fn, counting, embedding, layout, measured,
                        config, config.seed)


def _descent_scale(layout: SourceLayout, energy_fn: EnergyFunction,
                   config: OptimizerConfig, free_mask: np.ndarray) -> np.ndarray:
    """Per-variable scale equalizing curvature across parameter blocks.

    Position curvature grows like k^2 while log-power curvature is ln(10)^2,
    so descending in units of ln(10)/k_max balances the blocks and saves the
    quasi-Newton method most of its conditioning iterations.
    """
    s_geom = config.geometry_scale
    if s_geom <= 0.0:
        s_geom = np.log(10.0) / float(np.max(energy_fn.used_wavenumbers))
    scale = np.ones(layout.n_params)
    for n in range(layout.n_sources):
        scale[layout.position_indices(n)] = s_geom
    return scale[free_mask]


class _AngleScan:
    """Coarse scan of free dipole angles with conditionally optimal powers.

    The dipole field is invariant under an axis flip, so azimuths are
    scanned over [0, pi). A dipole whose axis starts anti-correlated gets
    near-zero conditional power, which kills its angle gradient; the scan
    is the deterministic escape from that chicken-and-egg stall.
    """

    def __init__(self, energy_fn, embedding, layout, counting, projector):
        self.embedding = embedding
        self.counting = counting
        self.projector = projector
        free_pos = np.cumsum(embedding.free) - 1
        self.slots = []  # (free index, candidate values)
        for n in range(layout.n_sources):
            t_idx, p_idx = layout.angle_indices(n)
            if p_idx >= 0 and embedding.free[p_idx]:
                self.slots.append((free_pos[p_idx], np.arange(12) * np.pi / 12.0))
            if t_idx >= 0 and embedding.free[t_idx]:
                self.slots.append((free_pos[t_idx], np.arange(7) * np.pi / 6.0))

    def __call__(self, x_free: np.ndarray, current: float) -> tuple:
        emb = self.embedding
        lo = emb.lower[emb.free]
        hi = emb.upper[emb.free]
        for fp, candidates in self.slots:
            best_x, best_f = x_free, current
            for value in candidates:
                if not lo[fp] <= value <= hi[fp]:
                    continue
                cand = x_free.copy()
                cand[fp] = value
                cand = self.projector(cand)
                f = self.counting(cand)
                if f < best_f:
                    best_x, best_f = cand, f
            x_free, current = best_x, best_f
        return x_free, current


def local_fit(measured: CsmSet, array: MicArray, initial: ParameterVector,
              config: Optional[OptimizerConfig] = None) -> FitResult:
    """Bounded quasi-Newton descent of the broadband energy from an initial
    parameter vector (its embedded bounds apply; infinite bounds allowed).

    Capped descent rounds alternate with the conditional-power projection
    and a coarse scan of free dipole angles until neither improves, then a
    final uncapped descent polishes the result. Accepted energies are
    monotone non-increasing throughout.
    """
    config = config or OptimizerConfig(mode="local")
    embedding = _Embedding(initial.lower.copy(), initial.upper.copy())
    layout = initial.layout
    energy_fn = EnergyFunction(measured, array, layout)
    counting = _CountingEnergy(lambda xf: energy_fn(embedding.expand(xf)),
                               config.max_evaluations)
    x0 = embedding.restrict(initial.values)
    iterates = [x0.copy()]
    jac = _BatchedCentralJac(energy_fn, embedding, layout, counting, config)
    projector = _PowerProjector(energy_fn, embedding, counting)
    angle_scan = _AngleScan(energy_fn, embedding, layout, counting, projector)
    scale = _descent_scale(layout, energy_fn, config, embedding.free)
    fun_scaled = lambda u: counting(u * scale)
    jac_scaled = lambda u: scale * jac(u * scale)
    bounds_scaled = [
        (lo / s if np.isfinite(lo) else -np.inf, hi / s if np.isfinite(hi) else np.inf)
        for (lo, hi), s in zip(embedding.free_bounds(), scale)
    ]

    def descend(x_start, maxiter):
        res = minimize(
            fun_scaled, x_start / scale, method="L-BFGS-B", jac=jac_scaled,
            bounds=bounds_scaled,
            callback=lambda uk: iterates.append(np.asarray(uk) * scale),
            options={
                "maxiter": maxiter,
                "ftol": config.energy_tol,
                "gtol": config.grad_tol,
                "maxfun": config.max_evaluations,
                "maxls": 60,
                "maxcor": 25,
            },
        )
        return np.asarray(res.x, dtype=float) * scale, float(res.fun)

    try:
        current = counting(x0)  # also ensures a best point exists
        rounds = max(config.projection_rounds, 1) if config.power_projection else 1
        prev_energy = None
        for _ in range(rounds):
            stage_improved = False
            if config.power_projection:
                x_proj = projector(x0)
                if not np.array_equal(x_proj, x0):
                    f_proj = counting(x_proj)
                    if f_proj < current:
                        stage_improved = True
                        x0, current = x_proj, f_proj
                        iterates.append(x_proj.copy())
                x_scan, f_scan = angle_scan(x0, current)
                if f_scan < current:
                    stage_improved = True
                    x0, current = x_scan, f_scan
                    iterates.append(x_scan.copy())
            x0, current = descend(x0, config.round_maxiter)
            if current <= config.energy_floor:
                break
            # A fresh restart can still progress (reset Hessian memory);
            # stop once neither the projection stages nor the descent improve.
            improved = prev_energy is None or current < prev_energy - max(
                1e-18, 1e-9 * abs(prev_energy)
            )
            prev_energy = current if prev_energy is None else min(prev_energy, current)
            if not stage_improved and not improved:
                break
        if current > config.energy_floor:
            x0, current = descend(x0, config.local_maxiter)
    except _BudgetExceeded:
        pass
    iterate_energies = np.array([energy_fn(embedding.expand(xk)) for xk in iterates])
    return _make_result(energy_fn, counting, embedding, layout, measured,
                        config, config.seed, iterate_energies=iterate_energies)


def multi_start(measured: CsmSet, array: MicArray, layout: SourceLayout,
                bounds: tuple, config: Optional[OptimizerConfig] = None,
                starts: int = 1) -> FitResult:
    """Independent seeded global fits; returns the lowest-energy result.

    Run i uses seed ``config.seed + i``, so ``starts=1`` reproduces
    :func:`global_fit` with the same seed. All final energies are reported
    on the returned result.
    """
    if starts < 1:
        raise ValueError("starts must be >= 1")
    config = config or OptimizerConfig()
    results = []
    for i in range(starts):
        run_config = replace(config, seed=config.seed + i)
        results.append(global_fit(measured, array, layout, bounds, run_config))
    best = min(results, key=lambda r: r.energy)
    best.run_energies = [r.energy for r in results]
    return best


def standard_fit_per_frequency(measured: CsmSet, array: MicArray,
                               templates: Sequence[SourceTemplate], bounds: tuple,
                               config: Optional[OptimizerConfig] = None,
                               threads: int = 1) -> list:
    """One independent single-frequency global fit per grid frequency.

    ``bounds`` applies to the single-frequency layout (one log-power entry
    per pole). Per-frequency seeds are ``config.seed + f_index``. Returns
    one FitResult per frequency, in grid order.
    """
    config = config or OptimizerConfig()
    layout = SourceLayout(templates, 1)
    lower, upper = (np.asarray(b, dtype=float) for b in bounds)
    if lower.size != layout.n_params:
        raise ValueError("bounds must match the single-frequency layout")

    def run(fi: int) -> FitResult:
        run_config = replace(config, seed=config.seed + fi)
        return global_fit(measured.select([fi]), array, layout, (lower, upper), run_config)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(run, range(measured.f)))
    return [run(fi) for fi in range(measured.f)]


def source_parts_from_fits(fits: Sequence[FitResult]) -> SourcePartSet:
    """Collect per-frequency fit results into a sparse source-part set."""
    positions, frequencies, powers = [], [], []
    for fit in fits:
        if fit.frequencies.size != 1:
            raise ValueError("expected single-frequency fit results")
        for src in fit.sources:
            q = float(src.total_power()[0])
            if q > 0.0:
                positions.append(src.position)
                frequencies.append(fit.frequencies[0])
                powers.append(q)
    if not positions:
        return SourcePartSet.empty()
    return SourcePartSet(np.asarray(positions), np.asarray(frequencies), np.asarray(powers))


def export_fit_json(fit: FitResult, path) -> None:
    """Structured-text dump: parameters, bounds, trace, sources, config, seed."""
    layout = fit.params.layout
    doc = {
        "seed": fit.seed,
        "energy": fit.energy,
        "evaluations": fit.evaluations,
        "config": asdict(fit.config),
        "parameter_names": layout.names,
        "values": fit.params.values.tolist(),
        "lower_bounds": fit.params.lower.tolist(),
        "upper_bounds": fit.params.upper.tolist(),
        "frequencies_hz": fit.frequencies.tolist(),
        "energy_trace": np.asarray(fit.trace).tolist(),
        "sources": [
            {
                "position_m": src.position.tolist(),
                **(
                    {"monopole_pa2_per_hz": src.monopole.tolist()}
                    if src.monopole is not None else {}
                ),
                **(
                    {
                        "dipole_pa2_per_hz": src.dipole.tolist(),
                        "theta_rad": src.theta,
                        "phi_rad": src.phi,
                    }
                    if src.dipole is not None else {}
                ),
            }
            for src in fit.sources
        ],
    }
    if fit.run_energies is not None:
        doc["run_energies"] = [float(v) for v in fit.run_energies]
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)
