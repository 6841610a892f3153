"""Command-line experiment runner.

One subcommand per method; every run consumes a YAML config describing the
scene and the method parameters, and writes its artifacts plus a manifest
(config echo, versions, backend, timings) into the output directory. For a
fixed (config, seed, kernel backend) all artifact files except the manifest
are byte-identical across runs.
"""

import argparse
import json
import os
import sys
import time
from dataclasses import fields as dataclass_fields

import numpy as np
import yaml

from . import __version__, _kernels
from .baseline import FocusGrid, SourcePartSet, clean_sc, conventional_map
from .csm import CsmSet, ground_truth_psd, load_csm, save_csm, snapshot_csm, synthesize_csm
from .energy import (
    EnergyFunction,
    ParameterVector,
    SourceLayout,
    SourceTemplate,
    psf,
    slice_landscape,
)
from .optimize import (
    OptimizerConfig,
    export_fit_json,
    global_fit,
    local_fit,
    source_parts_from_fits,
    standard_fit_per_frequency,
)
from .postprocess import Roi, group_source_objects, roi_integrate
from .scene import Scene, power_from_db, scene_from_dict

METHODS = (
    "synthesize", "snapshot", "energy-slice", "psf", "cb", "clean-sc",
    "go-standard", "go-broadband", "lo-broadband", "spectra",
)


class ConfigError(Exception):
    """Invalid run configuration; message carries the offending field path."""


def _fail(path: str, message: str):
    raise ConfigError(f"{path}: {message}")


def _need(mapping: dict, key: str, path: str):
    if key not in mapping:
        _fail(f"{path}.{key}", "missing required field")
    return mapping[key]


class RunConfig:
    """Validated configuration for exactly one method run."""

    def __init__(self, raw: dict, method: str, seed=None, out=None, threads=None):
        if not isinstance(raw, dict):
            _fail("config", "top level must be a mapping")
        if method not in METHODS:
            _fail("method", f"unknown method {method!r}")
        declared = raw.get("method")
        if declared is not None and declared != method:
            _fail("method", f"config declares {declared!r} but {method!r} was invoked")
        present = [m for m in METHODS if m in raw]
        if len(present) > 1:
            _fail("config", f"exactly one method section allowed, found {present}")
        if present and present[0] != method:
            _fail("config", f"config carries a {present[0]!r} section but {method!r} was invoked")
        self.method = method
        try:
            self.scene = scene_from_dict(_need(raw, "scene", "config"))
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        self.seed = int(seed if seed is not None else raw.get("seed", 0))
        self.out = out if out is not None else raw.get("out")
        if not self.out:
            _fail("out", "missing output directory (config key 'out' or --out)")
        self.threads = int(threads if threads is not None else raw.get("threads", 0)) or (
            os.cpu_count() or 1
        )
        self.params = raw.get(method, {}) or {}
        if not isinstance(self.params, dict):
            _fail(method, "method section must be a mapping")
        self.raw = raw


def _load_yaml(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return yaml.safe_load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config: file not found: {path}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"config: invalid YAML: {exc}") from None


def _grid_from(params: dict, path: str) -> FocusGrid:
    spec = _need(params, "grid", path)
    axes = []
    for axis in ("x1_m", "x2_m", "x3_m"):
        if axis not in spec:
            if axis == "x3_m":
                axes.append((0.0, 0.0, 1.0))
                continue
            _fail(f"{path}.grid.{axis}", "missing [min, max, step]")
        vals = spec[axis]
        if len(vals) == 2:
            vals = [vals[0], vals[1], abs(vals[1] - vals[0]) or 1.0]
        if len(vals) != 3:
            _fail(f"{path}.grid.{axis}", "expected [min, max, step]")
        axes.append(tuple(float(v) for v in vals))
    try:
        return FocusGrid(*axes)
    except ValueError as exc:
        raise ConfigError(f"{path}.grid: {exc}") from None


def _axis_from(params: dict, key: str, path: str, required: bool):
    spec = params.get(key)
    if spec is None:
        if required:
            _fail(f"{path}.{key}", "missing axis definition")
        return None
    name = _need(spec, "name", f"{path}.{key}")
    if "values" in spec:
        values = np.asarray(spec["values"], dtype=float)
    else:
        for field in ("start", "stop", "step"):
            if field not in spec:
                _fail(f"{path}.{key}.{field}", "missing (or give explicit 'values')")
        values = np.arange(
            float(spec["start"]), float(spec["stop"]) + 0.5 * float(spec["step"]),
            float(spec["step"]),
        )
    return (name, values)


def _templates_from(params: dict, path: str, n_default=None):
    n = params.get("sources", n_default)
    if n is None:
        _fail(f"{path}.sources", "missing estimated-source count")
    poles = params.get("poles", ["monopole"])
    if isinstance(poles, str):
        poles = [poles]
    tpl = SourceTemplate(monopole="monopole" in poles, dipole="dipole" in poles)
    return [tpl] * int(n)


def _bounds_from(params: dict, layout: SourceLayout, path: str):
    spec = _need(params, "bounds", path)
    lo = [float(_need(spec, k, f"{path}.bounds")[0]) for k in ("x1_m", "x2_m", "x3_m")]
    hi = [float(spec[k][1]) for k in ("x1_m", "x2_m", "x3_m")]
    q_db = tuple(float(v) for v in spec.get("q_db_per_hz", (0.0, 140.0)))
    theta = tuple(float(v) for v in spec.get("theta_rad", (0.0, np.pi)))
    phi = tuple(float(v) for v in spec.get("phi_rad", (0.0, 2.0 * np.pi)))
    return layout.make_bounds(lo, hi, q_db=q_db, theta=theta, phi=phi)


def _optimizer_from(params: dict, seed: int, path: str, mode: str) -> OptimizerConfig:
    spec = dict(params.get("optimizer", {}) or {})
    spec.setdefault("mode", mode)
    spec.setdefault("seed", seed)
    valid = {f.name for f in dataclass_fields(OptimizerConfig)}
    unknown = set(spec) - valid
    if unknown:
        _fail(f"{path}.optimizer", f"unknown option(s): {sorted(unknown)}")
    try:
        return OptimizerConfig(**spec)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}.optimizer: {exc}") from None


def _rois_from(params: dict, path: str):
    rois = []
    for i, spec in enumerate(params.get("rois", []) or []):
        where = f"{path}.rois[{i}]"
        try:
            rois.append(
                Roi(
                    center=np.asarray(_need(spec, "center_m", where), dtype=float),
                    radii=np.asarray(_need(spec, "radii_m", where), dtype=float),
                    label=str(_need(spec, "label", where)),
                )
            )
        except ValueError as exc:
            raise ConfigError(f"{where}: {exc}") from None
    return rois


def _measured_csm(cfg: RunConfig) -> CsmSet:
    """The measured CSM for fitting methods: synthesized, snapshot, or a file."""
    source = cfg.params.get("csm", "synthesize")
    if source == "synthesize":
        return synthesize_csm(cfg.scene)
    if source == "snapshot":
        return snapshot_csm(cfg.scene, int(cfg.params.get("snapshots", 1000)), cfg.seed)
    return load_csm(source)


def _write_map_csv(path, grid: FocusGrid, values: np.ndarray, column: str,
                   f_hz=None) -> None:
    points = grid.points()
    flat = values.reshape(-1)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# map v1\n")
        if f_hz is not None:
            fh.write(f"# f_hz: {f_hz:.17g}\n")
        fh.write(f"x1_m,x2_m,x3_m,{column}\n")
        for p, v in zip(points, flat):
            fh.write(f"{p[0]:.17g},{p[1]:.17g},{p[2]:.17g},{v:.17g}\n")


def _truth_vector_for(scene: Scene, layout: SourceLayout, lower, upper) -> ParameterVector:
    values = layout.pack(scene.sources)
    return ParameterVector(values, lower, upper, layout)


# ---------------------------------------------------------------------------
# Method implementations. Each returns a list of artifact file names.
# ---------------------------------------------------------------------------

def _run_synthesize(cfg: RunConfig, out: str) -> list:
    fmt = cfg.params.get("format", "binary")
    name = "csm.bin" if fmt == "binary" else "csm.txt"
    save_csm(synthesize_csm(cfg.scene), os.path.join(out, name), fmt=fmt)
    return [name]


def _run_snapshot(cfg: RunConfig, out: str) -> list:
    snapshots = int(_need(cfg.params, "snapshots", "snapshot"))
    if snapshots < 1:
        _fail("snapshot.snapshots", "must be >= 1")
    fmt = cfg.params.get("format", "binary")
    name = "csm.bin" if fmt == "binary" else "csm.txt"
    save_csm(
        snapshot_csm(cfg.scene, snapshots, cfg.seed), os.path.join(out, name), fmt=fmt
    )
    return [name]


def _fixed_vector(cfg: RunConfig, layout: SourceLayout, path: str) -> ParameterVector:
    """The anchor parameter vector for a slice: scene truth or explicit model."""
    model = cfg.params.get("model")
    full = np.full(layout.n_params, np.inf)
    if model is None:
        values = layout.pack(cfg.scene.sources)
    else:
        try:
            model_scene = scene_from_dict(
                {
                    "microphones_m": cfg.scene.array.positions.tolist(),
                    "frequencies_hz": cfg.scene.grid.frequencies.tolist(),
                    "speed_of_sound_m_per_s": cfg.scene.grid.speed_of_sound,
                    "sources": model,
                }
            )
        except ValueError as exc:
            raise ConfigError(f"{path}.model: {exc}") from None
        values = layout.pack(model_scene.sources)
    return ParameterVector(values, -full, full, layout)


def _run_energy_slice(cfg: RunConfig, out: str) -> list:
    params, path = cfg.params, "energy-slice"
    measured = _measured_csm(cfg)
    templates = [
        SourceTemplate(monopole=s.monopole is not None, dipole=s.dipole is not None)
        for s in cfg.scene.sources
    ]
    if "sources" in params or "poles" in params:
        templates = _templates_from(params, path, n_default=len(templates))
    layout = SourceLayout(templates, cfg.scene.grid.f)
    fixed = _fixed_vector(cfg, layout, path)
    axis1 = _axis_from(params, "axis1", path, required=True)
    axis2 = _axis_from(params, "axis2", path, required=False)
    mode = params.get("mode", "broadband")
    f_index = None
    if mode == "single":
        f_hz = float(_need(params, "frequency_hz", path))
        matches = np.flatnonzero(np.isclose(cfg.scene.grid.frequencies, f_hz))
        if not matches.size:
            _fail(f"{path}.frequency_hz", f"{f_hz} Hz is not on the scene grid")
        f_index = int(matches[0])
    elif mode != "broadband":
        _fail(f"{path}.mode", "must be 'broadband' or 'single'")
    try:
        landscape = slice_landscape(
            measured, cfg.scene.array, fixed, axis1, axis2, f_index=f_index
        )
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    landscape.to_csv(os.path.join(out, "slice.csv"))
    return ["slice.csv"]


def _run_psf(cfg: RunConfig, out: str) -> list:
    params, path = cfg.params, "psf"
    grid = _grid_from(params, path)
    if "source_position_m" in params:
        pos = np.asarray(params["source_position_m"], dtype=float)
    else:
        idx = int(params.get("source", 0))
        if not 0 <= idx < len(cfg.scene.sources):
            _fail(f"{path}.source", "source index out of range")
        pos = cfg.scene.sources[idx].position
    freqs = params.get("frequencies_hz", "all")
    if freqs == "all":
        ks = cfg.scene.grid.wavenumbers
    else:
        ks = 2.0 * np.pi * np.atleast_1d(np.asarray(freqs, dtype=float)) / (
            cfg.scene.grid.speed_of_sound
        )
    averaged = bool(params.get("averaged", ks.size > 1))
    values = psf(cfg.scene.array, pos, grid, ks, averaged=averaged)
    f_tag = None if ks.size > 1 else float(ks[0] * cfg.scene.grid.speed_of_sound / (2 * np.pi))
    _write_map_csv(os.path.join(out, "psf.csv"), grid, values, "psf", f_hz=f_tag)
    return ["psf.csv"]


def _f_indices(cfg: RunConfig, params: dict, path: str):
    freqs = params.get("frequencies_hz", "all")
    if freqs == "all":
        return list(range(cfg.scene.grid.f))
    out = []
    for f_hz in np.atleast_1d(np.asarray(freqs, dtype=float)):
        matches = np.flatnonzero(np.isclose(cfg.scene.grid.frequencies, f_hz))
        if not matches.size:
            _fail(f"{path}.frequencies_hz", f"{f_hz} Hz is not on the scene grid")
        out.append(int(matches[0]))
    return out


def _run_cb(cfg: RunConfig, out: str) -> list:
    params, path = cfg.params, "cb"
    grid = _grid_from(params, path)
    measured = _measured_csm(cfg)
    remove_diagonal = bool(params.get("remove_diagonal", True))
    artifacts = []
    for fi in _f_indices(cfg, params, path):
        values = conventional_map(measured, cfg.scene.array, grid, fi, remove_diagonal)
        f_hz = cfg.scene.grid.frequencies[fi]
        name = f"map_f{int(round(f_hz))}.csv"
        _write_map_csv(os.path.join(out, name), grid, values, "b_pa2_per_hz", f_hz=f_hz)
        artifacts.append(name)
    return artifacts


def _run_clean_sc(cfg: RunConfig, out: str) -> list:
    params, path = cfg.params, "clean-sc"
    grid = _grid_from(params, path)
    measured = _measured_csm(cfg)
    try:
        parts = clean_sc(
            measured, cfg.scene.array, grid,
            loop_gain=float(params.get("loop_gain", 0.9)),
            max_iterations=int(params.get("max_iterations", 50)),
            stop_tol=float(params.get("stop_tol", 1e-6)),
            remove_diagonal=bool(params.get("remove_diagonal", True)),
            threads=cfg.threads,
        )
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    parts.to_csv(os.path.join(out, "source_parts.csv"))
    artifacts = ["source_parts.csv"]
    rois = _rois_from(params, path)
    if rois:
        report = roi_integrate(parts, rois, cfg.scene.grid.frequencies)
        report.to_csv(os.path.join(out, "spectra.csv"))
        artifacts.append("spectra.csv")
    return artifacts


def _run_go_standard(cfg: RunConfig, out: str) -> list:
    params, path = cfg.params, "go-standard"
    templates = _templates_from(params, path)
    layout = SourceLayout(templates, 1)
    bounds = _bounds_from(params, layout, path)
    config = _optimizer_from(params, cfg.seed, path, "global")
    measured = _measured_csm(cfg)
    fits = standard_fit_per_frequency(
        measured, cfg.scene.array, templates, bounds, config, threads=cfg.threads
    )
    parts = source_parts_from_fits(fits)
    parts.to_csv(os.path.join(out, "source_parts.csv"))
    summary = {
        "frequencies_hz": cfg.scene.grid.frequencies.tolist(),
        "final_energies": [fit.energy for fit in fits],
        "evaluations": [fit.evaluations for fit in fits],
        "seeds": [fit.seed for fit in fits],
    }
    with open(os.path.join(out, "fits.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=1)
    artifacts = ["source_parts.csv", "fits.json"]
    rois = _rois_from(params, path)
    if rois:
        report = roi_integrate(parts, rois, cfg.scene.grid.frequencies)
        report.to_csv(os.path.join(out, "spectra.csv"))
        artifacts.append("spectra.csv")
    return artifacts


def _run_go_broadband(cfg: RunConfig, out: str) -> list:
    params, path = cfg.params, "go-broadband"
    templates = _templates_from(params, path)
    layout = SourceLayout(templates, cfg.scene.grid.f)
    bounds = _bounds_from(params, layout, path)
    config = _optimizer_from(params, cfg.seed, path, "global")
    measured = _measured_csm(cfg)
    fit = global_fit(measured, cfg.scene.array, layout, bounds, config)
    export_fit_json(fit, os.path.join(out, "fit.json"))
    report = group_source_objects(
        fit, float(params.get("group_min_distance_m", 0.02))
    )
    report.to_csv(os.path.join(out, "spectra.csv"))
    return ["fit.json", "spectra.csv"]


def _initial_vector_lo(cfg: RunConfig, layout: SourceLayout, params: dict,
                       path: str) -> ParameterVector:
    spec = _need(params, "initial", path)
    mode = spec.get("mode", "perturbed-truth")
    rng = np.random.default_rng(cfg.seed)
    lower = np.full(layout.n_params, -np.inf)
    upper = np.full(layout.n_params, np.inf)
    if mode == "perturbed-truth":
        if len(cfg.scene.sources) != layout.n_sources:
            _fail(f"{path}.initial", "perturbed-truth needs matching source counts")
        sigma = float(spec.get("sigma_m", 0.025))
        bound_sigmas = float(spec.get("bound_sigmas", 4.0))
        start_db = float(spec.get("psd_db_per_hz", 50.0))
        fix = set(spec.get("fix", ["x3"]))
        values = layout.pack(cfg.scene.sources)
        for n in range(layout.n_sources):
            pos_idx = layout.position_indices(n)
            for a, axis in enumerate(("x1", "x2", "x3")):
                idx = pos_idx[a]
                if axis in fix:
                    lower[idx] = upper[idx] = values[idx]
                else:
                    values[idx] += sigma * rng.standard_normal()
                    lower[idx] = values[idx] - bound_sigmas * sigma
                    upper[idx] = values[idx] + bound_sigmas * sigma
            t_idx, p_idx = layout.angle_indices(n)
            if t_idx >= 0:
                if "theta" in fix:
                    lower[t_idx] = upper[t_idx] = values[t_idx]
                if spec.get("phi", "random") == "random":
                    values[p_idx] = rng.uniform(0.0, 2.0 * np.pi)
            for pole in ("monopole", "dipole"):
                if getattr(layout.templates[n], pole):
                    values[layout.power_indices(n, pole)] = (
                        np.log10(power_from_db(start_db))
                    )
        return ParameterVector(values, lower, upper, layout)
    if mode == "explicit":
        try:
            model_scene = scene_from_dict(
                {
                    "microphones_m": cfg.scene.array.positions.tolist(),
                    "frequencies_hz": cfg.scene.grid.frequencies.tolist(),
                    "speed_of_sound_m_per_s": cfg.scene.grid.speed_of_sound,
                    "sources": _need(spec, "sources", f"{path}.initial"),
                }
            )
        except ValueError as exc:
            raise ConfigError(f"{path}.initial.sources: {exc}") from None
        values = layout.pack(model_scene.sources)
        box = spec.get("position_box_m")
        if box is not None:
            half = np.asarray(box, dtype=float).reshape(3)
            for n in range(layout.n_sources):
                idx = layout.position_indices(n)
                lower[idx] = values[idx] - half
                upper[idx] = values[idx] + half
        return ParameterVector(values, lower, upper, layout)
    _fail(f"{path}.initial.mode", "must be 'perturbed-truth' or 'explicit'")


def _run_lo_broadband(cfg: RunConfig, out: str) -> list:
    params, path = cfg.params, "lo-broadband"
    templates = _templates_from(
        params, path,
        n_default=len(cfg.scene.sources) if "initial" in params else None,
    )
    layout = SourceLayout(templates, cfg.scene.grid.f)
    initial = _initial_vector_lo(cfg, layout, params, path)
    config = _optimizer_from(params, cfg.seed, path, "local")
    measured = _measured_csm(cfg)
    fit = local_fit(measured, cfg.scene.array, initial, config)
    export_fit_json(fit, os.path.join(out, "fit.json"))
    report = group_source_objects(fit, float(params.get("group_min_distance_m", 0.02)))
    report.to_csv(os.path.join(out, "spectra.csv"))
    return ["fit.json", "spectra.csv"]


def _run_spectra(cfg: RunConfig, out: str) -> list:
    params, path = cfg.params, "spectra"
    parts = SourcePartSet.from_csv(_need(params, "parts", path))
    rois = _rois_from(params, path)
    if not rois:
        _fail(f"{path}.rois", "at least one ROI is required")
    report = roi_integrate(parts, rois, cfg.scene.grid.frequencies)
    truth_spec = params.get("truth")
    if truth_spec:
        measured = _measured_csm(cfg)
        truth = {}
        for i, entry in enumerate(truth_spec):
            where = f"{path}.truth[{i}]"
            label = str(_need(entry, "label", where))
            pos = np.asarray(_need(entry, "position_m", where), dtype=float)
            truth[label] = ground_truth_psd(measured, pos, cfg.scene.array)
        report.truth = truth
    report.to_csv(os.path.join(out, "spectra.csv"))
    report.to_json(os.path.join(out, "spectra.json"))
    return ["spectra.csv", "spectra.json"]


_RUNNERS = {
    "synthesize": _run_synthesize,
    "snapshot": _run_snapshot,
    "energy-slice": _run_energy_slice,
    "psf": _run_psf,
    "cb": _run_cb,
    "clean-sc": _run_clean_sc,
    "go-standard": _run_go_standard,
    "go-broadband": _run_go_broadband,
    "lo-broadband": _run_lo_broadband,
    "spectra": _run_spectra,
}


def run(config: RunConfig) -> list:
    """Execute one validated run; returns the artifact file names written."""
    os.makedirs(config.out, exist_ok=True)
    started = time.time()
    artifacts = _RUNNERS[config.method](config, config.out)
    manifest = {
        "method": config.method,
        "seed": config.seed,
        "threads": config.threads,
        "config": config.raw,
        "artifacts": artifacts,
        "versions": {
            "csmfit": __version__,
            "numpy": np.__version__,
            "kernel_backend": _kernels.BACKEND,
        },
        "started_unix": started,
        "elapsed_s": time.time() - started,
    }
    with open(os.path.join(config.out, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, default=str)
    return artifacts


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="csmfit",
        description="Covariance-matrix-fitting beamforming experiment runner",
    )
    sub = parser.add_subparsers(dest="method", required=True)
    for method in METHODS:
        p = sub.add_parser(method, help=f"run the {method} method")
        p.add_argument("--config", required=True, help="YAML run configuration")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument(
            "--threads", type=int, default=None,
            help="worker thread cap (default: available cores)",
        )
    args = parser.parse_args(argv)
    try:
        raw = _load_yaml(args.config)
        config = RunConfig(raw, args.method, seed=args.seed, out=args.out,
                           threads=args.threads)
        run(config)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"error: {args.method}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
