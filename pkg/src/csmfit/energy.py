"""Fitting energies over packed parameter vectors.

An estimation scenario is a list of source templates (which poles each
estimated source carries). Its free variables are packed into one flat real
vector: first the geometry block of every source ([x1, x2, x3] plus
[theta, phi] when the source has a dipole pole), then, per source and per
pole, one log10-power entry per frequency. Powers are packed as
L = log10(q) so optimizer steps are multiplicative in power.

Two energies operate on such vectors against a measured CsmSet:

* the single-frequency energy: the plain sum over strictly off-diagonal
  CSM entries of |c_mod - c_meas|^2 at one frequency, and
* the broadband energy: the average of those squared residuals over all
  pairs and frequencies, each frequency normalized by the mean squared
  magnitude of its measured off-diagonal entries, so every frequency
  carries equal weight and an empty model scores exactly 1.
"""

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import _kernels
from .csm import CsmSet, upper_tri_pairs
from .propagation import greens_matrix, steering_matrix_iv, steering_vector_iv
from .scene import MicArray, SourceObject, canonical_dipole_angles

#: log10 of the dB reference power (Q = 0 dB).
LOG10_REF = math.log10(4e-10)

_POLES = ("monopole", "dipole")


@dataclass(frozen=True)
class SourceTemplate:
    """Pole structure of one estimated source."""

    monopole: bool = True
    dipole: bool = False

    def __post_init__(self):
        if not (self.monopole or self.dipole):
            raise ValueError("a source template needs at least one pole")


class SourceLayout:
    """Packing layout for the free variables of an estimation scenario.

    Attributes
    ----------
    names : list of str
        One name per packed entry, e.g. "s0:x2", "s1:phi", "s0:monopole:L17".
    n_params : int
        Total packed length.
    """

    def __init__(self, templates: Sequence[SourceTemplate], n_freqs: int):
        templates = tuple(templates)
        if n_freqs < 1:
            raise ValueError("n_freqs must be >= 1")
        self.templates = templates
        self.n_freqs = int(n_freqs)
        self.n_sources = len(templates)

        names = []
        pos_index = np.empty((self.n_sources, 3), dtype=np.intp)
        theta_index = np.full(self.n_sources, -1, dtype=np.intp)
        phi_index = np.full(self.n_sources, -1, dtype=np.intp)
        cursor = 0
        for n, tpl in enumerate(templates):
            pos_index[n] = (cursor, cursor + 1, cursor + 2)
            names += [f"s{n}:x1", f"s{n}:x2", f"s{n}:x3"]
            cursor += 3
            if tpl.dipole:
                theta_index[n] = cursor
                phi_index[n] = cursor + 1
                names += [f"s{n}:theta", f"s{n}:phi"]
                cursor += 2
        self.n_geometry = cursor
        power_rows = {}  # (source, pole) -> (F,) indices
        for n, tpl in enumerate(templates):
            for pole in _POLES:
                if getattr(tpl, pole):
                    power_rows[(n, pole)] = np.arange(cursor, cursor + n_freqs, dtype=np.intp)
                    names += [f"s{n}:{pole}:L{j}" for j in range(n_freqs)]
                    cursor += n_freqs
        self.n_params = cursor
        self.names = names
        self._pos_index = pos_index
        self._theta_index = theta_index
        self._phi_index = phi_index
        self._power_rows = power_rows
        self._has_mono = np.array([t.monopole for t in templates], dtype=np.uint8)
        self._has_dip = np.array([t.dipole for t in templates], dtype=np.uint8)

    # -- index accessors ----------------------------------------------------
    def position_indices(self, source: int) -> np.ndarray:
        return self._pos_index[source].copy()

    def angle_indices(self, source: int) -> tuple:
        """(theta_index, phi_index) for a dipole-carrying source, else (-1, -1)."""
        return int(self._theta_index[source]), int(self._phi_index[source])

    def power_indices(self, source: int, pole: str) -> np.ndarray:
        key = (source, pole)
        if key not in self._power_rows:
            raise KeyError(f"source {source} has no {pole} pole")
        return self._power_rows[key].copy()

    def geometry_mask(self) -> np.ndarray:
        """Boolean mask marking position/angle entries (True) vs powers."""
        mask = np.zeros(self.n_params, dtype=bool)
        mask[: self.n_geometry] = True
        return mask

    def source_block_indices(self, source: int) -> np.ndarray:
        """All packed indices belonging to one source (geometry + powers)."""
        idx = list(self._pos_index[source])
        if self._theta_index[source] >= 0:
            idx += [self._theta_index[source], self._phi_index[source]]
        for pole in _POLES:
            if (source, pole) in self._power_rows:
                idx.extend(self._power_rows[(source, pole)])
        return np.asarray(idx, dtype=np.intp)

    # -- packing ------------------------------------------------------------
    def pack(self, sources: Sequence[SourceObject]) -> np.ndarray:
        """Pack source objects into a flat vector (silent poles become -inf)."""
        if len(sources) != self.n_sources:
            raise ValueError(f"expected {self.n_sources} sources, got {len(sources)}")
        values = np.zeros(self.n_params)
        for n, (tpl, src) in enumerate(zip(self.templates, sources)):
            values[self._pos_index[n]] = src.position
            if tpl.dipole:
                values[self._theta_index[n]] = src.theta
                values[self._phi_index[n]] = src.phi
            for pole in _POLES:
                if not getattr(tpl, pole):
                    continue
                spec = getattr(src, pole)
                if spec is None:
                    raise ValueError(
                        f"source {n} lacks the {pole} spectrum required by its template"
                    )
                if spec.size != self.n_freqs:
                    raise ValueError(f"source {n} {pole} spectrum length mismatch")
                with np.errstate(divide="ignore"):
                    values[self._power_rows[(n, pole)]] = np.log10(spec)
        return values

    def unpack(self, values: np.ndarray) -> list:
        """Decode a packed vector into SourceObjects (angles canonicalized)."""
        values = self._check(values)
        out = []
        for n, tpl in enumerate(self.templates):
            kwargs = {"position": values[self._pos_index[n]]}
            if tpl.dipole:
                theta, phi = canonical_dipole_angles(
                    values[self._theta_index[n]], values[self._phi_index[n]]
                )
                kwargs["theta"] = theta
                kwargs["phi"] = phi
            for pole in _POLES:
                if getattr(tpl, pole):
                    kwargs[pole] = np.power(10.0, values[self._power_rows[(n, pole)]])
            out.append(SourceObject(**kwargs))
        return out

    def _check(self, values) -> np.ndarray:
        values = np.ascontiguousarray(values, dtype=float)
        if values.shape != (self.n_params,):
            raise ValueError(
                f"parameter vector has shape {values.shape}, layout needs ({self.n_params},)"
            )
        return values

    # -- bounds -------------------------------------------------------------
    def make_bounds(self, position_lower, position_upper, q_db=(0.0, 140.0),
                    theta=(0.0, np.pi), phi=(0.0, 2.0 * np.pi)) -> tuple:
        """Uniform bounds arrays (lower, upper) for this layout.

        position_lower/upper are per-axis 3-vectors applied to every source;
        equal lower and upper freeze a parameter. q_db bounds apply to all
        log-power entries (converted to L = log10 q).
        """
        lo = np.empty(self.n_params)
        hi = np.empty(self.n_params)
        plo = np.asarray(position_lower, dtype=float).reshape(3)
        phi_up = np.asarray(position_upper, dtype=float).reshape(3)
        l_lo = LOG10_REF + q_db[0] / 10.0
        l_hi = LOG10_REF + q_db[1] / 10.0
        for n, tpl in enumerate(self.templates):
            lo[self._pos_index[n]] = plo
            hi[self._pos_index[n]] = phi_up
            if tpl.dipole:
                lo[self._theta_index[n]], hi[self._theta_index[n]] = theta
                lo[self._phi_index[n]], hi[self._phi_index[n]] = phi
            for pole in _POLES:
                if getattr(tpl, pole):
                    lo[self._power_rows[(n, pole)]] = l_lo
                    hi[self._power_rows[(n, pole)]] = l_hi
        return lo, hi


@dataclass(frozen=True)
class ParameterVector:
    """Packed values with element-wise bounds for one estimation scenario."""

    values: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    layout: SourceLayout

    def __post_init__(self):
        values = self.layout._check(self.values)
        lower = self.layout._check(self.lower)
        upper = self.layout._check(self.upper)
        if np.any(lower > upper):
            bad = self.layout.names[int(np.argmax(lower > upper))]
            raise ValueError(f"lower bound exceeds upper bound at {bad}")
        if np.any(values < lower) or np.any(values > upper):
            out = (values < lower) | (values > upper)
            bad = self.layout.names[int(np.argmax(out))]
            raise ValueError(f"value outside bounds at {bad}")
        for name, arr in (("values", values), ("lower", lower), ("upper", upper)):
            arr = arr.copy()
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    def replace_values(self, values) -> "ParameterVector":
        return ParameterVector(values, self.lower, self.upper, self.layout)

    def swap_sources(self, a: int, b: int) -> "ParameterVector":
        """Exchange the full parameter blocks (geometry + powers) of two sources.

        Requires identical templates for the two sources.
        """
        if self.layout.templates[a] != self.layout.templates[b]:
            raise ValueError("can only swap sources with identical templates")
        idx_a = self.layout.source_block_indices(a)
        idx_b = self.layout.source_block_indices(b)
        values = self.values.copy()
        lower = self.lower.copy()
        upper = self.upper.copy()
        for arr in (values, lower, upper):
            arr[idx_a], arr[idx_b] = arr[idx_b].copy(), arr[idx_a].copy()
        return ParameterVector(values, lower, upper, self.layout)

    def sources(self) -> list:
        return self.layout.unpack(self.values)


def truth_vector(scene, templates: Optional[Sequence[SourceTemplate]] = None) -> ParameterVector:
    """Pack a scene's true sources with unbounded (-inf, +inf) bounds."""
    if templates is None:
        templates = [
            SourceTemplate(monopole=s.monopole is not None, dipole=s.dipole is not None)
            for s in scene.sources
        ]
    layout = SourceLayout(templates, scene.grid.f)
    values = layout.pack(scene.sources)
    full = np.full(layout.n_params, np.inf)
    return ParameterVector(values, -full, full, layout)


class EnergyFunction:
    """Reusable, reentrant energy callable for a fixed measured CsmSet.

    Without ``f_index`` this is the broadband energy (normalized
    all-frequency average); with ``f_index`` it is the single-frequency sum.
    Evaluation allocates only small per-call buffers, so instances are safe
    to call concurrently.
    """

    def __init__(self, measured: CsmSet, array: MicArray, layout: SourceLayout,
                 f_index: Optional[int] = None):
        if array.m != measured.m:
            raise ValueError(f"array has {array.m} microphones, CSM has {measured.m}")
        if layout.n_freqs != measured.f:
            raise ValueError(
                f"layout packs {layout.n_freqs} frequencies, measured set has {measured.f}"
            )
        self.layout = layout
        self.measured = measured
        self.array = array
        self.f_index = f_index
        i_idx, j_idx = upper_tri_pairs(measured.m)
        c_pairs = measured.pair_entries()
        wavenumbers = measured.grid.wavenumbers
        if f_index is None:
            n_pair = c_pairs.shape[1]
            norm = np.mean(c_pairs.real**2 + c_pairs.imag**2, axis=1)
            if np.any(norm == 0.0):
                fi = int(np.argmax(norm == 0.0))
                raise ValueError(
                    f"measured CSM has all-zero off-diagonal entries at "
                    f"f = {measured.grid.frequencies[fi]:g} Hz; "
                    "broadband normalization is undefined"
                )
            self._weights = 1.0 / (measured.f * n_pair * norm)
            f_sel = slice(None)
        else:
            if not 0 <= f_index < measured.f:
                raise ValueError(f"f_index {f_index} out of range [0, {measured.f})")
            self._weights = None
            f_sel = [f_index]
            c_pairs = c_pairs[f_sel]
            wavenumbers = wavenumbers[f_sel]
        self._kernel = _kernels.ScenarioKernel(
            array.positions, wavenumbers, i_idx, j_idx, c_pairs,
            layout._has_mono, layout._has_dip,
        )
        self.measured_pairs = np.ascontiguousarray(c_pairs)
        self.used_wavenumbers = np.ascontiguousarray(wavenumbers)
        # Index maps from the packed parameter vector into the kernel buffer
        # [positions (N,3) | theta (N) | phi (N) | q_mono (N,F) | q_dip (N,F)].
        lay = layout
        n = lay.n_sources
        n_freq = 1 if f_index is not None else measured.f
        self._n_freq = n_freq
        self._buf_len = 5 * n + 2 * n * n_freq
        self._pos_flat = lay._pos_index.ravel()
        dip = np.flatnonzero(lay._theta_index >= 0)
        self._theta_src = 3 * n + dip
        self._theta_par = lay._theta_index[dip]
        self._phi_src = 4 * n + dip
        self._phi_par = lay._phi_index[dip]
        mono_src = np.flatnonzero(lay._has_mono)
        dip_src = np.flatnonzero(lay._has_dip)
        off_qm = 5 * n
        off_qd = off_qm + n * n_freq
        self._qm_slots = (
            off_qm + (mono_src[:, None] * n_freq + np.arange(n_freq)[None, :]).ravel()
        )
        self._qd_slots = (
            off_qd + (dip_src[:, None] * n_freq + np.arange(n_freq)[None, :]).ravel()
        )
        self._qm_par = (
            np.stack([lay._power_rows[(s, "monopole")] for s in mono_src])[:, f_sel].ravel()
            if mono_src.size else np.empty(0, dtype=np.intp)
        )
        self._qd_par = (
            np.stack([lay._power_rows[(s, "dipole")] for s in dip_src])[:, f_sel].ravel()
            if dip_src.size else np.empty(0, dtype=np.intp)
        )

    def decode(self, values) -> np.ndarray:
        """Pack a parameter vector into the flat kernel buffer.

        Log-powers are clamped to 10^±120 so that optimizer line searches
        probing extreme amplitudes see a finite (huge) energy instead of
        overflowing to inf (the energy squares the powers).
        """
        values = self.layout._check(values)
        buf = np.zeros(self._buf_len)
        buf[: self._pos_flat.size] = values[self._pos_flat]
        buf[self._theta_src] = values[self._theta_par]
        buf[self._phi_src] = values[self._phi_par]
        if self._qm_par.size:
            buf[self._qm_slots] = np.power(10.0, np.clip(values[self._qm_par], -120.0, 120.0))
        if self._qd_par.size:
            buf[self._qd_slots] = np.power(10.0, np.clip(values[self._qd_par], -120.0, 120.0))
        return buf

    def residual_sums(self, values) -> np.ndarray:
        """Per-evaluated-frequency sums over pairs of |c_mod - c_meas|^2."""
        return self._kernel.residual_sums(self.decode(values))

    def model_pair_entries(self, values) -> np.ndarray:
        """Modeled off-diagonal CSM entries (F_used, P) for a packed vector."""
        return self._kernel.model_pair_entries(self.decode(values))

    def __call__(self, values) -> float:
        sums = self.residual_sums(values)
        if self._weights is None:
            return float(sums[0])
        return float(np.dot(sums, self._weights))


def standard_energy(params: ParameterVector, measured: CsmSet, array: MicArray,
                    f_index: int) -> float:
    """Single-frequency fitting energy at one frequency index."""
    return EnergyFunction(measured, array, params.layout, f_index)(params.values)


def broadband_energy(params: ParameterVector, measured: CsmSet, array: MicArray) -> float:
    """Frequency-normalized broadband fitting energy (1.0 for an empty model)."""
    return EnergyFunction(measured, array, params.layout)(params.values)


# ---------------------------------------------------------------------------
# Energy-landscape slices
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EnergyLandscapeSlice:
    """Energies on a 1-D or 2-D grid of swept parameters, others fixed."""

    axis_names: tuple
    axis_values: tuple  # one array per axis
    energies: np.ndarray  # shape (n1,) or (n1, n2)
    mode: str  # "broadband" or "single:<f_hz>"

    def __post_init__(self):
        expected = tuple(len(v) for v in self.axis_values)
        if self.energies.shape != expected:
            raise ValueError(
                f"energy matrix shape {self.energies.shape} does not match axes {expected}"
            )
        if np.any(self.energies < 0.0):
            raise ValueError("energies must be nonnegative")

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("# energy-slice v1\n")
            fh.write(f"# mode: {self.mode}\n")
            for ax, (name, vals) in enumerate(zip(self.axis_names, self.axis_values), 1):
                fh.write(f"# axis{ax}: {name}\n")
                fh.write(f"# axis{ax}_values: " + ",".join(f"{v:.17g}" for v in vals) + "\n")
            fh.write("# matrix: rows follow axis1, columns follow axis2\n")
            mat = np.atleast_2d(self.energies)
            if self.energies.ndim == 1:
                mat = self.energies[:, None]
            for row in mat:
                fh.write(",".join(f"{v:.17g}" for v in row) + "\n")


def _axis_setter(layout: SourceLayout, name: str):
    """Map an axis name to (packed indices, value transform).

    Understood names: "s{n}:x1|x2|x3|theta|phi", "s{n}:q" / "s{n}:Q"
    (all poles of source n, linear Pa^2/Hz or dB/Hz, tied over frequency),
    and the per-pole forms "s{n}:monopole:q" etc.
    """
    parts = name.split(":")
    if len(parts) < 2 or not parts[0].startswith("s"):
        raise ValueError(f"cannot parse axis name {name!r}")
    try:
        src = int(parts[0][1:])
    except ValueError:
        raise ValueError(f"cannot parse source index in axis name {name!r}") from None
    if not 0 <= src < layout.n_sources:
        raise ValueError(f"axis {name!r}: source index out of range")
    identity = lambda v: v
    if len(parts) == 2 and parts[1] in ("x1", "x2", "x3"):
        axis = ("x1", "x2", "x3").index(parts[1])
        return layout.position_indices(src)[axis : axis + 1], identity
    if len(parts) == 2 and parts[1] in ("theta", "phi"):
        t_idx, p_idx = layout.angle_indices(src)
        idx = t_idx if parts[1] == "theta" else p_idx
        if idx < 0:
            raise ValueError(f"axis {name!r}: source {src} has no dipole angles")
        return np.array([idx], dtype=np.intp), identity
    if parts[-1] in ("q", "Q"):
        poles = [parts[1]] if len(parts) == 3 else [
            p for p in _POLES if getattr(layout.templates[src], p)
        ]
        idx = np.concatenate([layout.power_indices(src, p) for p in poles])
        if parts[-1] == "q":
            return idx, lambda v: math.log10(v)
        return idx, lambda v: LOG10_REF + v / 10.0
    raise ValueError(f"cannot parse axis name {name!r}")


def slice_landscape(measured: CsmSet, array: MicArray, fixed: ParameterVector,
                    axis1, axis2=None, f_index: Optional[int] = None) -> EnergyLandscapeSlice:
    """Evaluate the energy on a Cartesian grid of one or two swept parameters.

    ``axis1``/``axis2`` are (name, values) pairs; see :func:`_axis_setter`
    for the axis-name grammar. All other parameters stay at ``fixed``.
    """
    energy = EnergyFunction(measured, array, fixed.layout, f_index)
    name1, vals1 = axis1
    vals1 = np.asarray(vals1, dtype=float)
    idx1, tf1 = _axis_setter(fixed.layout, name1)
    work = fixed.values.copy()
    mode = (
        "broadband" if f_index is None
        else f"single:{measured.grid.frequencies[f_index]:g}"
    )
    if axis2 is None:
        out = np.empty(vals1.size)
        for a, v in enumerate(vals1):
            work[idx1] = tf1(v)
            out[a] = energy(work)
        return EnergyLandscapeSlice((name1,), (vals1,), out, mode)
    name2, vals2 = axis2
    vals2 = np.asarray(vals2, dtype=float)
    idx2, tf2 = _axis_setter(fixed.layout, name2)
    if np.intersect1d(idx1, idx2).size:
        raise ValueError(f"axes {name1!r} and {name2!r} overlap")
    out = np.empty((vals1.size, vals2.size))
    for a, v1 in enumerate(vals1):
        work[idx1] = tf1(v1)
        for b, v2 in enumerate(vals2):
            work[idx2] = tf2(v2)
            out[a, b] = energy(work)
    return EnergyLandscapeSlice((name1, name2), (vals1, vals2), out, mode)


def find_local_minima(values: np.ndarray) -> np.ndarray:
    """Strict discrete local minima of a 1-D or 2-D array.

    2-D uses the full 8-neighborhood; boundary cells compare against their
    existing neighbors only. A cell is a minimum when strictly smaller than
    every neighbor.
    """
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        padded = np.pad(values, 1, constant_values=np.inf)
        return (values < padded[:-2]) & (values < padded[2:])
    if values.ndim != 2:
        raise ValueError("expected a 1-D or 2-D array")
    padded = np.pad(values, 1, constant_values=np.inf)
    mask = np.ones_like(values, dtype=bool)
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            if di == 0 and dj == 0:
                continue
            neigh = padded[1 + di : padded.shape[0] - 1 + di,
                           1 + dj : padded.shape[1] - 1 + dj]
            mask &= values < neigh
    return mask


def find_local_maxima(values: np.ndarray) -> np.ndarray:
    return find_local_minima(-np.asarray(values, dtype=float))


# ---------------------------------------------------------------------------
# Point spread function
# ---------------------------------------------------------------------------

def psf(array: MicArray, source_pos, grid, k, averaged: bool = False) -> np.ndarray:
    """Conventional-beamformer point spread function on a focus grid.

    PSF(t|s) = |w(t)^H h(s)|^2 normalized to 1 at t = s, with the
    distance-normalized steering vector and the unit-monopole transfer
    vector h. ``k`` may be a scalar or a sequence of wavenumbers;
    ``averaged=True`` returns the mean of the per-wavenumber PSFs.

    Returns an array shaped like the grid (``grid.shape``).
    """
    source_pos = np.asarray(source_pos, dtype=float).reshape(3)
    points = grid.points()
    ks = np.atleast_1d(np.asarray(k, dtype=float))
    if ks.size > 1 and not averaged:
        raise ValueError("multiple wavenumbers require averaged=True")
    acc = np.zeros(points.shape[0])
    for kv in ks:
        w = steering_matrix_iv(points, array, kv)  # (P, M)
        h = greens_matrix(array, source_pos[None, :], kv)[:, 0]
        resp = np.abs(w.conj() @ h) ** 2
        w_src = steering_vector_iv(source_pos, array, kv)
        peak = abs(np.vdot(w_src, h)) ** 2
        acc += resp / peak
    acc /= ks.size
    return acc.reshape(grid.shape)
