"""Grid-based reference methods: conventional beamforming maps and CLEAN-SC.

Maps are computed with the distance-normalized steering vector on a
rectilinear focus grid. The CSM diagonal is removed by default (self-noise
exclusion); the removed energy is compensated with the denominator
correction 1 - sum|w|^4 / (sum|w|^2)^2 and negative residuals are clipped
to zero. CLEAN-SC iteratively subtracts the source-coherent CSM component
at the map peak and accumulates source-parts in source-strength units
(Pa^2/Hz), calibrated via the steering response to an on-grid monopole.
"""

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .csm import CsmSet
from .propagation import steering_matrix_iv
from .scene import MicArray

FOUR_PI = 4.0 * np.pi


def _axis_points(lo: float, hi: float, step: float) -> np.ndarray:
    if step <= 0.0:
        raise ValueError("grid step must be > 0")
    if hi < lo:
        raise ValueError("grid max must be >= min")
    n = int(math.floor((hi - lo) / step + 1e-9)) + 1
    return lo + step * np.arange(n)


@dataclass(frozen=True)
class FocusGrid:
    """Axis-aligned rectilinear focus grid; each axis is (min, max, step) in m."""

    x1: tuple
    x2: tuple
    x3: tuple = (0.0, 0.0, 1.0)

    def __post_init__(self):
        for axis in range(3):
            self.axis_values(axis)  # validates step > 0 and max >= min

    def axis_values(self, axis: int) -> np.ndarray:
        spec = (self.x1, self.x2, self.x3)[axis]
        return _axis_points(*[float(v) for v in spec])

    @property
    def shape(self) -> tuple:
        return tuple(self.axis_values(a).size for a in range(3))

    def points(self) -> np.ndarray:
        """All grid points, shape (P, 3); the x3 index varies fastest."""
        g1, g2, g3 = (self.axis_values(a) for a in range(3))
        mesh = np.meshgrid(g1, g2, g3, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)


def default_focus_grid() -> FocusGrid:
    """The built-in line-array focus plane: x1 in [-1, 1], x2 in [0.3, 0.7],
    0.01 m spacing, x3 = 0."""
    return FocusGrid((-1.0, 1.0, 0.01), (0.3, 0.7, 0.01), (0.0, 0.0, 1.0))


@dataclass(frozen=True)
class SourcePartSet:
    """Sparse per-frequency source atoms: (position, frequency, power > 0)."""

    positions: np.ndarray  # (K, 3) m
    frequencies: np.ndarray  # (K,) Hz
    powers: np.ndarray  # (K,) Pa^2/Hz

    def __post_init__(self):
        pos = np.atleast_2d(np.asarray(self.positions, dtype=float)).reshape(-1, 3)
        freq = np.atleast_1d(np.asarray(self.frequencies, dtype=float))
        pw = np.atleast_1d(np.asarray(self.powers, dtype=float))
        if not (pos.shape[0] == freq.size == pw.size):
            raise ValueError("positions, frequencies, and powers must have equal length")
        if np.any(pw <= 0.0):
            raise ValueError("source-part powers must be strictly positive")
        for name, arr in (("positions", pos), ("frequencies", freq), ("powers", pw)):
            arr = np.ascontiguousarray(arr)
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    def __len__(self) -> int:
        return self.powers.size

    @classmethod
    def empty(cls) -> "SourcePartSet":
        return cls(np.empty((0, 3)), np.empty(0), np.empty(0))

    def at_frequency(self, f_hz: float) -> "SourcePartSet":
        mask = self.frequencies == f_hz
        return SourcePartSet(self.positions[mask], self.frequencies[mask], self.powers[mask])

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("# source-parts v1\n")
            fh.write("x1_m,x2_m,x3_m,f_hz,q_pa2_per_hz\n")
            for pos, f, q in zip(self.positions, self.frequencies, self.powers):
                fh.write(
                    f"{pos[0]:.17g},{pos[1]:.17g},{pos[2]:.17g},{f:.17g},{q:.17g}\n"
                )

    @classmethod
    def from_csv(cls, path) -> "SourcePartSet":
        rows = []
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line or line.startswith("#") or line.startswith("x1_m"):
                    continue
                rows.append([float(v) for v in line.split(",")])
        if not rows:
            return cls.empty()
        arr = np.asarray(rows)
        return cls(arr[:, :3], arr[:, 3], arr[:, 4])


class _GridSteering:
    """Per-frequency steering products for a fixed grid/array pair."""

    def __init__(self, grid: FocusGrid, array: MicArray):
        self.points = grid.points()
        self.array = array
        r = np.linalg.norm(self.points[:, None, :] - array.positions[None, :, :], axis=-1)
        if np.any(r == 0.0):
            raise ValueError("a focus point coincides with a microphone")
        s2 = np.sum(r**-2, axis=1)
        s4 = np.sum(r**-4, axis=1)
        # Diagonal-removal compensation 1 - sum|w|^4/(sum|w|^2)^2.
        self.dr_correction = 1.0 - s4 / s2**2
        # |w^H h|^2 for a unit monopole at the focus point itself.
        self.source_gain = s2 / (16.0 * np.pi**2 * array.m)

    def steering(self, k: float) -> np.ndarray:
        return steering_matrix_iv(self.points, self.array, k)

    def beam_map(self, csm_matrix: np.ndarray, w: np.ndarray, remove_diagonal: bool) -> np.ndarray:
        b_full = np.einsum("pm,mn,pn->p", w.conj(), csm_matrix, w, optimize=True).real
        if not remove_diagonal:
            return b_full
        diag = np.diagonal(csm_matrix).real
        b = b_full - (np.abs(w) ** 2) @ diag
        b /= self.dr_correction
        return np.maximum(b, 0.0)


def conventional_map(csm: CsmSet, array: MicArray, grid: FocusGrid, f_index: int,
                     remove_diagonal: bool = True) -> np.ndarray:
    """Conventional beamformer power map w^H C w on the focus grid.

    With ``remove_diagonal`` the CSM diagonal is excluded, the loss is
    compensated by the denominator correction, and negative residual values
    are clipped to zero. Returns an array shaped ``grid.shape``.
    """
    if not 0 <= f_index < csm.f:
        raise ValueError(f"f_index {f_index} out of range [0, {csm.f})")
    steer = _GridSteering(grid, array)
    w = steer.steering(float(csm.grid.wavenumbers[f_index]))
    return steer.beam_map(csm.data[f_index], w, remove_diagonal).reshape(grid.shape)


def _clean_sc_one_frequency(csm_matrix, k, steer: _GridSteering, loop_gain,
                            max_iterations, stop_tol, remove_diagonal):
    """CLEAN-SC loop for one frequency; returns {point_index: power}."""
    g = np.array(csm_matrix, dtype=complex)
    parts: dict = {}
    prev_norm = float(np.linalg.norm(g))
    if prev_norm == 0.0:
        return parts
    w_matrix = steer.steering(k)
    for _ in range(max_iterations):
        bmap = steer.beam_map(g, w_matrix, remove_diagonal)
        p_star = int(np.argmax(bmap))
        peak = float(bmap[p_star])
        if peak <= 0.0:
            break
        w = w_matrix[p_star]
        p_full = float(np.real(np.vdot(w, g @ w)))
        if p_full <= 0.0:
            break
        h_cs = g @ w / p_full
        g_new = g - loop_gain * p_full * np.outer(h_cs, h_cs.conj())
        new_norm = float(np.linalg.norm(g_new))
        if new_norm >= prev_norm:
            break
        parts[p_star] = parts.get(p_star, 0.0) + loop_gain * peak / steer.source_gain[p_star]
        g = g_new
        rel_decrease = (prev_norm - new_norm) / prev_norm
        prev_norm = new_norm
        if rel_decrease < stop_tol:
            break
    return parts


def clean_sc(csm: CsmSet, array: MicArray, grid: FocusGrid, loop_gain: float = 0.9,
             max_iterations: int = 50, stop_tol: float = 1e-6,
             remove_diagonal: bool = True, threads: int = 1) -> SourcePartSet:
    """CLEAN-SC deconvolution on every grid frequency.

    Per frequency: find the map peak, build the source-coherent CSM
    component there, subtract the loop-gain-scaled component from the
    degraded CSM, and accumulate a source-part at the peak grid point.
    Stops when the degraded-CSM Frobenius norm no longer decreases, its
    relative decrease falls below ``stop_tol``, or after
    ``max_iterations``. Parts extracted at the same grid point are merged.
    """
    if not 0.0 < loop_gain <= 1.0:
        raise ValueError("loop gain must be in (0, 1]")
    if max_iterations < 1:
        raise ValueError("max_iterations must be >= 1")
    if stop_tol <= 0.0:
        raise ValueError("stop_tol must be > 0")
    steer = _GridSteering(grid, array)
    ks = csm.grid.wavenumbers

    def run(fi: int):
        return _clean_sc_one_frequency(
            csm.data[fi], float(ks[fi]), steer, loop_gain, max_iterations,
            stop_tol, remove_diagonal,
        )

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            per_freq = list(pool.map(run, range(csm.f)))
    else:
        per_freq = [run(fi) for fi in range(csm.f)]

    positions, frequencies, powers = [], [], []
    for fi, parts in enumerate(per_freq):
        for p_idx in sorted(parts):
            positions.append(steer.points[p_idx])
            frequencies.append(csm.grid.frequencies[fi])
            powers.append(parts[p_idx])
    if not positions:
        return SourcePartSet.empty()
    return SourcePartSet(np.asarray(positions), np.asarray(frequencies), np.asarray(powers))
