"""Measurement scenes: microphone arrays, frequency grids, and source objects.

All positions are in meters, frequencies in Hz, power spectral densities in
Pa^2/Hz, angles in radians. Decibel levels use the reference 4e-10 Pa^2/Hz,
i.e. Q = 10*log10(q / 4e-10).
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

#: Reference PSD for dB conversion, (2e-5 Pa)^2 per Hz.
REF_POWER = 4e-10

#: Default speed of sound in m/s.
SPEED_OF_SOUND = 343.0

BUILTIN_CASE_IDS = ("case1", "case2", "case3", "case4", "case6")


def db_from_power(q):
    """Convert PSD in Pa^2/Hz to dB/Hz: Q = 10*log10(q / 4e-10).

    q = 0 maps to -inf (a silent pole), never NaN. Negative q raises.
    Accepts scalars or arrays.
    """
    q_arr = np.asarray(q, dtype=float)
    if np.any(q_arr < 0.0):
        raise ValueError("PSD must be >= 0 Pa^2/Hz for dB conversion")
    with np.errstate(divide="ignore"):
        out = 10.0 * np.log10(q_arr / REF_POWER)
    if np.isscalar(q) or q_arr.ndim == 0:
        return float(out)
    return out


def power_from_db(q_db):
    """Convert dB/Hz back to Pa^2/Hz: q = 4e-10 * 10^(Q/10). -inf maps to 0."""
    q_db_arr = np.asarray(q_db, dtype=float)
    out = REF_POWER * np.power(10.0, q_db_arr / 10.0)
    if np.isscalar(q_db) or q_db_arr.ndim == 0:
        return float(out)
    return out


def canonical_dipole_angles(theta: float, phi: float) -> tuple:
    """Wrap spherical dipole angles into theta in [0, pi], phi in [0, 2*pi)."""
    theta = float(theta) % (2.0 * np.pi)
    phi = float(phi)
    if theta > np.pi:
        theta = 2.0 * np.pi - theta
        phi += np.pi
    phi %= 2.0 * np.pi
    if phi == 2.0 * np.pi:  # tiny negative inputs wrap to the modulus itself
        phi = 0.0
    return theta, phi


def dipole_axis_error(theta_a: float, phi_a: float, theta_b: float, phi_b: float) -> float:
    """Angle in [0, pi/2] between two dipole axes.

    A dipole field is invariant under (theta, phi) -> (pi - theta, phi + pi)
    (axis flip), so the error is measured between undirected axes.
    """
    from .propagation import dipole_direction

    ea = dipole_direction(theta_a, phi_a)
    eb = dipole_direction(theta_b, phi_b)
    c = min(abs(float(np.dot(ea, eb))), 1.0)
    return float(np.arccos(c))


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=float)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class MicArray:
    """Ordered microphone positions; row m of a CSM always refers to positions[m]."""

    positions: np.ndarray  # (M, 3) meters

    def __post_init__(self):
        pos = np.atleast_2d(np.asarray(self.positions, dtype=float))
        if pos.ndim != 2 or pos.shape[1] != 3:
            raise ValueError(f"microphone positions must be (M, 3), got {pos.shape}")
        if pos.shape[0] < 2:
            raise ValueError("a microphone array needs at least 2 microphones")
        diff = pos[:, None, :] - pos[None, :, :]
        dist = np.linalg.norm(diff, axis=-1)
        np.fill_diagonal(dist, np.inf)
        if np.any(dist == 0.0):
            raise ValueError("microphone positions must be pairwise distinct")
        object.__setattr__(self, "positions", _readonly(pos))

    @property
    def m(self) -> int:
        return self.positions.shape[0]


@dataclass(frozen=True)
class FrequencyGrid:
    """Ascending frequency grid plus the speed of sound used for wavenumbers."""

    frequencies: np.ndarray  # (F,) Hz
    speed_of_sound: float = SPEED_OF_SOUND

    def __post_init__(self):
        f = np.atleast_1d(np.asarray(self.frequencies, dtype=float))
        if f.ndim != 1 or f.size < 1:
            raise ValueError("frequency grid must be a non-empty 1-D sequence")
        if np.any(f <= 0.0):
            raise ValueError("all frequencies must be > 0 Hz")
        if f.size > 1 and np.any(np.diff(f) <= 0.0):
            raise ValueError("frequencies must be strictly increasing")
        if not self.speed_of_sound > 0.0:
            raise ValueError("speed of sound must be > 0 m/s")
        object.__setattr__(self, "frequencies", _readonly(f))
        object.__setattr__(self, "speed_of_sound", float(self.speed_of_sound))

    @property
    def f(self) -> int:
        return self.frequencies.size

    @property
    def wavenumbers(self) -> np.ndarray:
        """k = 2*pi*f / a for every grid frequency."""
        return 2.0 * np.pi * self.frequencies / self.speed_of_sound


@dataclass(frozen=True)
class SourceObject:
    """One acoustic source: a position shared by all poles and frequencies,
    optional monopole and dipole PSDs, and a dipole orientation.

    A pole is "present but silent" when its spectrum is all zeros; it is
    absent when the spectrum is None.
    """

    position: np.ndarray  # (3,) meters
    monopole: Optional[np.ndarray] = None  # (F,) Pa^2/Hz
    dipole: Optional[np.ndarray] = None  # (F,) Pa^2/Hz
    theta: float = 0.0  # rad, dipole polar angle
    phi: float = 0.0  # rad, dipole azimuth

    def __post_init__(self):
        pos = np.asarray(self.position, dtype=float).reshape(3)
        object.__setattr__(self, "position", _readonly(pos))
        if self.monopole is None and self.dipole is None:
            raise ValueError("a source object needs at least one pole spectrum")
        for name in ("monopole", "dipole"):
            spec = getattr(self, name)
            if spec is None:
                continue
            spec = np.atleast_1d(np.asarray(spec, dtype=float))
            if spec.ndim != 1:
                raise ValueError(f"{name} spectrum must be 1-D")
            if np.any(spec < 0.0):
                raise ValueError(f"{name} spectrum entries must be >= 0 Pa^2/Hz")
            object.__setattr__(self, name, _readonly(spec))
        theta, phi = canonical_dipole_angles(self.theta, self.phi)
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "phi", phi)

    @property
    def poles(self) -> tuple:
        out = []
        if self.monopole is not None:
            out.append("monopole")
        if self.dipole is not None:
            out.append("dipole")
        return tuple(out)

    def total_power(self) -> np.ndarray:
        """Per-frequency sum of all pole PSDs."""
        total = None
        for name in ("monopole", "dipole"):
            spec = getattr(self, name)
            if spec is not None:
                total = spec.copy() if total is None else total + spec
        return total


@dataclass(frozen=True)
class Scene:
    """A microphone array, a frequency grid, and the true source objects."""

    array: MicArray
    grid: FrequencyGrid
    sources: tuple = field(default_factory=tuple)

    def __post_init__(self):
        sources = tuple(self.sources)
        for i, src in enumerate(sources):
            for name in ("monopole", "dipole"):
                spec = getattr(src, name)
                if spec is not None and spec.size != self.grid.f:
                    raise ValueError(
                        f"sources[{i}].{name} has {spec.size} entries, "
                        f"grid has {self.grid.f} frequencies"
                    )
            d = np.linalg.norm(self.array.positions - src.position[None, :], axis=1)
            if np.any(d == 0.0):
                raise ValueError(f"sources[{i}] coincides with a microphone")
        object.__setattr__(self, "sources", sources)


def line_array(n_mics: int, x1_min: float = -0.5, x1_max: float = 0.5) -> MicArray:
    """Equidistant 1-D array along x1 at x2 = x3 = 0."""
    x1 = np.linspace(x1_min, x1_max, n_mics)
    pos = np.zeros((n_mics, 3))
    pos[:, 0] = x1
    return MicArray(pos)


def _octave_band_grid() -> FrequencyGrid:
    # 2^10 .. 2^15 Hz in steps of 1024 Hz (F = 32)
    return FrequencyGrid(np.arange(1024.0, 32768.0 + 1.0, 1024.0))


def _flat(db: float, f: int) -> np.ndarray:
    return np.full(f, power_from_db(db))


def builtin_case(case_id: str, alt_grid: bool = False) -> Scene:
    """Return one of the built-in synthetic scenes.

    case1   one monopole, q = 1 Pa^2/Hz, 5-mic line array
    case2   two monopoles (q = 1 and 0.5 Pa^2/Hz), 5-mic line array
    case3   one monopole, Q = 100 dB/Hz, 11-mic line array
    case4   two monopoles, Q_I ramps 90 -> 110 dB/Hz, Q_II = 100 dB/Hz
    case6   two multipoles (monopole + dipole), 11-mic line array

    ``alt_grid`` selects the wide 100 Hz .. 20 kHz grid (step 100 Hz) for
    case1/case2 instead of the default 2^10 .. 2^15 Hz grid.
    """
    if case_id not in BUILTIN_CASE_IDS:
        raise ValueError(
            f"unknown case id {case_id!r}; available: {', '.join(BUILTIN_CASE_IDS)}"
        )
    if alt_grid and case_id not in ("case1", "case2"):
        raise ValueError("alt_grid is only defined for case1 and case2")

    if case_id in ("case1", "case2"):
        grid = (
            FrequencyGrid(np.arange(100.0, 20000.0 + 1.0, 100.0))
            if alt_grid
            else _octave_band_grid()
        )
        array = line_array(5)
        s1 = SourceObject([0.5, 0.5, 0.0], monopole=np.full(grid.f, 1.0))
        if case_id == "case1":
            return Scene(array, grid, (s1,))
        s2 = SourceObject([0.5, 0.6, 0.0], monopole=np.full(grid.f, 0.5))
        return Scene(array, grid, (s1, s2))

    grid = _octave_band_grid()
    array = line_array(11)
    if case_id == "case3":
        src = SourceObject([0.5, 0.5, 0.0], monopole=_flat(100.0, grid.f))
        return Scene(array, grid, (src,))
    if case_id == "case4":
        # Q_I(f) = a0*f + b0 dB/Hz, rising from 90 dB at 2^10 Hz to 110 dB at 2^15 Hz
        a0 = 5.0 / 7936.0
        b0 = 2770.0 / 31.0
        q1 = power_from_db(a0 * grid.frequencies + b0)
        s1 = SourceObject([0.5, 0.5, 0.0], monopole=q1)
        s2 = SourceObject([0.5, 0.6, 0.0], monopole=_flat(100.0, grid.f))
        return Scene(array, grid, (s1, s2))
    # case6: multipoles, amplitudes constant over frequency
    s1 = SourceObject(
        [0.5, 0.5, 0.0],
        monopole=_flat(100.0, grid.f),
        dipole=_flat(60.0, grid.f),
        theta=np.pi / 2,
        phi=0.0,
    )
    s2 = SourceObject(
        [0.0, 0.5, 0.0],
        monopole=np.zeros(grid.f),  # silent pole, Q = -inf
        dipole=_flat(40.0, grid.f),
        theta=np.pi / 2,
        phi=np.pi / 2,
    )
    return Scene(array, grid, (s1, s2))


# ---------------------------------------------------------------------------
# Structured-text (dict) serialization; YAML wrapping lives in the CLI.
# ---------------------------------------------------------------------------

def scene_to_dict(scene: Scene) -> dict:
    """Serialize a scene with explicit units in the key names."""
    sources = []
    for src in scene.sources:
        entry = {"position_m": [float(v) for v in src.position]}
        if src.monopole is not None:
            entry["monopole"] = {"psd_pa2_per_hz": [float(v) for v in src.monopole]}
        if src.dipole is not None:
            entry["dipole"] = {
                "psd_pa2_per_hz": [float(v) for v in src.dipole],
                "theta_rad": float(src.theta),
                "phi_rad": float(src.phi),
            }
        sources.append(entry)
    return {
        "microphones_m": [[float(v) for v in row] for row in scene.array.positions],
        "frequencies_hz": [float(v) for v in scene.grid.frequencies],
        "speed_of_sound_m_per_s": scene.grid.speed_of_sound,
        "sources": sources,
    }


def _pole_psd(block: dict, n_freqs: int, where: str) -> np.ndarray:
    if "psd_pa2_per_hz" in block:
        raw = np.atleast_1d(np.asarray(block["psd_pa2_per_hz"], dtype=float))
    elif "psd_db_per_hz" in block:
        raw = power_from_db(np.atleast_1d(np.asarray(block["psd_db_per_hz"], dtype=float)))
    else:
        raise ValueError(f"{where}: needs psd_pa2_per_hz or psd_db_per_hz")
    if raw.size == 1:
        return np.full(n_freqs, raw[0])
    if raw.size != n_freqs:
        raise ValueError(f"{where}: spectrum has {raw.size} entries, grid has {n_freqs}")
    return raw


def scene_from_dict(data: dict) -> Scene:
    """Inverse of :func:`scene_to_dict`. Scalar PSDs are broadcast over the grid."""
    if "builtin" in data:
        return builtin_case(data["builtin"], alt_grid=bool(data.get("alt_grid", False)))
    try:
        array = MicArray(np.asarray(data["microphones_m"], dtype=float))
        grid = FrequencyGrid(
            np.asarray(data["frequencies_hz"], dtype=float),
            float(data.get("speed_of_sound_m_per_s", SPEED_OF_SOUND)),
        )
    except KeyError as exc:
        raise ValueError(f"scene: missing required field {exc.args[0]!r}") from None
    sources = []
    for i, entry in enumerate(data.get("sources", [])):
        where = f"scene.sources[{i}]"
        if "position_m" not in entry:
            raise ValueError(f"{where}: missing position_m")
        mono = dip = None
        theta = phi = 0.0
        if "monopole" in entry:
            mono = _pole_psd(entry["monopole"], grid.f, where + ".monopole")
        if "dipole" in entry:
            block = entry["dipole"]
            dip = _pole_psd(block, grid.f, where + ".dipole")
            theta = float(block.get("theta_rad", 0.0))
            phi = float(block.get("phi_rad", 0.0))
        sources.append(
            SourceObject(entry["position_m"], monopole=mono, dipole=dip, theta=theta, phi=phi)
        )
    return Scene(array, grid, tuple(sources))
