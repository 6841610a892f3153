"""Cross-spectral matrices: synthesis, snapshot simulation, superposition,
reduction to upper-triangular entries, the diagonal ground-truth PSD
estimator, and file I/O.

A CsmSet holds one Hermitian M x M matrix per grid frequency in Pa^2/Hz.
Only strictly off-diagonal entries enter the fitting energies; pairs are
enumerated as (i, j) with i > j, exactly M*(M-1)/2 of them.
"""

import json
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .scene import FrequencyGrid, MicArray, Scene, SourceObject
from .propagation import greens_matrix

_BINARY_MAGIC = b"#csm-binary-v1\n"
_TEXT_MAGIC = "#csm-text-v1"


def upper_tri_pairs(m: int):
    """Index pair arrays (i, j) with i > j covering each off-diagonal pair once.

    Row-major order: (1,0), (2,0), (2,1), (3,0), ...
    """
    if m < 2:
        raise ValueError("need at least 2 microphones for off-diagonal pairs")
    return np.tril_indices(m, k=-1)


@dataclass(frozen=True)
class CsmSet:
    """Per-frequency Hermitian cross-spectral matrices on a shared grid."""

    data: np.ndarray  # (F, M, M) complex128, Pa^2/Hz
    grid: FrequencyGrid

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=complex)
        if arr.ndim != 3 or arr.shape[1] != arr.shape[2]:
            raise ValueError(f"CSM data must be (F, M, M), got {arr.shape}")
        if arr.shape[0] != self.grid.f:
            raise ValueError(
                f"CSM has {arr.shape[0]} frequencies, grid has {self.grid.f}"
            )
        # Hermitian symmetrization; exact no-op for already-Hermitian input.
        arr = 0.5 * (arr + np.conj(np.swapaxes(arr, 1, 2)))
        diag = np.diagonal(arr, axis1=1, axis2=2).real
        if np.any(diag < -1e-12):
            raise ValueError("CSM diagonal entries must be >= -1e-12 Pa^2/Hz")
        arr = np.ascontiguousarray(arr)
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def m(self) -> int:
        return self.data.shape[1]

    @property
    def f(self) -> int:
        return self.data.shape[0]

    def pair_entries(self) -> np.ndarray:
        """Strictly-lower-triangular entries per frequency, shape (F, M*(M-1)/2)."""
        i_idx, j_idx = upper_tri_pairs(self.m)
        return np.ascontiguousarray(self.data[:, i_idx, j_idx])

    def select(self, f_indices) -> "CsmSet":
        """Sub-set restricted to the given frequency indices."""
        f_indices = np.atleast_1d(np.asarray(f_indices, dtype=int))
        grid = FrequencyGrid(self.grid.frequencies[f_indices], self.grid.speed_of_sound)
        return CsmSet(self.data[f_indices], grid)


def pole_transfer(array: MicArray, source: SourceObject, grid: FrequencyGrid) -> dict:
    """Transfer vectors per present pole, each of shape (F, M)."""
    out = {}
    ks = grid.wavenumbers
    for pole in source.poles:
        h = np.empty((grid.f, array.m), dtype=complex)
        for fi, k in enumerate(ks):
            if pole == "monopole":
                col = greens_matrix(array, source.position[None, :], k)
            else:
                col = greens_matrix(
                    array, source.position[None, :], k, pole="dipole",
                    theta=[source.theta], phi=[source.phi],
                )
            h[fi] = col[:, 0]
        out[pole] = h
    return out


def synthesize_csm(scene: Scene) -> CsmSet:
    """Noise-free CSM of a scene: incoherent superposition of rank-one
    pole contributions, C(f) = sum_n sum_poles q(f) * h h^H."""
    m = scene.array.m
    data = np.zeros((scene.grid.f, m, m), dtype=complex)
    for source in scene.sources:
        transfers = pole_transfer(scene.array, source, scene.grid)
        for pole, h in transfers.items():
            q = getattr(source, pole)
            data += q[:, None, None] * np.einsum("fi,fj->fij", h, h.conj())
    return CsmSet(data, scene.grid)


def snapshot_csm(scene: Scene, snapshots: int, seed: int) -> CsmSet:
    """Welch-style CSM estimate from a finite number of snapshots.

    Per frequency, each pole radiates an independent circular complex
    Gaussian amplitude with E[|a|^2] = q(f); the CSM is the average of the
    snapshot outer products p p^H. Bit-identical for a fixed seed; converges
    to :func:`synthesize_csm` at the 1/sqrt(S) Monte-Carlo rate.
    """
    if snapshots < 1:
        raise ValueError("snapshot count must be >= 1")
    rng = np.random.default_rng(seed)
    m = scene.array.m
    # Flatten all (source, pole) combinations into one emitter list.
    transfers = []  # (F, M) each
    powers = []  # (F,) each
    for source in scene.sources:
        tr = pole_transfer(scene.array, source, scene.grid)
        for pole, h in tr.items():
            transfers.append(h)
            powers.append(getattr(source, pole))
    data = np.zeros((scene.grid.f, m, m), dtype=complex)
    if not transfers:
        return CsmSet(data, scene.grid)
    h_all = np.stack(transfers, axis=1)  # (F, K, M)
    q_all = np.stack(powers, axis=1)  # (F, K)
    n_emit = h_all.shape[1]
    for fi in range(scene.grid.f):
        gauss = rng.standard_normal((snapshots, n_emit, 2))
        amp = np.sqrt(q_all[fi] / 2.0)[None, :] * (gauss[..., 0] + 1j * gauss[..., 1])
        p = amp @ h_all[fi]  # (S, M)
        data[fi] = (p.T @ p.conj()) / snapshots
    return CsmSet(data, scene.grid)


def superpose(a: CsmSet, b: CsmSet) -> CsmSet:
    """Element-wise sum of two CSM sets on identical grids."""
    if a.m != b.m:
        raise ValueError(f"microphone counts differ: {a.m} vs {b.m}")
    if a.grid.speed_of_sound != b.grid.speed_of_sound or not np.array_equal(
        a.grid.frequencies, b.grid.frequencies
    ):
        raise ValueError("CSM sets must share an identical frequency grid")
    return CsmSet(a.data + b.data, a.grid)


@dataclass(frozen=True)
class SpectrumEstimate:
    """Per-frequency mean with a 1-sigma band."""

    mean: np.ndarray  # (F,)
    std: np.ndarray  # (F,)


def ground_truth_psd(csm: CsmSet, position, array: MicArray) -> SpectrumEstimate:
    """Diagonal ground-truth PSD estimator for a presumed monopole position.

    Divides the off-diagonal CSM entries element-wise by the corresponding
    entries of the ideal unit-monopole rank-one CSM h h^H and returns the
    mean and standard deviation of the magnitudes over the pairs.
    """
    position = np.asarray(position, dtype=float).reshape(3)
    i_idx, j_idx = upper_tri_pairs(csm.m)
    ks = csm.grid.wavenumbers
    mean = np.empty(csm.f)
    std = np.empty(csm.f)
    for fi, k in enumerate(ks):
        h = greens_matrix(array, position[None, :], k)[:, 0]
        t_pairs = h[i_idx] * np.conj(h[j_idx])
        if np.any(t_pairs == 0.0):
            raise ValueError("ideal-monopole CSM has a zero off-diagonal entry")
        ratios = np.abs(csm.data[fi, i_idx, j_idx] / t_pairs)
        mean[fi] = ratios.mean()
        std[fi] = ratios.std()
    return SpectrumEstimate(mean, std)


# ---------------------------------------------------------------------------
# File I/O. Binary: magic line, one JSON header line, then little-endian
# complex128 data in C order (F, M, M). Text: header lines then one
# "re im" pair per entry, row-major, one block per frequency.
# ---------------------------------------------------------------------------

def _header_dict(csm: CsmSet) -> dict:
    return {
        "m": csm.m,
        "f": csm.f,
        "frequencies_hz": [float(v) for v in csm.grid.frequencies],
        "speed_of_sound_m_per_s": csm.grid.speed_of_sound,
        "units": "Pa^2/Hz",
        "dtype": "complex128",
        "byte_order": "little",
    }


def save_csm(csm: CsmSet, path, fmt: str = "binary") -> None:
    if fmt == "binary":
        payload = csm.data.astype("<c16", copy=False)
        with open(path, "wb") as fh:
            fh.write(_BINARY_MAGIC)
            fh.write((json.dumps(_header_dict(csm)) + "\n").encode("utf-8"))
            fh.write(payload.tobytes(order="C"))
        return
    if fmt == "text":
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(_TEXT_MAGIC + "\n")
            fh.write(json.dumps(_header_dict(csm)) + "\n")
            for fi in range(csm.f):
                fh.write(f"# f = {csm.grid.frequencies[fi]:.17g} Hz\n")
                for row in csm.data[fi]:
                    fh.write(
                        " ".join(f"{v.real:.17g} {v.imag:.17g}" for v in row) + "\n"
                    )
        return
    raise ValueError(f"unknown CSM format {fmt!r} (use 'binary' or 'text')")


def load_csm(path) -> CsmSet:
    with open(path, "rb") as fh:
        first = fh.readline()
        if first == _BINARY_MAGIC:
            header = json.loads(fh.readline().decode("utf-8"))
            count = header["f"] * header["m"] * header["m"]
            raw = np.frombuffer(fh.read(), dtype="<c16", count=count)
            data = raw.reshape(header["f"], header["m"], header["m"]).astype(complex)
        elif first.strip().decode("utf-8", errors="replace") == _TEXT_MAGIC:
            header = json.loads(fh.readline().decode("utf-8"))
            m = header["m"]
            rows = []
            for line in fh.read().decode("utf-8").splitlines():
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                vals = np.array(line.split(), dtype=float)
                rows.append(vals[0::2] + 1j * vals[1::2])
            data = np.array(rows).reshape(header["f"], m, m)
        else:
            raise ValueError(f"{path}: not a CSM file (unknown magic)")
    grid = FrequencyGrid(
        np.asarray(header["frequencies_hz"], dtype=float),
        float(header["speed_of_sound_m_per_s"]),
    )
    return CsmSet(data, grid)
