"""Free-field Green's functions, Green's matrices, and steering vectors.

The monopole transfer function between a source at y and a microphone at x is
exp(-j*k*d) / (4*pi*d) with d = |x - y|; the dipole adds the near/far-field
factor (1/d^2 + j*k/d) and the projection of the dipole axis onto the
source-to-microphone direction. No far-field approximation is used anywhere.
"""

import numpy as np

from .scene import MicArray

FOUR_PI = 4.0 * np.pi


def monopole_green(x, y, k: float) -> complex:
    """Free-field monopole transfer function exp(-j*k*d)/(4*pi*d)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    d = float(np.linalg.norm(x - y))
    if d == 0.0:
        raise ValueError("monopole Green's function is singular at d = 0")
    return complex(np.exp(-1j * k * d) / (FOUR_PI * d))


def dipole_direction(theta: float, phi: float) -> np.ndarray:
    """Unit dipole axis [sin(theta)cos(phi), sin(theta)sin(phi), cos(theta)]."""
    st = np.sin(theta)
    return np.array([st * np.cos(phi), st * np.sin(phi), np.cos(theta)])


def dipole_green(x, y, k: float, theta: float, phi: float) -> complex:
    """Free-field dipole transfer function.

    (e_dip . e_n) * exp(-j*k*d)/(4*pi) * (1/d^2 + j*k/d), where e_n is the
    unit vector from the source y toward the microphone x.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    r = x - y
    d = float(np.linalg.norm(r))
    if d == 0.0:
        raise ValueError("dipole Green's function is singular at d = 0")
    e_n = r / d
    dot = float(np.dot(dipole_direction(theta, phi), e_n))
    return complex(dot * np.exp(-1j * k * d) / FOUR_PI * (1.0 / d**2 + 1j * k / d))


def greens_matrix(array: MicArray, positions, k: float, pole: str = "monopole",
                  theta=None, phi=None) -> np.ndarray:
    """Green's matrix H with H[m, n] = h(x_m, y_n) for one wavenumber.

    Parameters
    ----------
    array : MicArray
    positions : (N, 3) source positions in meters
    k : wavenumber in 1/m
    pole : "monopole" or "dipole"
    theta, phi : (N,) dipole angles in radians, required for pole="dipole"
    """
    positions = np.atleast_2d(np.asarray(positions, dtype=float))
    if positions.shape[1] != 3:
        raise ValueError("source positions must be (N, 3)")
    mics = array.positions
    # r[m, n, :] = x_m - y_n
    r = mics[:, None, :] - positions[None, :, :]
    d = np.linalg.norm(r, axis=-1)
    bad = np.argwhere(d == 0.0)
    if bad.size:
        m, n = bad[0]
        raise ValueError(f"source {n} coincides with microphone {m} (d = 0)")
    phase = np.exp(-1j * k * d)
    if pole == "monopole":
        return phase / (FOUR_PI * d)
    if pole == "dipole":
        if theta is None or phi is None:
            raise ValueError("dipole Green's matrix needs theta and phi")
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        phi = np.atleast_1d(np.asarray(phi, dtype=float))
        axes = np.stack(
            [np.sin(theta) * np.cos(phi), np.sin(theta) * np.sin(phi), np.cos(theta)],
            axis=-1,
        )  # (N, 3)
        dot = np.einsum("mnc,nc->mn", r, axes) / d  # e_dip . e_n per (m, n)
        return dot * phase / FOUR_PI * (1.0 / d**2 + 1j * k / d)
    raise ValueError(f"unknown pole type {pole!r}")


def propagation_columns(h_matrix: np.ndarray) -> np.ndarray:
    """Columns t_n = vec(h_n h_n^H) of the propagation operator, shape (M^2, N).

    Row-major vectorization: entry i*M + j of column n is H[i, n]*conj(H[j, n]),
    i.e. reshaping a column to (M, M) in C order yields the rank-one Hermitian
    matrix h_n h_n^H. The modeled CSM for source strengths q is then
    (columns @ q).reshape(M, M).
    """
    h_matrix = np.atleast_2d(np.asarray(h_matrix, dtype=complex))
    m, n = h_matrix.shape
    t = np.einsum("in,jn->ijn", h_matrix, h_matrix.conj())
    return t.reshape(m * m, n)


def steering_vector_iv(grid_point, array: MicArray, k: float) -> np.ndarray:
    """Distance-normalized steering vector (formulation IV).

    w_m = exp(-j*k*r_m) / (r_m * sqrt(M * sum_l r_l^-2)). Its beamformer
    response to a point source peaks at the true source position; absolute
    map levels are calibrated separately.
    """
    grid_point = np.asarray(grid_point, dtype=float).reshape(3)
    r = np.linalg.norm(array.positions - grid_point[None, :], axis=1)
    if np.any(r == 0.0):
        raise ValueError("focus point coincides with a microphone")
    norm = np.sqrt(array.m * np.sum(r**-2))
    return np.exp(-1j * k * r) / (r * norm)


def steering_matrix_iv(points, array: MicArray, k: float) -> np.ndarray:
    """Vectorized :func:`steering_vector_iv` for many focus points, shape (P, M)."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    r = np.linalg.norm(points[:, None, :] - array.positions[None, :, :], axis=-1)
    if np.any(r == 0.0):
        raise ValueError("a focus point coincides with a microphone")
    norm = np.sqrt(array.m * np.sum(r**-2, axis=1))
    return np.exp(-1j * k * r) / (r * norm[:, None])
