"""Pure-numpy reference implementation of the hot fitting kernels.

Used as the import-time fallback when the compiled extension is not
available, and as the comparison baseline in the benchmark and parity
tests. Both backends share the ScenarioKernel interface: the constant
scenario data (microphones, wavenumbers, pair indices, measured entries,
pole flags) is bound once, and each evaluation passes one flat buffer
holding [positions (N,3) | theta (N) | phi (N) | q_mono (N,F) | q_dip (N,F)].
"""

import numpy as np

FOUR_PI = 4.0 * np.pi


class ScenarioKernel:
    def __init__(self, mic_xyz, wavenumbers, i_idx, j_idx, c_meas, has_mono, has_dip):
        self.mic_xyz = np.ascontiguousarray(mic_xyz, dtype=float)
        self.wavenumbers = np.ascontiguousarray(wavenumbers, dtype=float)
        self.i_idx = np.ascontiguousarray(i_idx, dtype=np.int64)
        self.j_idx = np.ascontiguousarray(j_idx, dtype=np.int64)
        self.c_meas = np.ascontiguousarray(c_meas, dtype=complex)
        self.has_mono = np.ascontiguousarray(has_mono, dtype=np.uint8)
        self.has_dip = np.ascontiguousarray(has_dip, dtype=np.uint8)
        self.n_src = self.has_mono.size
        self.n_f = self.wavenumbers.size
        self.n_mic = self.mic_xyz.shape[0]

    def _unpack(self, packed):
        n, n_f = self.n_src, self.n_f
        packed = np.asarray(packed, dtype=float)
        pos = packed[: 3 * n].reshape(n, 3)
        theta = packed[3 * n : 4 * n]
        phi = packed[4 * n : 5 * n]
        q_mono = packed[5 * n : 5 * n + n * n_f].reshape(n, n_f)
        q_dip = packed[5 * n + n * n_f :].reshape(n, n_f)
        return pos, theta, phi, q_mono, q_dip

    def model_pair_entries(self, packed) -> np.ndarray:
        """Modeled strictly-lower-triangular CSM entries, shape (F, P)."""
        pos, theta, phi, q_mono, q_dip = self._unpack(packed)
        cmod = np.zeros((self.n_f, self.i_idx.size), dtype=complex)
        for n in range(self.n_src):
            r = self.mic_xyz - pos[n]  # (M, 3)
            d = np.linalg.norm(r, axis=1)
            phase = np.exp(-1j * np.outer(self.wavenumbers, d))  # (F, M)
            if self.has_mono[n]:
                g = phase / (FOUR_PI * d)[None, :]
                cmod += q_mono[n][:, None] * (g[:, self.i_idx] * g[:, self.j_idx].conj())
            if self.has_dip[n]:
                st = np.sin(theta[n])
                axis = np.array(
                    [st * np.cos(phi[n]), st * np.sin(phi[n]), np.cos(theta[n])]
                )
                dot = (r @ axis) / d
                radial = (1.0 / d**2)[None, :] + 1j * np.outer(self.wavenumbers, 1.0 / d)
                g = dot[None, :] * phase * radial / FOUR_PI
                cmod += q_dip[n][:, None] * (g[:, self.i_idx] * g[:, self.j_idx].conj())
        return cmod

    def residual_sums(self, packed) -> np.ndarray:
        """Per-frequency sums over pairs of |c_mod - c_meas|^2, shape (F,)."""
        resid = self.model_pair_entries(packed)
        resid -= self.c_meas
        return np.sum(resid.real**2 + resid.imag**2, axis=1)
