"""Isomorphism between conjugate-paired complex states and real coordinates.

A coefficient vector U with values[conj_pair[m]] = conj(values[m]) carries K
real degrees of freedom: the real and imaginary parts of one member of each
pair plus the (real) mean-flow entries.  This module builds the linear map
U = V s between the two representations and transports vectors, covariances,
drift matrices and observation matrices across it.  It is what lets the
complex conditional-Gaussian algebra be checked against plain real-valued
Kalman machinery.
"""

from __future__ import annotations

import numpy as np

from .modes import ModeSet

__all__ = ["RealEmbedding"]


class RealEmbedding:
    """Real coordinates for a conjugate-symmetric complex state.

    Attributes:
        basis: complex (K, K) matrix V with U = V @ s.
        inverse: V^-1.
        coord_labels: names of the real coordinates, aligned with s.
    """

    def __init__(self, ms: ModeSet):
        K = ms.size
        V = np.zeros((K, K), dtype=complex)
        labels = []
        col = 0
        pair = ms.conj_pair
        for m in range(K):
            p = pair[m]
            if p == m:
                V[m, col] = 1.0
                labels.append(f"{ms.modes[m].label}")
                col += 1
            elif p > m:
                V[m, col] = 1.0
                V[p, col] = 1.0
                V[m, col + 1] = 1j
                V[p, col + 1] = -1j
                labels.append(f"re_{ms.modes[m].label}")
                labels.append(f"im_{ms.modes[m].label}")
                col += 2
        assert col == K
        self.ms = ms
        self.basis = V
        self.inverse = np.linalg.inv(V)
        self.coord_labels = labels

    @property
    def size(self) -> int:
        return self.basis.shape[0]

    def vec_to_real(self, u: np.ndarray) -> np.ndarray:
        """Complex state (..., K) -> real coordinates (..., K)."""
        return (np.asarray(u, dtype=complex) @ self.inverse.T).real

    def vec_from_real(self, s: np.ndarray) -> np.ndarray:
        """Real coordinates (..., K) -> conjugate-symmetric complex state."""
        return np.asarray(s, dtype=float) @ self.basis.T

    def cov_to_real(self, R: np.ndarray) -> np.ndarray:
        """Hermitian pair-symmetric covariance -> real symmetric covariance."""
        S = self.inverse @ R @ self.inverse.conj().T
        return S.real

    def cov_from_real(self, S: np.ndarray) -> np.ndarray:
        """Real symmetric covariance -> complex Hermitian covariance."""
        return self.basis @ S @ self.basis.conj().T

    def matrix_to_real(self, M: np.ndarray) -> np.ndarray:
        """Similarity transform of a pair-respecting operator (e.g. a drift)."""
        return (self.inverse @ M @ self.basis).real

    def obs_to_real(self, A: np.ndarray) -> np.ndarray:
        """Observation matrix acting on U -> matrix acting on s."""
        return (A @ self.basis).real
