"""Delay-and-sum and MUSIC acoustic maps on a spherical tessellation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dsp import CrossSpectralMatrix
from .geometry import SteeringMatrix, Tessellation

MUSIC_EPS = 1e-12


@dataclass(frozen=True)
class SphericalAcousticMap:
    intensities: np.ndarray
    band_hz: float
    tessellation: Tessellation | None = None

    def __post_init__(self):
        x = np.asarray(self.intensities, dtype=float)
        if not np.all(np.isfinite(x)) or np.any(x < 0):
            raise ValueError("acoustic map intensities must be finite and non-negative")
        object.__setattr__(self, "intensities", x)


def _check(entries, A):
    if entries.shape[-1] != A.shape[0] or entries.shape[-2] != A.shape[0]:
        raise ValueError(f"CSM of size {entries.shape[-2:]} does not match steering "
                         f"matrix with {A.shape[0]} channels")


def quadratic_forms(entries: np.ndarray, steer: np.ndarray) -> np.ndarray:
    """``real(s_n^H C s_n)`` for every column ``s_n`` of ``steer``; batched over leading axes."""
    return np.sum(steer.conj() * (entries @ steer), axis=-2).real


def das_intensities(entries: np.ndarray, A: np.ndarray) -> np.ndarray:
    _check(entries, A)
    return np.clip(quadratic_forms(entries, A), 0.0, None)


def das_map(csm: CrossSpectralMatrix, A: SteeringMatrix, tess: Tessellation | None = None
            ) -> SphericalAcousticMap:
    """Delay-and-sum image ``a_n^H C a_n`` per direction (matched filter)."""
    return SphericalAcousticMap(das_intensities(csm.entries, A.entries), csm.band_hz, tess)


def sorted_eigh(C: np.ndarray):
    """Hermitian eigendecomposition, eigenvalues descending.

    Each eigenvector is rotated so its first non-negligible component is real positive.
    """
    w, V = np.linalg.eigh(C)
    w, V = w[..., ::-1], V[..., ::-1]
    mag = np.abs(V)
    first = np.argmax(mag > 1e-12 * mag.max(axis=-2, keepdims=True), axis=-2)
    pivot = np.take_along_axis(V, first[..., None, :], axis=-2)
    phase = np.where(np.abs(pivot) > 0, pivot / np.where(pivot == 0, 1, np.abs(pivot)), 1)
    return w, V / phase


def music_intensities(entries: np.ndarray, A: np.ndarray, n_sources: int) -> np.ndarray:
    _check(entries, A)
    M = A.shape[0]
    if not 1 <= n_sources < M:
        raise ValueError(f"n_sources must be in [1, {M - 1}], got {n_sources}")
    _, V = sorted_eigh(entries)
    noise = V[..., :, n_sources:]
    proj = np.conj(np.swapaxes(noise, -1, -2)) @ A
    return 1.0 / (np.sum(np.abs(proj) ** 2, axis=-2) + MUSIC_EPS)


def music_spectrum(csm: CrossSpectralMatrix, A: SteeringMatrix, n_sources: int,
                   tess: Tessellation | None = None) -> SphericalAcousticMap:
    """MUSIC pseudo-spectrum ``1 / (a^H E_n E_n^H a + eps)`` from the noise subspace."""
    return SphericalAcousticMap(music_intensities(csm.entries, A.entries, n_sources),
                                csm.band_hz, tess)


def minmax(x: np.ndarray, axis=-1) -> np.ndarray:
    """Min-max normalize to [0, 1] along ``axis``; constant slices become 0."""
    lo = x.min(axis=axis, keepdims=True)
    span = x.max(axis=axis, keepdims=True) - lo
    return np.where(span > 0, (x - lo) / np.where(span > 0, span, 1.0), 0.0)


def fuse_bands(maps: np.ndarray) -> np.ndarray:
    """Sum of per-band min-max normalized maps; ``maps`` is (..., F, N)."""
    return minmax(maps, axis=-1).sum(axis=-2)
