"""Radix-2 FFT and radial spectrum summaries for local reconstruction patches."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ShapeError


def _is_pow2(n: int) -> bool:
    return n > 0 and n & (n - 1) == 0


def _bit_reverse(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


def fft_last_axis(x: np.ndarray) -> np.ndarray:
    """Iterative decimation-in-time FFT along the last axis (length a power of two)."""
    n = x.shape[-1]
    if not _is_pow2(n):
        raise ShapeError(f"FFT length {n} is not a power of two")
    lead = x.shape[:-1]
    a = np.asarray(x, dtype=np.complex128)[..., _bit_reverse(n)]
    size = 2
    while size <= n:
        half = size // 2
        tw = np.exp(-2j * np.pi * np.arange(half) / size)
        blocks = a.reshape(lead + (n // size, size))
        even = blocks[..., :half]
        odd = blocks[..., half:] * tw
        a = np.concatenate([even + odd, even - odd], axis=-1).reshape(lead + (n,))
        size *= 2
    return a


def fft2(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(fft_last_axis(np.swapaxes(fft_last_axis(x), -1, -2)), -1, -2)


@dataclass
class SpectrumReport:
    origin: tuple[int, int]
    size: int
    log_magnitude: np.ndarray
    band_energy: np.ndarray
    spectral_energy: float
    patch_energy: float

    @property
    def parseval_rel_err(self) -> float:
        return abs(self.spectral_energy - self.patch_energy) / max(self.patch_energy, 1e-300)

    def high_band_energy(self, cutoff: float = 0.25) -> float:
        """Energy in radial bands at or beyond ``cutoff * size`` bins from DC."""
        start = int(np.ceil(cutoff * self.size))
        return float(self.band_energy[start:].sum())


def fft2_magnitude(patch: np.ndarray, origin: tuple[int, int] = (0, 0)) -> SpectrumReport:
    """Centered log-magnitude spectrum and radial energies of a square patch.

    Color patches are reduced to gray by the channel mean. Band energies use
    ``|F|^2 / P^2`` so they sum to the patch's sum of squares.
    """
    g = patch.mean(axis=-1) if patch.ndim == 3 else np.asarray(patch, dtype=np.float64)
    P = g.shape[0]
    if g.ndim != 2 or g.shape[1] != P:
        raise ShapeError(f"spectrum patch must be square, got {g.shape}")
    if not _is_pow2(P):
        raise ShapeError(f"spectrum patch size {P} is not a power of two")
    F = np.roll(fft2(g), (P // 2, P // 2), axis=(0, 1))
    power = np.abs(F) ** 2 / (P * P)
    yy, xx = np.indices((P, P))
    radius = np.floor(np.hypot(yy - P // 2, xx - P // 2)).astype(np.int64)
    bands = np.bincount(radius.ravel(), weights=power.ravel())
    return SpectrumReport(
        origin=tuple(origin),
        size=P,
        log_magnitude=np.log1p(np.abs(F)),
        band_energy=bands,
        spectral_energy=float(power.sum()),
        patch_energy=float((g * g).sum()),
    )
