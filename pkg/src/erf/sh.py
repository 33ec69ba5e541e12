"""Real spherical harmonics in Cartesian form, up to four bands."""

from __future__ import annotations

import numpy as np

from . import _kernels

MAX_BANDS = 4

Y00 = _kernels.SH_C0


def sh_basis(bands: int, dirs: np.ndarray) -> np.ndarray:
    """Evaluate the first ``bands**2`` basis functions.

    Args:
        bands: number of SH bands (1..4).
        dirs: unit directions, shape (..., 3).

    Returns:
        Array of shape (..., bands**2).
    """
    if not 1 <= bands <= MAX_BANDS:
        raise ValueError(f"sh bands must be in 1..{MAX_BANDS}, got {bands}")
    dirs = np.asarray(dirs, dtype=np.float64)
    flat = dirs.reshape(-1, 3)
    out = np.empty((flat.shape[0], bands * bands))
    for i, (x, y, z) in enumerate(flat):
        _kernels.sh_basis(bands, x, y, z, out[i])
    return out.reshape(dirs.shape[:-1] + (bands * bands,))


def sh_radiance_raw(coeffs: np.ndarray, bands: int, direction: np.ndarray) -> np.ndarray:
    """Raw (unconstrained) RGB for channel-major coefficients of length 3*bands**2."""
    basis = sh_basis(bands, direction)
    return np.asarray(coeffs, dtype=np.float64).reshape(3, bands * bands) @ basis
