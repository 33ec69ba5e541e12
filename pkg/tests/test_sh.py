import numpy as np
import pytest
from scipy.special import sph_harm_y

from erf.sh import Y00, sh_basis


def _scipy_real_sh(bands, dirs):
    """Real orthonormal SH from scipy's complex harmonics (Condon-Shortley phase)."""
    polar = np.arccos(np.clip(dirs[:, 2], -1, 1))
    azimuth = np.arctan2(dirs[:, 1], dirs[:, 0])
    out = np.empty((dirs.shape[0], bands * bands))
    for l in range(bands):
        for m in range(-l, l + 1):
            y = sph_harm_y(l, abs(m), polar, azimuth)
            if m > 0:
                val = np.sqrt(2.0) * y.real
            elif m < 0:
                val = np.sqrt(2.0) * y.imag
            else:
                val = y.real
            out[:, l * l + l + m] = val
    return out


@pytest.mark.parametrize("bands", [1, 2, 3, 4])
def test_basis_matches_scipy(bands):
    d = np.random.default_rng(bands).normal(size=(200, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    assert np.allclose(sh_basis(bands, d), _scipy_real_sh(bands, d), atol=1e-12)


def test_band0_constant():
    assert Y00 == pytest.approx(1.0 / (2.0 * np.sqrt(np.pi)), abs=1e-15)
    assert Y00 == pytest.approx(0.282095, abs=1e-6)


def test_band1_odd_parity():
    up = sh_basis(2, np.array([0.0, 0.0, 1.0]))
    down = sh_basis(2, np.array([0.0, 0.0, -1.0]))
    assert np.allclose(up[1:], -down[1:])
    assert up[2] > 0


def test_orthonormal_by_quadrature():
    # Gauss-Legendre in cos(polar) x uniform azimuth integrates degree <= 6 exactly
    x, wx = np.polynomial.legendre.leggauss(12)
    az = np.linspace(0, 2 * np.pi, 24, endpoint=False)
    ct, phi = np.meshgrid(x, az, indexing="ij")
    st = np.sqrt(1 - ct ** 2)
    dirs = np.stack([st * np.cos(phi), st * np.sin(phi), ct], -1).reshape(-1, 3)
    w = (wx[:, None] * np.full(az.size, 2 * np.pi / az.size)[None, :]).ravel()
    y = sh_basis(4, dirs)
    gram = (y * w[:, None]).T @ y
    assert np.allclose(gram, np.eye(16), atol=1e-12)


def test_bad_band_count():
    with pytest.raises(ValueError):
        sh_basis(5, np.array([0.0, 0.0, 1.0]))
