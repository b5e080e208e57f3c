"""Finite differences with Neumann boundaries and the DCT-domain x-update.

Operators act on the two leading (spatial) axes; any trailing channel axis is
processed independently.
"""
from __future__ import annotations

from functools import lru_cache
from typing import NamedTuple

import numpy as np
from scipy import fft

from .errors import InvalidRho, ShapeMismatch
from .modulo import DEFAULT_SENSOR_BITS, centered_mod


class GradientField(NamedTuple):
    """Horizontal (``dh``) and vertical (``dv``) forward differences."""

    dh: np.ndarray
    dv: np.ndarray

    def __add__(self, other):
        return GradientField(self.dh + other.dh, self.dv + other.dv)

    def __mul__(self, scalar):
        return GradientField(self.dh * scalar, self.dv * scalar)

    __rmul__ = __mul__

    def inner(self, other) -> float:
        return float(np.sum(self.dh * other.dh) + np.sum(self.dv * other.dv))


def forward_diff(x) -> GradientField:
    x = np.asarray(x, dtype=np.float64)
    dh = np.zeros_like(x)
    dv = np.zeros_like(x)
    dh[:, :-1] = x[:, 1:] - x[:, :-1]
    dv[:-1] = x[1:] - x[:-1]
    return GradientField(dh, dv)


def _div_axis(g, axis):
    # adjoint of the forward difference along ``axis``; last entry of g is ignored
    g = np.moveaxis(g, axis, 0)
    out = np.zeros_like(g)
    out[:-1] -= g[:-1]
    out[1:] += g[:-1]
    return np.moveaxis(out, 0, axis)


def divergence(g: GradientField) -> np.ndarray:
    """Adjoint ``Δᵀ`` of :func:`forward_diff` (a negative divergence).

    ``divergence(forward_diff(x))`` is the 5-point Laplacian stencil
    ``4x - (neighbours)`` with mirrored neighbours at the borders.
    """
    return _div_axis(np.asarray(g.dh, dtype=np.float64), 1) + _div_axis(np.asarray(g.dv, dtype=np.float64), 0)


def wrapped_gradient(y, b: int = DEFAULT_SENSOR_BITS) -> GradientField:
    g = forward_diff(y)
    return GradientField(centered_mod(g.dh, b), centered_mod(g.dv, b))


def dct2(x) -> np.ndarray:
    """Orthonormal type-II DCT over the two spatial axes."""
    return fft.dctn(np.asarray(x, dtype=np.float64), type=2, norm="ortho", axes=(0, 1))


def idct2(X) -> np.ndarray:
    return fft.idctn(np.asarray(X, dtype=np.float64), type=2, norm="ortho", axes=(0, 1))


@lru_cache(maxsize=64)
def _laplacian_eigenvalues(height: int, width: int) -> np.ndarray:
    m = np.arange(height)[:, None]
    n = np.arange(width)[None, :]
    lam = 2.0 * (2.0 - np.cos(np.pi * m / height) - np.cos(np.pi * n / width))
    lam.setflags(write=False)
    return lam


def laplacian_eigenvalues(height: int, width: int) -> np.ndarray:
    """DCT-domain eigenvalues of ``ΔᵀΔ``: ``2(2 - cos(πm/M) - cos(πn/N))``."""
    return _laplacian_eigenvalues(int(height), int(width))


class SpectralGrid(NamedTuple):
    denom: np.ndarray
    rho: float
    height: int
    width: int

    @classmethod
    def build(cls, height: int, width: int, rho: float) -> "SpectralGrid":
        if not rho > 0:
            raise InvalidRho(f"rho must be positive, got {rho}")
        denom = laplacian_eigenvalues(height, width) + rho / 2.0
        return cls(denom, float(rho), int(height), int(width))


def _spectral(denom, shape):
    # broadcast an (H, W) denominator over trailing channel axes
    return denom.reshape(denom.shape + (1,) * (len(shape) - 2))


def x_update(v: GradientField, x_tilde, rho: float) -> np.ndarray:
    """Minimiser of ``||Δx - v||² + (ρ/2)||x - x̃||²`` via one DCT solve."""
    x_tilde = np.asarray(x_tilde, dtype=np.float64)
    if v.dh.shape != x_tilde.shape or v.dv.shape != x_tilde.shape:
        raise ShapeMismatch(f"gradient field {v.dh.shape} vs image {x_tilde.shape}")
    grid = SpectralGrid.build(x_tilde.shape[0], x_tilde.shape[1], rho)
    rhs = divergence(v) + (rho / 2.0) * x_tilde
    return idct2(dct2(rhs) / _spectral(grid.denom, rhs.shape))


def poisson_integrate(v: GradientField, dc: float = 0.0) -> np.ndarray:
    """Least-squares integration of a gradient field, with ``mean(output) == dc``."""
    rhs = divergence(v)
    h, w = rhs.shape[:2]
    lam = laplacian_eigenvalues(h, w).copy()
    lam[0, 0] = 1.0
    spec = dct2(rhs) / _spectral(lam, rhs.shape)
    # orthonormal DC coefficient of a constant c is c * sqrt(HW)
    spec[0, 0] = dc * np.sqrt(h * w)
    return idct2(spec)
