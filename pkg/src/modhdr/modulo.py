"""Modulo sensing physics: wrapping, centered modulo, AWGN and test scenes.

Images are ``numpy`` float64 arrays of shape (H, W) or (H, W, C) in DN units.
All operations here are elementwise, so any shape is accepted.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgument, InvalidDimensions

# 8-bit modulo wrap of 10-bit content
DEFAULT_SENSOR_BITS = 8
DEFAULT_SCENE_BITS = 10

SCENE_KINDS = ("gaussian-bumps", "ramp", "step", "checker")


def modulus(b: int) -> float:
    """Saturation threshold ``2**b`` for a ``b``-bit sensor (1 <= b <= 16)."""
    if not isinstance(b, (int, np.integer)) or not 1 <= b <= 16:
        raise InvalidArgument(f"bit depth must be an integer in [1, 16], got {b!r}")
    return float(2 ** int(b))


def wrap(x, b: int = DEFAULT_SENSOR_BITS) -> np.ndarray:
    """Self-reset sensor response ``x - 2^b floor(x / 2^b)``, in ``[0, 2^b)``.

    Division by a power of two and the subtraction are exact in binary
    floating point, so the result is exact for finite input.
    """
    m = modulus(b)
    x = np.asarray(x, dtype=np.float64)
    v = x - m * np.floor(x / m)
    # tiny negative inputs round up to exactly m
    return np.where(v >= m, v - m, v)


def centered_mod(t, b: int = DEFAULT_SENSOR_BITS) -> np.ndarray:
    """Re-wrap signed differences into the half-open interval ``[-2^(b-1), 2^(b-1))``.

    Implemented as ``wrap(t + 2^(b-1)) - 2^(b-1)``, i.e. rounding ``t / 2^b``
    half-up; exact half-multiples therefore land on ``-2^(b-1)`` for both signs.
    """
    half = modulus(b) / 2
    t = np.asarray(t, dtype=np.float64)
    return wrap(t + half, b) - half


def wrap_counts(x, b: int = DEFAULT_SENSOR_BITS) -> np.ndarray:
    """Integer reset counts ``k`` with ``x == wrap(x) + k * 2^b``."""
    m = modulus(b)
    return np.floor(np.asarray(x, dtype=np.float64) / m)


@dataclass(frozen=True)
class NoiseModel:
    """Additive white Gaussian noise with standard deviation ``sigma`` (DN).

    Noise is drawn from numpy's PCG64 generator seeded with ``seed``, independently
    per pixel and per channel.
    """

    sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.sigma < 0:
            raise InvalidArgument(f"sigma must be non-negative, got {self.sigma}")

    def sample(self, shape) -> np.ndarray:
        rng = np.random.Generator(np.random.PCG64(self.seed))
        return self.sigma * rng.standard_normal(shape)


def sense(x, b: int = DEFAULT_SENSOR_BITS, noise: NoiseModel | None = None) -> np.ndarray:
    """Noisy modulo measurement ``wrap(x + eta)``."""
    x = np.asarray(x, dtype=np.float64)
    if noise is None or noise.sigma == 0:
        return wrap(x, b)
    return wrap(x + noise.sample(x.shape), b)


def standardize_bits(x, target_b: int = DEFAULT_SCENE_BITS) -> np.ndarray:
    """Linearly rescale non-negative content so that its maximum is ``2^target_b - 1``."""
    x = np.asarray(x, dtype=np.float64)
    top = float(x.max()) if x.size else 0.0
    if top <= 0:
        return x.copy()
    target = 2.0 ** target_b - 1
    if top == target:
        return x.copy()
    return x * (target / top)


def _bumps(height, width, seed, n_bumps, width_scale):
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    out = np.zeros((height, width))
    base = width_scale * max(height, width)
    for _ in range(n_bumps):
        cy, cx = rng.uniform(0, height), rng.uniform(0, width)
        amp = rng.uniform(0.3, 1.0)
        s = base * rng.uniform(0.7, 1.3)
        out += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
    return out


def synth_scene(kind: str, height: int, width: int, channels: int = 1,
                peak: float = 2 ** DEFAULT_SCENE_BITS - 1, seed: int = 0,
                max_slope: float = 1 / 16) -> np.ndarray:
    """Deterministic synthetic scene in ``[0, peak]`` with shape (H, W, C).

    ``gaussian-bumps`` sums six random isotropic Gaussians (widths about a
    fifth of the image size), normalised to ``peak`` and then attenuated if
    needed so that ``max|dx| <= max_slope * peak``; with ``max_slope <= 1/8`` any
    ``peak <= 4 * 2^b`` satisfies the centered re-wrap condition
    ``max|dx| < 2^(b-1)``. The default 1/16 leaves headroom for noise. ``ramp`` is a horizontal
    linear ramp with step ``peak / (width - 1)`` (Itoh-safe for width >= 9).
    ``step`` (vertical edge at mid-width) and ``checker`` (8-pixel tiles) jump
    by ``peak`` and deliberately break the condition.
    """
    if height < 4 or width < 4:
        raise InvalidDimensions(f"scene must be at least 4x4, got {height}x{width}")
    if peak <= 0:
        raise InvalidArgument("peak must be positive")
    if not 0 < max_slope <= 1 / 8:
        raise InvalidArgument("max_slope must lie in (0, 1/8]")
    if kind not in SCENE_KINDS:
        raise InvalidArgument(f"unknown scene kind {kind!r}")

    planes = []
    for c in range(channels):
        if kind == "gaussian-bumps":
            p = _bumps(height, width, (seed, c), 6, 0.2)
            p = p - p.min()
            p *= peak / p.max()
            grad = max(np.abs(np.diff(p, axis=0)).max(), np.abs(np.diff(p, axis=1)).max())
            if grad > max_slope * peak:
                p *= max_slope * peak / grad
        elif kind == "ramp":
            p = np.tile(np.linspace(0.0, peak, width), (height, 1))
        elif kind == "step":
            p = np.zeros((height, width))
            p[:, width // 2:] = peak
        else:
            yy, xx = np.mgrid[0:height, 0:width]
            p = np.where(((yy // 8) + (xx // 8)) % 2 == 0, 0.0, peak)
        planes.append(p)
    return np.stack(planes, axis=-1)
