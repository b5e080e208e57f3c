"""Image quality metrics and Reinhard tone mapping."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage

from .errors import InvalidArgument, NegativeInput, ShapeMismatch, TooSmall
from .modulo import modulus

DEFAULT_PEAK = 2.0 ** 10 - 1
MU_LAW = 5000.0
SSIM_K1, SSIM_K2 = 0.01, 0.03
SSIM_SIGMA, SSIM_RADIUS = 1.5, 5
Q_WINDOW = 8


def _pair(ref, est):
    ref = np.asarray(ref, dtype=np.float64)
    est = np.asarray(est, dtype=np.float64)
    if ref.shape != est.shape:
        raise ShapeMismatch(f"reference {ref.shape} vs estimate {est.shape}")
    if ref.ndim == 2:
        ref, est = ref[..., None], est[..., None]
    return ref, est


def psnr_l(ref, est, peak: float = DEFAULT_PEAK) -> float:
    """Linear-domain PSNR in dB; ``inf`` when the images are identical."""
    ref, est = _pair(ref, est)
    mse = float(np.mean((ref - est) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def mu_law(v, mu: float = MU_LAW) -> np.ndarray:
    """``log(1 + mu v) / log(1 + mu)`` on peak-normalised values (negatives clipped to 0)."""
    v = np.maximum(np.asarray(v, dtype=np.float64), 0.0)
    return np.log1p(mu * v) / np.log1p(mu)


def psnr_mu(ref, est, peak: float = DEFAULT_PEAK) -> float:
    """PSNR after mu-law compression (mu = 5000), a stand-in for perceptual encodings."""
    ref, est = _pair(ref, est)
    return psnr_l(mu_law(ref / peak), mu_law(est / peak), peak=1.0)


def _gaussian_window() -> np.ndarray:
    t = np.arange(-SSIM_RADIUS, SSIM_RADIUS + 1, dtype=np.float64)
    g = np.exp(-t * t / (2 * SSIM_SIGMA ** 2))
    return g / g.sum()


def _smooth_valid(img: np.ndarray) -> np.ndarray:
    g = _gaussian_window()
    out = ndimage.correlate1d(img, g, axis=0, mode="reflect")
    out = ndimage.correlate1d(out, g, axis=1, mode="reflect")
    r = SSIM_RADIUS
    return out[r:-r, r:-r]


def ssim_map(ref, est, peak: float = DEFAULT_PEAK) -> np.ndarray:
    """Per-position SSIM over valid 11x11 Gaussian windows, shape (H-10, W-10, C)."""
    ref, est = _pair(ref, est)
    if min(ref.shape[:2]) < 2 * SSIM_RADIUS + 1:
        raise TooSmall(f"SSIM needs images of at least 11x11, got {ref.shape[:2]}")
    x, y = ref / peak, est / peak
    c1, c2 = SSIM_K1 ** 2, SSIM_K2 ** 2
    mx, my = _smooth_valid(x), _smooth_valid(y)
    sxx = _smooth_valid(x * x) - mx * mx
    syy = _smooth_valid(y * y) - my * my
    sxy = _smooth_valid(x * y) - mx * my
    return ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))


def ssim(ref, est, peak: float = DEFAULT_PEAK) -> float:
    return float(ssim_map(ref, est, peak).mean())


def q_index_map(ref, est, window: int = Q_WINDOW) -> np.ndarray:
    """Universal quality index of every ``window`` x ``window`` patch, shape (H-w+1, W-w+1, C)."""
    ref, est = _pair(ref, est)
    if min(ref.shape[:2]) < window:
        raise TooSmall(f"Q-index needs images of at least {window}x{window}")
    xw = sliding_window_view(ref, (window, window), axis=(0, 1))
    yw = sliding_window_view(est, (window, window), axis=(0, 1))
    mx = xw.mean(axis=(-2, -1))
    my = yw.mean(axis=(-2, -1))
    dx = xw - mx[..., None, None]
    dy = yw - my[..., None, None]
    sxx = (dx * dx).mean(axis=(-2, -1))
    syy = (dy * dy).mean(axis=(-2, -1))
    sxy = (dx * dy).mean(axis=(-2, -1))
    num = 4 * sxy * mx * my
    var_term = sxx + syy
    lum_term = mx * mx + my * my
    den = var_term * lum_term
    q = np.ones_like(num)
    full = den != 0
    q[full] = num[full] / den[full]
    # zero variance in both windows: only the luminance factor is defined
    flat = (var_term == 0) & (lum_term != 0)
    q[flat] = 2 * mx[flat] * my[flat] / lum_term[flat]
    # zero means with some variance: the luminance factor is taken as 1
    dark = (lum_term == 0) & (var_term != 0)
    q[dark] = 2 * sxy[dark] / var_term[dark]
    return q


def q_index(ref, est, window: int = Q_WINDOW) -> float:
    return float(q_index_map(ref, est, window).mean())


def align_dc(ref, est, snap_bits: int | None = None) -> np.ndarray:
    """Shift ``est`` so its per-channel mean matches ``ref``.

    With ``snap_bits`` the shift is rounded to the nearest multiple of ``2^snap_bits``,
    i.e. only whole wrap counts are corrected.
    """
    r, e = _pair(ref, est)
    shift = r.mean(axis=(0, 1)) - e.mean(axis=(0, 1))
    if snap_bits is not None:
        m = modulus(snap_bits)
        shift = m * np.round(shift / m)
    out = e + shift
    return out.reshape(np.shape(est))


def reinhard_tonemap(x, alpha: float = 1.0, beta: float = 1.0, epsilon: float = 1e-6) -> np.ndarray:
    """Global Reinhard operator on BT.709 luminance, colour ratios preserved."""
    x = np.asarray(x, dtype=np.float64)
    if np.any(x < 0):
        raise NegativeInput("tone mapping expects non-negative intensities")
    if not (alpha > 0 and beta > 0):
        raise InvalidArgument("alpha and beta must be positive")
    xs = alpha * x
    if xs.ndim == 3 and xs.shape[-1] == 3:
        lum = (xs @ np.array([0.2126, 0.7152, 0.0722]))[..., None]
    elif xs.ndim == 3 and xs.shape[-1] != 1:
        raise ShapeMismatch("tone mapping expects 1 or 3 channels")
    else:
        lum = xs
    lum_tm = lum / (lum + beta)
    return xs * (lum_tm / (lum + epsilon))


@dataclass
class MetricReport:
    psnr_l: float
    ssim_l: float
    q_index: float
    psnr_mu: float
    alignment: str = "none"
    per_channel: list[dict] = field(default_factory=list)

    CSV_COLUMNS = ("alignment", "psnr_l", "ssim_l", "q_index", "psnr_mu")

    def to_dict(self) -> dict:
        def clean(v):
            if isinstance(v, float) and math.isinf(v):
                return "inf" if v > 0 else "-inf"
            if isinstance(v, dict):
                return {k: clean(u) for k, u in v.items()}
            if isinstance(v, list):
                return [clean(u) for u in v]
            return v
        return clean(asdict(self))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def csv_row(self) -> str:
        buf = io.StringIO()
        d = self.to_dict()
        csv.writer(buf, lineterminator="\n").writerow([d[c] for c in self.CSV_COLUMNS])
        return buf.getvalue()


def evaluate(ref, est, peak: float = DEFAULT_PEAK, align: str = "none", bits: int = 8) -> MetricReport:
    """Compute every metric after optional DC alignment (``none``, ``mean`` or ``snap``)."""
    r, e = _pair(ref, est)
    if align == "mean":
        e = align_dc(r, e)
    elif align == "snap":
        e = align_dc(r, e, snap_bits=bits)
    elif align != "none":
        raise InvalidArgument(f"unknown alignment {align!r}")
    per_channel = []
    for c in range(r.shape[-1]):
        rc, ec = r[..., c], e[..., c]
        per_channel.append({"psnr_l": psnr_l(rc, ec, peak), "ssim_l": ssim(rc, ec, peak),
                            "q_index": q_index(rc, ec), "psnr_mu": psnr_mu(rc, ec, peak)})
    return MetricReport(psnr_l(r, e, peak), ssim(r, e, peak), q_index(r, e), psnr_mu(r, e, peak),
                        align, per_channel if r.shape[-1] > 1 else [])
