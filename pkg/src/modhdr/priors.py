"""Denoisers for the z-subproblem.

Classical proximal denoisers (identity, median, DCT thresholding) operate per
channel. The learned prior is a flat residual CNN of 3x3 convolutions that
takes the mean-removed image plus a constant noise-level plane as input, so
its output does not depend on the (weakly determined) image DC level.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .errors import InvalidArgument, InvalidWindow, MissingWeights, ShapeMismatch
from .gradient import dct2, idct2

DENOISER_KINDS = ("identity", "median", "dct-threshold", "conv")
PRESETS = {"small": 8, "medium": 16, "large": 32}


@dataclass(frozen=True)
class DenoiserSpec:
    kind: str = "identity"
    window: int = 3
    threshold_rule: str = "hard"
    tau0: float = 3.0
    base_channels: int = 16
    num_blocks: int = 4
    channels: int = 1
    # DN value mapped to 1.0 at the network input; also normalises the sigma plane
    scale: float = 256.0

    def __post_init__(self):
        if self.kind not in DENOISER_KINDS:
            raise InvalidArgument(f"unknown denoiser kind {self.kind!r}")
        if self.threshold_rule not in ("hard", "soft"):
            raise InvalidArgument(f"unknown threshold rule {self.threshold_rule!r}")
        if self.num_blocks < 1 or self.base_channels < 1:
            raise InvalidArgument("conv architecture needs num_blocks >= 1 and base_channels >= 1")

    @classmethod
    def preset(cls, name: str, channels: int = 1, **kw) -> "DenoiserSpec":
        """Named conv sizes: ``small`` (8), ``medium`` (16) and ``large`` (32) base channels."""
        if name not in PRESETS:
            raise InvalidArgument(f"unknown preset {name!r}; expected one of {sorted(PRESETS)}")
        return cls(kind="conv", base_channels=PRESETS[name], channels=channels, **kw)

    @property
    def in_channels(self) -> int:
        return self.channels + 1

    def layer_shapes(self) -> list[tuple[int, int]]:
        """(C_in, C_out) of each 3x3 convolution, ``num_blocks + 1`` layers in total."""
        widths = [self.in_channels] + [self.base_channels] * self.num_blocks + [self.channels]
        return list(zip(widths[:-1], widths[1:]))

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserSpec":
        return cls(**d)


@dataclass
class DenoiserWeights:
    """Ordered named tensors ``conv{i}.weight`` (3, 3, C_in, C_out) and ``conv{i}.bias``."""

    spec: DenoiserSpec
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        expected = weight_shapes(self.spec)
        if list(self.tensors) != list(expected):
            raise ShapeMismatch(f"expected tensors {list(expected)}, got {list(self.tensors)}")
        for name, shape in expected.items():
            if self.tensors[name].shape != shape:
                raise ShapeMismatch(f"{name}: expected {shape}, got {self.tensors[name].shape}")

    @property
    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        n = len(self.spec.layer_shapes())
        return [(self.tensors[f"conv{i}.weight"], self.tensors[f"conv{i}.bias"]) for i in range(n)]

    def copy(self) -> "DenoiserWeights":
        return DenoiserWeights(self.spec, {k: v.copy() for k, v in self.tensors.items()})

    @classmethod
    def zeros(cls, spec: DenoiserSpec) -> "DenoiserWeights":
        return cls(spec, {k: np.zeros(s) for k, s in weight_shapes(spec).items()})


def weight_shapes(spec: DenoiserSpec) -> dict[str, tuple[int, ...]]:
    shapes = {}
    for i, (cin, cout) in enumerate(spec.layer_shapes()):
        shapes[f"conv{i}.weight"] = (3, 3, cin, cout)
        shapes[f"conv{i}.bias"] = (cout,)
    return shapes


def param_count(spec: DenoiserSpec) -> int:
    return sum((9 * cin + 1) * cout for cin, cout in spec.layer_shapes())


def kaiming_normal(shape, fan_in: int, rng: np.random.Generator) -> np.ndarray:
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


def init_weights(spec: DenoiserSpec, seed: int = 0) -> DenoiserWeights:
    if spec.kind != "conv":
        raise InvalidArgument("init_weights only applies to conv denoisers")
    rng = np.random.default_rng(seed)
    tensors = {}
    for i, (cin, cout) in enumerate(spec.layer_shapes()):
        tensors[f"conv{i}.weight"] = kaiming_normal((3, 3, cin, cout), 9 * cin, rng)
        tensors[f"conv{i}.bias"] = np.zeros(cout)
    return DenoiserWeights(spec, tensors)


# --- 3x3 convolution with reflect padding -------------------------------------

def _reflect_index(n: int) -> np.ndarray:
    if n == 1:
        return np.zeros(3, dtype=np.intp)
    return np.concatenate([[1], np.arange(n), [n - 2]]).astype(np.intp)


def _im2col(x: np.ndarray) -> np.ndarray:
    h, w, c = x.shape
    p = x[_reflect_index(h)][:, _reflect_index(w)]
    cols = np.empty((h, w, 3, 3, c))
    for dy in range(3):
        for dx in range(3):
            cols[:, :, dy, dx] = p[dy:dy + h, dx:dx + w]
    return cols.reshape(h * w, 9 * c)


def conv3x3(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Stride-1 cross-correlation of an (H, W, C_in) image with a (3, 3, C_in, C_out) kernel."""
    h, w, cin = x.shape
    if weight.shape[:3] != (3, 3, cin):
        raise ShapeMismatch(f"kernel {weight.shape} does not accept {cin} input channels")
    out = _im2col(x) @ weight.reshape(9 * cin, -1) + bias
    return out.reshape(h, w, -1)


def conv3x3_vjp(x: np.ndarray, weight: np.ndarray, grad_out: np.ndarray):
    """Gradients of :func:`conv3x3` w.r.t. (x, weight, bias)."""
    h, w, cin = x.shape
    cout = weight.shape[-1]
    g = grad_out.reshape(h * w, cout)
    gw = (_im2col(x).T @ g).reshape(weight.shape)
    gb = g.sum(axis=0)
    gcols = (g @ weight.reshape(9 * cin, cout).T).reshape(h, w, 3, 3, cin)
    gp = np.zeros((h + 2, w + 2, cin))
    for dy in range(3):
        for dx in range(3):
            gp[dy:dy + h, dx:dx + w] += gcols[:, :, dy, dx]
    rows = np.zeros((h, w + 2, cin))
    np.add.at(rows, _reflect_index(h), gp)
    gx = np.zeros((h, w, cin))
    np.add.at(gx, (slice(None), _reflect_index(w)), rows)
    return gx, gw, gb


def conv_forward(x_aug, spec: DenoiserSpec, weights: DenoiserWeights) -> np.ndarray:
    """Run the CNN body: conv, ReLU, ..., conv (no activation on the output)."""
    x = np.asarray(x_aug, dtype=np.float64)
    if x.ndim != 3 or x.shape[-1] != spec.in_channels:
        raise ShapeMismatch(f"expected (H, W, {spec.in_channels}) input, got {x.shape}")
    layers = weights.layers
    for i, (wt, bs) in enumerate(layers):
        x = conv3x3(x, wt, bs)
        if i < len(layers) - 1:
            x = np.maximum(x, 0.0)
    return x


def sigma_plane(shape, sigma: float, scale: float) -> np.ndarray:
    return np.full(tuple(shape[:2]) + (1,), sigma / scale)


# --- classical denoisers ------------------------------------------------------

def dct_threshold(z, threshold: float, rule: str = "hard") -> np.ndarray:
    """Global DCT shrinkage per channel; the DC coefficient is left untouched."""
    coef = dct2(z)
    dc = coef[0, 0].copy()
    if rule == "hard":
        coef = np.where(np.abs(coef) < threshold, 0.0, coef)
    else:
        coef = np.sign(coef) * np.maximum(np.abs(coef) - threshold, 0.0)
    coef[0, 0] = dc
    return idct2(coef)


def median(z, window: int) -> np.ndarray:
    if window < 1 or window % 2 == 0:
        raise InvalidWindow(f"median window must be a positive odd integer, got {window}")
    size = (window, window) + (1,) * (z.ndim - 2)
    return ndimage.median_filter(z, size=size, mode="reflect")


def denoise(z_tilde, sigma: float, spec: DenoiserSpec, weights: DenoiserWeights | None = None) -> np.ndarray:
    z = np.asarray(z_tilde, dtype=np.float64)
    if sigma < 0:
        raise InvalidArgument("sigma must be non-negative")
    if spec.kind == "identity":
        return z
    if spec.kind == "median":
        return median(z, spec.window)
    if spec.kind == "dct-threshold":
        return dct_threshold(z, spec.tau0 * sigma, spec.threshold_rule)
    if weights is None:
        raise MissingWeights("conv denoiser requires weights")
    squeeze = z.ndim == 2
    z3 = z[..., None] if squeeze else z
    centered = z3 - z3.mean(axis=(0, 1), keepdims=True)
    inp = np.concatenate([centered / spec.scale, sigma_plane(z3.shape, sigma, spec.scale)], axis=-1)
    out = z3 + spec.scale * conv_forward(inp, spec, weights)
    return out[..., 0] if squeeze else out


def with_channels(spec: DenoiserSpec, channels: int) -> DenoiserSpec:
    return replace(spec, channels=channels)
