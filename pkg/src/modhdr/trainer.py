"""Training procedures for the unrolled network.

* :func:`pretrain_denoiser` - the CNN prior alone, L1 loss on AWGN-corrupted patches.
* :func:`train_unrolled` - end-to-end L2 training of all layers on wrapped noisy scenes.
* :func:`finetune_se` - self-supervised scaling-equivariance adaptation on
  unlabelled wrapped images.

Reconstruction losses compare mean-removed images: a global offset by a
multiple of ``2^b`` cannot be observed through the modulo sensor.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import backward  # noqa: F401  (re-exported)
from .errors import EmptyDataset, InvalidArgument, ShapeMismatch
from .modulo import DEFAULT_SENSOR_BITS, wrap
from .priors import DenoiserSpec, DenoiserWeights, init_weights
from .reconstruct import UnrolledWeights, denoiser_graph, leaf_params, unrolled_graph


@dataclass(frozen=True)
class TrainConfig:
    sigma_range: tuple[float, float] = (0.0, 80.0)
    batch: int = 4
    steps: int = 200
    lr: float = 1e-3
    loss: str = "L1"
    seed: int = 0
    alpha_range: tuple[float, float] = (0.75, 1.25)
    patch: int = 32
    flips: bool = True
    # Adam step size for the per-layer rho/sigma scalars (defaults to lr)
    hyper_lr: float | None = None

    def __post_init__(self):
        lo, hi = self.sigma_range
        if not 0 <= lo <= hi:
            raise InvalidArgument(f"invalid sigma range {self.sigma_range}")
        a, b = self.alpha_range
        if not 0 < a <= b:
            raise InvalidArgument(f"invalid alpha range {self.alpha_range}")
        if self.lr < 0 or self.batch < 1 or self.steps < 0:
            raise InvalidArgument("lr must be >= 0, batch >= 1, steps >= 0")
        if self.loss not in ("L1", "L2"):
            raise InvalidArgument(f"unknown loss {self.loss!r}")


@dataclass
class AdamState:
    lr: float = 1e-3
    lr_overrides: dict = field(default_factory=dict)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """One bias-corrected Adam update; returns new arrays and advances ``state``."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    out = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeMismatch(f"{name}: gradient {g.shape} vs parameter {p.shape}")
        m = b1 * state.m.get(name, 0.0) + (1 - b1) * g
        v = b2 * state.v.get(name, 0.0) + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / (1 - b1 ** state.t)
        v_hat = v / (1 - b2 ** state.t)
        out[name] = p - state.lr_overrides.get(name, state.lr) * m_hat / (np.sqrt(v_hat) + state.eps)
    return out


@dataclass
class LossHistory:
    rows: list[tuple[int, str, float]] = field(default_factory=list)

    def append(self, step: int, phase: str, loss: float):
        self.rows.append((step, phase, float(loss)))

    def losses(self, phase: str | None = None) -> np.ndarray:
        return np.array([r[2] for r in self.rows if phase is None or r[1] == phase])

    def to_csv(self, stream=None) -> str:
        buf = stream if stream is not None else io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["step", "phase", "loss"])
        for step, phase, loss in self.rows:
            writer.writerow([step, phase, repr(loss)])
        return buf.getvalue() if stream is None else ""


def moving_average(values, window: int = 50) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if values.size < window:
        return np.array([values.mean()])
    return np.convolve(values, np.ones(window) / window, mode="valid")


# --- data sampling ------------------------------------------------------------

def _hwc(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    return img[..., None] if img.ndim == 2 else img


def _flip(img, rng):
    if rng.random() < 0.5:
        img = img[:, ::-1]
    if rng.random() < 0.5:
        img = img[::-1]
    return np.ascontiguousarray(img)


def _sample_patch(dataset, rng, cfg: TrainConfig) -> np.ndarray:
    img = dataset[rng.integers(len(dataset))]
    h, w = img.shape[:2]
    p = min(cfg.patch, h, w)
    i = rng.integers(h - p + 1)
    j = rng.integers(w - p + 1)
    patch = img[i:i + p, j:j + p]
    return _flip(patch, rng) if cfg.flips else patch.copy()


def _check_dataset(dataset, what="dataset"):
    if len(dataset) == 0:
        raise EmptyDataset(f"{what} is empty")
    return [_hwc(x) for x in dataset]


# --- phase 1 ------------------------------------------------------------------

def denoiser_loss(clean, sigma: float, noise, weights: DenoiserWeights, loss: str = "L1"):
    """Loss and parameter gradients of the CNN denoiser on one noisy patch."""
    tape = ad.Tape()
    params = {k: tape.leaf(v, name=k) for k, v in weights.tensors.items()}
    noisy = tape.leaf(clean + noise, name="noisy")
    out = denoiser_graph(noisy, tape.constant(sigma), params, weights.spec)
    resid = out - clean
    value = ad.mean_abs(resid) if loss == "L1" else ad.mean_square(resid)
    grads = tape.backward(value)
    return float(value.value), {k: grads[v] for k, v in params.items()}


def pretrain_denoiser(dataset: Sequence[np.ndarray], spec: DenoiserSpec, cfg: TrainConfig | None = None,
                      weights: DenoiserWeights | None = None):
    """Train the CNN prior alone. Returns ``(weights, history)``."""
    cfg = cfg or TrainConfig()
    data = _check_dataset(dataset)
    if weights is None:
        weights = init_weights(spec, cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    state = AdamState(lr=cfg.lr)
    params = {k: v.copy() for k, v in weights.tensors.items()}
    history = LossHistory()
    for step in range(cfg.steps):
        current = DenoiserWeights(spec, params)
        total, acc = 0.0, {k: np.zeros_like(v) for k, v in params.items()}
        for _ in range(cfg.batch):
            clean = _sample_patch(data, rng, cfg)
            sigma = rng.uniform(*cfg.sigma_range)
            noise = sigma * rng.standard_normal(clean.shape)
            value, grads = denoiser_loss(clean, sigma, noise, current, cfg.loss)
            total += value
            for k in acc:
                acc[k] += grads[k]
        history.append(step, "pretrain", total / cfg.batch)
        params = adam_step(state, params, {k: g / cfg.batch for k, g in acc.items()})
    return DenoiserWeights(spec, params), history


# --- phase 2 ------------------------------------------------------------------

def unrolled_loss(x, y, w: UnrolledWeights, b: int = DEFAULT_SENSOR_BITS):
    """Mean squared (DC-aligned) error of the unrolled output and its gradients."""
    tape = ad.Tape()
    params = leaf_params(tape, w)
    out = unrolled_graph(tape.leaf(_hwc(y), name="y"), params, w.spec, b)
    value = ad.mean_square(ad.center(out - _hwc(x)))
    grads = tape.backward(value)
    return float(value.value), {k: grads[v] for k, v in params.items()}


def _train_loop(w: UnrolledWeights, cfg: TrainConfig, phase: str, sample: Callable):
    rng = np.random.default_rng(cfg.seed)
    state = AdamState(lr=cfg.lr)
    if cfg.hyper_lr is not None:
        state.lr_overrides = {"rho_raw": cfg.hyper_lr, "sigma_raw": cfg.hyper_lr}
    params = {k: v.copy() for k, v in w.params().items()}
    history = LossHistory()
    for step in range(cfg.steps):
        current = w.with_params(params)
        total, acc = 0.0, {k: np.zeros_like(v) for k, v in params.items()}
        for _ in range(cfg.batch):
            value, grads = sample(current, rng)
            total += value
            for k in acc:
                acc[k] += grads[k]
        history.append(step, phase, total / cfg.batch)
        if cfg.lr > 0:
            params = adam_step(state, params, {k: g / cfg.batch for k, g in acc.items()})
    return w.with_params(params), history


def train_unrolled(dataset: Sequence[np.ndarray], w: UnrolledWeights, b: int = DEFAULT_SENSOR_BITS,
                   cfg: TrainConfig | None = None):
    """End-to-end training on ``wrap(x + η)`` with fresh noise at every step."""
    cfg = cfg or TrainConfig(loss="L2", lr=5e-5)
    data = _check_dataset(dataset)

    def sample(current, rng):
        x = _sample_patch(data, rng, cfg)
        sigma = rng.uniform(*cfg.sigma_range)
        y = wrap(x + sigma * rng.standard_normal(x.shape), b)
        return unrolled_loss(x, y, current, b)

    return _train_loop(w, cfg, "unrolled", sample)


# --- scaling equivariance -----------------------------------------------------

def se_pair(y, f: Callable, b: int = DEFAULT_SENSOR_BITS, alpha: float = 1.0):
    """Virtual pair ``x2 = α f(y)``, ``x3 = f(wrap(x2))`` for any reconstruction ``f``."""
    x2 = alpha * np.asarray(f(y), dtype=np.float64)
    x3 = np.asarray(f(wrap(x2, b)), dtype=np.float64)
    return x2, x3


def se_value(x2, x3) -> float:
    d = _hwc(x2) - _hwc(x3)
    d = d - d.mean(axis=(0, 1), keepdims=True)
    return float(np.mean(d * d))


def se_loss(y, w: UnrolledWeights, b: int = DEFAULT_SENSOR_BITS, alpha: float = 1.0):
    """Scaling-equivariance loss and its gradients, flowing through both branches."""
    if not alpha > 0:
        raise InvalidArgument("alpha must be positive")
    tape = ad.Tape()
    params = leaf_params(tape, w)
    x_hat = unrolled_graph(tape.leaf(_hwc(y), name="y"), params, w.spec, b)
    x2 = ad.scale(x_hat, alpha)
    x3 = unrolled_graph(ad.wrap_st(x2, b), params, w.spec, b)
    value = ad.mean_square(ad.center(x2 - x3))
    grads = tape.backward(value)
    return float(value.value), {k: grads[v] for k, v in params.items()}


def finetune_se(wrapped_set: Sequence[np.ndarray], w: UnrolledWeights, b: int = DEFAULT_SENSOR_BITS,
                cfg: TrainConfig | None = None):
    """Adapt ``w`` to unlabelled measurements with α ~ U(alpha_range) and random flips."""
    cfg = cfg or TrainConfig(loss="L2", lr=1e-5)
    data = _check_dataset(wrapped_set, "wrapped set")

    def sample(current, rng):
        y = data[rng.integers(len(data))]
        if cfg.flips:
            y = _flip(y, rng)
        alpha = rng.uniform(*cfg.alpha_range)
        return se_loss(y, current, b, alpha)

    return _train_loop(w, cfg, "se", sample)
