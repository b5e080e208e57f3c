"""Reconstruction engines: least-squares unwrapping, PnP-ADMM and the unrolled network.

The ADMM recursion (z⁰ = y, u⁰ = 0) is

    x ← argmin ||Δx - M_b(Δy)||² + ρ/2 ||x - (z - u)||²
    z ← denoise(x + u, σ)
    u ← u + x - z

and the output is the last ``z``. The PnP solver runs it with a fixed ρ and a
classical denoiser at σ = sqrt(λ/ρ); the unrolled network runs T layers with
per-layer learned ρ, σ and one shared CNN denoiser.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import InvalidArgument, MissingWeights, ShapeMismatch
from .gradient import poisson_integrate, wrapped_gradient, x_update
from .modulo import DEFAULT_SENSOR_BITS
from .priors import DenoiserSpec, DenoiserWeights, denoise


def resolve_dc(y, dc_policy) -> float | np.ndarray:
    """DC level for gradient-only solves: ``"measurement-mean"``, ``"zero"`` or a number."""
    if dc_policy == "measurement-mean":
        return np.asarray(y, dtype=np.float64).mean(axis=(0, 1))
    if dc_policy == "zero":
        return 0.0
    if isinstance(dc_policy, (int, float, np.floating, np.integer)):
        return float(dc_policy)
    raise InvalidArgument(f"unknown dc policy {dc_policy!r}")


def itoh_baseline(y, b: int = DEFAULT_SENSOR_BITS, dc_policy="measurement-mean") -> np.ndarray:
    """Least-squares integration of the re-wrapped measurement gradients."""
    y = np.asarray(y, dtype=np.float64)
    return poisson_integrate(wrapped_gradient(y, b), resolve_dc(y, dc_policy))


@dataclass(frozen=True)
class SolverConfig:
    iterations: int = 10
    rho: float = 1.0
    lam: float = 1.0
    denoiser: DenoiserSpec = field(default_factory=DenoiserSpec)
    # starting iterate z⁰: the measurement itself or the least-squares unwrap
    init: str = "measurement"
    dc_policy: object = "measurement-mean"

    def __post_init__(self):
        if self.init not in ("measurement", "itoh"):
            raise InvalidArgument(f"unknown init {self.init!r}")
        if self.iterations < 1:
            raise InvalidArgument("iterations must be >= 1")
        if not self.rho > 0 or not self.lam > 0:
            raise InvalidArgument("rho and lambda must be positive")

    @property
    def sigma(self) -> float:
        return float(np.sqrt(self.lam / self.rho))


@dataclass
class AdmmState:
    x: np.ndarray
    z: np.ndarray
    u: np.ndarray
    k: int = 0

    @property
    def residual(self) -> float:
        return float(np.linalg.norm(self.x - self.z))


def admm_iterates(y, b: int, cfg: SolverConfig, weights: DenoiserWeights | None = None):
    """Yield the :class:`AdmmState` after every iteration."""
    y = np.asarray(y, dtype=np.float64)
    if cfg.denoiser.kind == "conv" and weights is None:
        raise MissingWeights("conv denoiser requires weights")
    v = wrapped_gradient(y, b)
    z = y.copy() if cfg.init == "measurement" else itoh_baseline(y, b, cfg.dc_policy)
    u = np.zeros_like(y)
    for k in range(cfg.iterations):
        x = x_update(v, z - u, cfg.rho)
        z = denoise(x + u, cfg.sigma, cfg.denoiser, weights)
        u = u + x - z
        yield AdmmState(x, z, u, k + 1)


def admm_reconstruct(y, b: int = DEFAULT_SENSOR_BITS, cfg: SolverConfig | None = None,
                     weights: DenoiserWeights | None = None) -> np.ndarray:
    cfg = cfg or SolverConfig()
    state = None
    for state in admm_iterates(y, b, cfg, weights):
        pass
    return state.z


# --- unrolled network ---------------------------------------------------------

def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_inv(y):
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


@dataclass
class UnrolledWeights:
    """Learned parameters of the T-layer network.

    ρ and σ are stored unconstrained and mapped through softplus; σ is further
    multiplied by the denoiser's DN scale.
    """

    rho_raw: np.ndarray
    sigma_raw: np.ndarray
    theta: DenoiserWeights

    def __post_init__(self):
        self.rho_raw = np.asarray(self.rho_raw, dtype=np.float64).reshape(-1)
        self.sigma_raw = np.asarray(self.sigma_raw, dtype=np.float64).reshape(-1)
        if self.rho_raw.shape != self.sigma_raw.shape or self.rho_raw.size < 1:
            raise ShapeMismatch("rho and sigma need one entry per layer")

    @classmethod
    def create(cls, theta: DenoiserWeights, T: int = 3, rho=1.0, sigma=25.0) -> "UnrolledWeights":
        rho = np.broadcast_to(np.asarray(rho, dtype=np.float64), (T,))
        sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (T,))
        if np.any(rho <= 0) or np.any(sigma <= 0):
            raise InvalidArgument("initial rho and sigma must be positive")
        return cls(softplus_inv(rho), softplus_inv(sigma / theta.spec.scale), theta)

    @property
    def T(self) -> int:
        return self.rho_raw.size

    @property
    def spec(self) -> DenoiserSpec:
        return self.theta.spec

    @property
    def per_layer_rho(self) -> np.ndarray:
        return softplus(self.rho_raw)

    @property
    def per_layer_sigma(self) -> np.ndarray:
        return softplus(self.sigma_raw) * self.theta.spec.scale

    def params(self) -> dict[str, np.ndarray]:
        """Flat name -> array view of every trainable tensor (shared, not copied)."""
        return {"rho_raw": self.rho_raw, "sigma_raw": self.sigma_raw, **self.theta.tensors}

    def with_params(self, params: dict[str, np.ndarray]) -> "UnrolledWeights":
        theta = DenoiserWeights(self.spec, {k: np.array(params[k]) for k in self.theta.tensors})
        return UnrolledWeights(np.array(params["rho_raw"]), np.array(params["sigma_raw"]), theta)

    def copy(self) -> "UnrolledWeights":
        return self.with_params(self.params())


def denoiser_graph(z: ad.Var, sigma: ad.Var, params: dict[str, ad.Var], spec: DenoiserSpec) -> ad.Var:
    """Residual CNN ``z + s * CNN([(z - mean z) / s, σ / s])`` recorded on the tape."""
    s = spec.scale
    plane = np.ones(z.shape[:2] + (1,))
    inp = ad.concat([ad.scale(ad.center(z), 1.0 / s), ad.mul(plane, ad.scale(sigma, 1.0 / s))])
    h = inp
    n = len(spec.layer_shapes())
    for i in range(n):
        h = ad.conv(h, params[f"conv{i}.weight"], params[f"conv{i}.bias"])
        if i < n - 1:
            h = ad.relu(h)
    return z + ad.scale(h, s)


def unrolled_graph(y: ad.Var, params: dict[str, ad.Var], spec: DenoiserSpec, b: int) -> ad.Var:
    """Record the full unrolled forward pass for an (H, W, C) measurement ``y``."""
    v_h = ad.centered_mod_st(ad.diff_h(y), b)
    v_v = ad.centered_mod_st(ad.diff_v(y), b)
    div_v = ad.divergence(v_h, v_v)
    rho = ad.softplus(params["rho_raw"])
    sigma = ad.scale(ad.softplus(params["sigma_raw"]), spec.scale)
    z, u = y, None
    for k in range(rho.shape[0]):
        rho_k = ad.take(rho, k)
        x_tilde = z if u is None else z - u
        rhs = div_v + ad.mul(x_tilde, ad.scale(rho_k, 0.5))
        x = ad.idct2(ad.spectral_divide(ad.dct2(rhs), rho_k))
        z_tilde = x if u is None else x + u
        z = denoiser_graph(z_tilde, ad.take(sigma, k), params, spec)
        u = (x - z) if u is None else u + x - z
    return z


def _as_hwc(y, channels: int):
    y = np.asarray(y, dtype=np.float64)
    squeeze = y.ndim == 2
    y3 = y[..., None] if squeeze else y
    if y3.ndim != 3 or y3.shape[-1] != channels:
        raise ShapeMismatch(f"denoiser expects {channels} channel(s), got input of shape {y.shape}")
    return y3, squeeze


def leaf_params(tape: ad.Tape, w: UnrolledWeights) -> dict[str, ad.Var]:
    return {name: tape.leaf(value, name=name) for name, value in w.params().items()}


def unrolled_forward(y, b: int = DEFAULT_SENSOR_BITS, w: UnrolledWeights | None = None) -> np.ndarray:
    if w is None:
        raise MissingWeights("unrolled reconstruction requires weights")
    y3, squeeze = _as_hwc(y, w.spec.channels)
    tape = ad.Tape()
    out = unrolled_graph(tape.leaf(y3, name="y"), leaf_params(tape, w), w.spec, b).value
    return out[..., 0] if squeeze else out


def reconstruct_rgb(y, b: int = DEFAULT_SENSOR_BITS, method: str = "itoh", cfg: SolverConfig | None = None,
                    weights=None, dc_policy="measurement-mean") -> np.ndarray:
    """Dispatch a multi-channel measurement to one of the solvers.

    Classical paths treat channels independently; the conv denoiser and the
    unrolled network see all channels jointly.
    """
    y = np.asarray(y, dtype=np.float64)
    if method == "itoh":
        return itoh_baseline(y, b, dc_policy)
    if method == "admm":
        return admm_reconstruct(y, b, cfg, weights)
    if method == "unrolled":
        return unrolled_forward(y, b, weights)
    raise InvalidArgument(f"unknown method {method!r}")
