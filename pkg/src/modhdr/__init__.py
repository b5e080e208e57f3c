"""HDR reconstruction from noisy modulo (self-reset) sensor measurements."""

from .modulo import NoiseModel, centered_mod, sense, standardize_bits, synth_scene, wrap
from .gradient import (GradientField, dct2, divergence, forward_diff, idct2, poisson_integrate,
                       wrapped_gradient, x_update)
from .priors import DenoiserSpec, DenoiserWeights, denoise, init_weights, param_count
from .reconstruct import (SolverConfig, UnrolledWeights, admm_reconstruct, itoh_baseline,
                          reconstruct_rgb, unrolled_forward)

__version__ = "0.1.0"
