"""Decoupled Gaussian head: discretized likelihood on the variance, sampling, uncertainty.

All arrays are batched NCHW; per-pixel masks and maps are (N, 1, H, W).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special

from .numerics import NumericError, Tensor, clamp, exp, make_op, stop_gradient

BIN_HALF_WIDTH = 1.0 / 255.0
LOG_FLOOR = 1e-12
LOG_VAR_MIN, LOG_VAR_MAX = -20.0, 6.0
_SQRT_2PI = np.sqrt(2.0 * np.pi)


@dataclass
class GaussianPrediction:
    """Per-pixel mean (tanh range) and clamped log-variance."""

    mu: Tensor
    log_var: Tensor

    @property
    def sigma(self) -> Tensor:
        return exp(self.log_var * 0.5)

    @classmethod
    def from_raw(cls, mu: Tensor, raw_log_var: Tensor) -> GaussianPrediction:
        return cls(mu, clamp(raw_log_var, LOG_VAR_MIN, LOG_VAR_MAX))


def delta_bounds(y) -> tuple[np.ndarray, np.ndarray]:
    """Integration limits of the pixel bin around ``y``; open-ended at +-1."""
    y = np.asarray(y, dtype=np.float64)
    if np.any(y < -1.0) or np.any(y > 1.0) or not np.all(np.isfinite(y)):
        raise ValueError("pixel values must lie in [-1, 1]")
    hi = np.where(y == 1.0, np.inf, y + BIN_HALF_WIDTH)
    lo = np.where(y == -1.0, -np.inf, y - BIN_HALF_WIDTH)
    return lo, hi


def _pdf(z: np.ndarray) -> np.ndarray:
    return np.exp(-0.5 * np.where(np.isfinite(z), z, 0.0) ** 2) / _SQRT_2PI * np.isfinite(z)


def gaussian_bin_mass(lo: np.ndarray, hi: np.ndarray, mu: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    """P(lo < Y < hi) for Y ~ N(mu, sigma^2), subtracting in the accurate tail."""
    a = (lo - mu) / sigma
    b = (hi - mu) / sigma
    upper = a > 0
    return np.where(upper, special.ndtr(-a) - special.ndtr(-b), special.ndtr(b) - special.ndtr(a))


def bin_log_mass(mu: Tensor, log_var: Tensor, lo: np.ndarray, hi: np.ndarray) -> Tensor:
    """Elementwise log of the Gaussian mass in [lo, hi], floored at ``LOG_FLOOR``."""
    if mu.shape != log_var.shape:
        raise NumericError(f"mu {mu.shape} and log_var {log_var.shape} differ")
    m, lv = mu.data, log_var.data
    sigma = np.exp(0.5 * lv)
    a = (lo - m) / sigma
    b = (hi - m) / sigma
    mass = gaussian_bin_mass(lo, hi, m, sigma)
    live = mass > LOG_FLOOR
    out = np.log(np.where(live, mass, LOG_FLOOR))

    def backward(g):
        pa, pb = _pdf(a), _pdf(b)
        inv = np.where(live, g / np.where(live, mass, 1.0), 0.0)
        a_pa = np.where(np.isfinite(a), a, 0.0) * pa
        b_pb = np.where(np.isfinite(b), b, 0.0) * pb
        g_mu = inv * (pa - pb) / sigma
        g_lv = inv * 0.5 * (a_pa - b_pb)
        return g_mu, g_lv

    return make_op(out, (mu, log_var), backward, "bin_log_mass")


def discretized_nll(pred: GaussianPrediction, target, region=None) -> Tensor:
    """Negative log-likelihood summed over pixels in ``region``.

    The mean is stop-gradiented, so only ``log_var`` receives gradient.

    Args:
        pred: prediction with (N, C, H, W) tensors.
        target: (N, C, H, W) values in [-1, 1].
        region: optional (N, 1, H, W) or (N, C, H, W) 0/1 array; default all pixels.
    """
    target = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if target.shape != pred.mu.shape:
        raise NumericError(f"target {target.shape} vs prediction {pred.mu.shape}")
    lo, hi = delta_bounds(target)
    logp = bin_log_mass(stop_gradient(pred.mu), pred.log_var, lo, hi)
    if region is None:
        return -logp.sum()
    region = np.broadcast_to(np.asarray(region, dtype=np.float64), target.shape)
    if not region.any():
        return Tensor(0.0)
    return -(logp * region).sum()


def uncertainty_from_variance(pred: GaussianPrediction) -> np.ndarray:
    """Channel-mean sigma, min-max normalized per image to [0, 1]; (N, 1, H, W)."""
    sigma = np.exp(0.5 * pred.log_var.data).mean(axis=1, keepdims=True)
    lo = sigma.min(axis=(1, 2, 3), keepdims=True)
    hi = sigma.max(axis=(1, 2, 3), keepdims=True)
    span = hi - lo
    safe = np.where(span > 0, span, 1.0)
    return np.where(span > 0, (sigma - lo) / safe, 0.0)


def sample_pixels(pred: GaussianPrediction, alpha: float, rng: np.random.Generator | None, final: bool) -> Tensor:
    """``mu + alpha * sigma * z`` clamped to [-1, 1]; just the mean when ``final``.

    Sigma enters through a stop-gradient: the sampled image never trains the
    variance, which is left to the likelihood term alone.
    """
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    if final or alpha == 0.0:
        return clamp(pred.mu, -1.0, 1.0)
    z = rng.standard_normal(pred.mu.shape)
    noise = stop_gradient(pred.sigma) * (alpha * z)
    return clamp(pred.mu + noise, -1.0, 1.0)
