"""Factorized Gaussian posteriors/priors: closed-form KL and reparameterized
sampling.

Posterior variances are stored as log-variance so optimization is
unconstrained; a small floor keeps them strictly positive even when
progressive finetuning drives them toward zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import gradcore as gc
from .gradcore import ContractViolation

VAR_FLOOR = 1e-12

# Shared defaults: posteriors start tight around their initialization.
INIT_POSTERIOR_VAR = 9e-6


@dataclass
class GaussianPosterior:
    """q = N(mean, diag(var)) with var = exp(log_var) + floor."""

    mean: np.ndarray
    log_var: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.log_var = np.asarray(self.log_var, dtype=np.float64)
        if self.mean.shape != self.log_var.shape:
            raise ContractViolation("mean/log_var shape mismatch")

    @classmethod
    def from_moments(cls, mean, var):
        var = np.asarray(var, dtype=np.float64)
        if np.any(var <= 0):
            raise ContractViolation("posterior variance must be positive")
        return cls(np.asarray(mean, dtype=np.float64), np.log(np.maximum(var - VAR_FLOOR, VAR_FLOOR)))

    @property
    def var(self) -> np.ndarray:
        return np.exp(self.log_var) + VAR_FLOOR


@dataclass
class GaussianPrior:
    """p = N(mean, diag(var)), var strictly positive."""

    mean: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.var = np.asarray(self.var, dtype=np.float64)
        if self.mean.shape != self.var.shape:
            raise ContractViolation("mean/var shape mismatch")
        if np.any(self.var <= 0):
            raise ContractViolation("prior variance must be positive")


def variance_from_log(log_var):
    """exp(log_var) + floor; works on Nodes and arrays alike."""
    return gc.exp(log_var) + VAR_FLOOR


def kl_terms(q_mean, q_var, p_mean, p_var):
    """Per-dimension KL of N(q_mean, q_var) from N(p_mean, p_var), in nats.

    Accepts Nodes or arrays; broadcastable shapes allowed (shared priors
    broadcast across rows).
    """
    ratio = q_var / p_var
    delta = q_mean - p_mean
    return 0.5 * (ratio + gc.square(delta) / p_var - 1.0 - gc.log(ratio))


def kl_divergence(q: GaussianPosterior, p: GaussianPrior, dims=None) -> float:
    """Total KL(q‖p) in nats over the given dimension range (default: all)."""
    qm, qv = q.mean.ravel(), q.var.ravel()
    pm = np.broadcast_to(p.mean, q.mean.shape).ravel()
    pv = np.broadcast_to(p.var, q.mean.shape).ravel()
    if dims is not None:
        sl = dims if isinstance(dims, slice) else slice(dims[0], dims[1])
        if sl.stop is not None and sl.stop > qm.size:
            raise ContractViolation("dims out of bounds")
        qm, qv, pm, pv = qm[sl], qv[sl], pm[sl], pv[sl]
    return float(np.sum(kl_terms(qm, qv, pm, pv)))


def reparam_sample(mean, log_var, noise):
    """mean + sqrt(var) * noise; differentiable in mean and log_var."""
    return mean + gc.sqrt(variance_from_log(log_var)) * noise


def log_density(x, mean, var, clamp=700.0):
    """Elementwise Gaussian log-density, clamped to +-clamp nats.

    Numpy-only (coding path); the clamp guards floored variances.
    """
    v = np.asarray(var, dtype=np.float64)
    ld = -0.5 * (np.log(2.0 * np.pi * v) + np.square(x - mean) / v)
    return np.clip(ld, -clamp, clamp)
