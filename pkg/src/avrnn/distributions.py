"""Diagonal Gaussians and factorized Bernoullis on autodiff tensors.

Parameters may carry leading batch dimensions; densities and divergences are
summed over the last axis only, so a ``(m, d)`` Gaussian yields ``(m,)`` values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)
BERNOULLI_EPS = 1e-7


def _check_same(a: Tensor, b, what: str):
    sb = b.shape if hasattr(b, "shape") else np.shape(b)
    if a.shape[-1:] != tuple(sb)[-1:]:
        raise ad.ShapeError(f"{what}: length mismatch {a.shape} vs {tuple(sb)}")


@dataclass
class DiagGaussian:
    """Gaussian with mean ``mu`` and per-dimension standard deviation ``sigma``."""

    mu: Tensor
    sigma: Tensor

    def __post_init__(self):
        self.mu = ad._as_tensor(self.mu)
        self.sigma = ad._as_tensor(self.sigma)
        if self.mu.shape != self.sigma.shape:
            raise ad.ShapeError(f"mu {self.mu.shape} and sigma {self.sigma.shape} differ")

    @property
    def dim(self) -> int:
        return self.mu.shape[-1]


def gaussian_sample(g: DiagGaussian, noise) -> Tensor:
    """Reparameterized draw ``mu + sigma * noise`` for standard-normal ``noise``."""
    noise = ad._as_tensor(noise)
    if noise.shape != g.mu.shape:
        raise ad.ShapeError(f"noise {noise.shape} does not match distribution {g.mu.shape}")
    return g.mu + g.sigma * noise


def gaussian_logpdf(g: DiagGaussian, x) -> Tensor:
    x = ad._as_tensor(x)
    _check_same(g.mu, x, "gaussian_logpdf")
    z = (x - g.mu) / g.sigma
    terms = -0.5 * z.square() - g.sigma.log()
    return terms.sum(axis=-1) - g.dim * HALF_LOG_2PI


def gaussian_kl(q: DiagGaussian, p: DiagGaussian) -> Tensor:
    """KL(q || p) between diagonal Gaussians, in closed form."""
    _check_same(q.mu, p.mu, "gaussian_kl")
    log_ratio = p.sigma.log() - q.sigma.log()
    quad = (q.sigma.square() + (q.mu - p.mu).square()) / (2.0 * p.sigma.square())
    return (log_ratio + quad).sum(axis=-1) - 0.5 * q.dim


@dataclass
class BernoulliVec:
    """Independent Bernoulli variables; probabilities are kept inside [1e-7, 1 - 1e-7]."""

    p: Tensor

    def __post_init__(self):
        self.p = ad.clamp(ad._as_tensor(self.p), BERNOULLI_EPS, 1.0 - BERNOULLI_EPS)

    @property
    def dim(self) -> int:
        return self.p.shape[-1]


def bernoulli_logpmf(b: BernoulliVec, x) -> Tensor:
    xv = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if not np.all((xv == 0.0) | (xv == 1.0)):
        raise ValueError("bernoulli_logpmf needs binary observations")
    _check_same(b.p, xv, "bernoulli_logpmf")
    x = ad._as_tensor(xv)
    return (x * b.p.log() + (1.0 - x) * (1.0 - b.p).log()).sum(axis=-1)


def bernoulli_sample(b: BernoulliVec, u) -> np.ndarray:
    """``1`` where the uniform draw ``u`` falls below ``p``, else ``0``."""
    u = u.data if isinstance(u, Tensor) else np.asarray(u, dtype=np.float64)
    return (u < b.p.data).astype(np.float64)
