"""Diagonal-Gaussian exponential-family algebra.

Every factor in the model (prior, client approximate likelihoods, the global
posterior) is a diagonal Gaussian stored in natural parameters::

    eta1 = mean / variance
    eta2 = -1 / (2 * variance)

so that multiplying densities adds parameters and dividing subtracts them.
Factors are allowed to be non-normalizable (``eta2 >= 0``); only distributions
that are converted back to moment form must have ``eta2 < 0``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from fedbayes.exceptions import InvalidMomentError, NonNormalizableError

__all__ = [
    "GaussianNatural",
    "GaussianMoment",
    "to_natural",
    "to_moment",
    "multiply",
    "divide",
    "scale",
    "kl_divergence",
]


def _frozen_vector(x) -> np.ndarray:
    arr = np.array(x, dtype=np.float64, copy=True).reshape(-1)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class GaussianNatural:
    """Natural parameters of a diagonal Gaussian (or Gaussian-shaped factor)."""

    eta1: np.ndarray
    eta2: np.ndarray

    def __post_init__(self):
        eta1 = _frozen_vector(self.eta1)
        eta2 = _frozen_vector(self.eta2)
        if eta1.shape != eta2.shape:
            raise ValueError(f"eta1 and eta2 differ in length: {eta1.size} vs {eta2.size}")
        if eta1.size < 1:
            raise ValueError("dimension must be at least 1")
        object.__setattr__(self, "eta1", eta1)
        object.__setattr__(self, "eta2", eta2)

    @classmethod
    def zeros(cls, d: int) -> "GaussianNatural":
        """The identity factor t(theta) = 1."""
        return cls(np.zeros(d), np.zeros(d))

    @property
    def dim(self) -> int:
        return self.eta1.size

    @property
    def is_normalizable(self) -> bool:
        return bool(np.all(self.eta2 < 0))

    def allclose(self, other: "GaussianNatural", atol: float = 1e-12) -> bool:
        return bool(
            np.allclose(self.eta1, other.eta1, rtol=0, atol=atol)
            and np.allclose(self.eta2, other.eta2, rtol=0, atol=atol)
        )

    def __repr__(self):
        return f"GaussianNatural(dim={self.dim})"


@dataclass(frozen=True, eq=False)
class GaussianMoment:
    """Mean and per-coordinate variance of a diagonal Gaussian."""

    mean: np.ndarray
    variance: np.ndarray

    def __post_init__(self):
        mean = _frozen_vector(self.mean)
        variance = _frozen_vector(self.variance)
        if mean.shape != variance.shape:
            raise ValueError(f"mean and variance differ in length: {mean.size} vs {variance.size}")
        if mean.size < 1:
            raise ValueError("dimension must be at least 1")
        if not np.all(variance > 0):
            raise InvalidMomentError("variance must be strictly positive")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "variance", variance)

    @property
    def dim(self) -> int:
        return self.mean.size

    def __repr__(self):
        return f"GaussianMoment(dim={self.dim})"


def _check_dims(a, b):
    if a.dim != b.dim:
        raise ValueError(f"dimension mismatch: {a.dim} vs {b.dim}")


def to_natural(m: GaussianMoment) -> GaussianNatural:
    """Convert moment parameters to natural parameters."""
    if not np.all(m.variance > 0):
        raise InvalidMomentError("variance must be strictly positive")
    return GaussianNatural(m.mean / m.variance, -0.5 / m.variance)


def to_moment(n: GaussianNatural) -> GaussianMoment:
    """Convert natural parameters to moments.

    Raises:
        NonNormalizableError: if any ``eta2`` coordinate is non-negative.
    """
    if not n.is_normalizable:
        bad = np.flatnonzero(n.eta2 >= 0)
        raise NonNormalizableError(f"eta2 >= 0 at coordinates {bad[:10].tolist()}")
    variance = -0.5 / n.eta2
    return GaussianMoment(n.eta1 * variance, variance)


def multiply(a: GaussianNatural, b: GaussianNatural) -> GaussianNatural:
    _check_dims(a, b)
    return GaussianNatural(a.eta1 + b.eta1, a.eta2 + b.eta2)


def divide(a: GaussianNatural, b: GaussianNatural) -> GaussianNatural:
    """Density ratio ``a / b``; the result may be non-normalizable."""
    _check_dims(a, b)
    return GaussianNatural(a.eta1 - b.eta1, a.eta2 - b.eta2)


def scale(a: GaussianNatural, factor: float) -> GaussianNatural:
    """Raise a factor to a power, i.e. multiply its natural parameters."""
    return GaussianNatural(factor * a.eta1, factor * a.eta2)


def kl_divergence(q: GaussianMoment, p: GaussianMoment) -> float:
    """KL(q || p) in nats for diagonal Gaussians."""
    _check_dims(q, p)
    ratio = q.variance / p.variance
    diff = q.mean - p.mean
    terms = 0.5 * (ratio + diff * diff / p.variance - 1.0 - np.log(ratio))
    return float(np.sum(terms))
