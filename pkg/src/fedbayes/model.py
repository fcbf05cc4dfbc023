"""Bayesian logistic regression with a mean-field Gaussian posterior.

Labels are in {-1, +1} and ``P(t | x, w) = sigmoid(t * w.x)``. Feature
vectors are expected to already contain a bias coordinate.

Variational parameters are optimised as ``(mu, rho)`` with standard deviation
``exp(rho)``; everything that leaves this module is a
:class:`~fedbayes.expfam.GaussianMoment` or a natural-parameter factor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from fedbayes.exceptions import CavityCollapseError
from fedbayes.expfam import GaussianMoment, GaussianNatural

__all__ = [
    "VariationalParams",
    "log_sigmoid",
    "log_likelihood",
    "per_example_grad",
    "kl_grad",
    "predict",
    "evaluate",
]

_PROBIT_SCALE = np.pi / 8.0


@dataclass(frozen=True, eq=False)
class VariationalParams:
    """Unconstrained parametrisation of a diagonal Gaussian."""

    mu: np.ndarray
    rho: np.ndarray

    def __post_init__(self):
        mu = np.array(self.mu, dtype=np.float64).reshape(-1)
        rho = np.array(self.rho, dtype=np.float64).reshape(-1)
        if mu.shape != rho.shape:
            raise ValueError("mu and rho must have the same length")
        mu.setflags(write=False)
        rho.setflags(write=False)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "rho", rho)

    @classmethod
    def from_moment(cls, m: GaussianMoment) -> "VariationalParams":
        return cls(m.mean, 0.5 * np.log(m.variance))

    @classmethod
    def from_flat(cls, theta: np.ndarray) -> "VariationalParams":
        d = theta.size // 2
        return cls(theta[:d], theta[d:])

    @property
    def dim(self) -> int:
        return self.mu.size

    @property
    def std(self) -> np.ndarray:
        return np.exp(self.rho)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.mu, self.rho])

    def to_moment(self) -> GaussianMoment:
        return GaussianMoment(self.mu, np.exp(2.0 * self.rho))


def log_sigmoid(z):
    """``log(sigmoid(z))`` without overflow for large negative ``z``."""
    return -np.logaddexp(0.0, -z)


def log_likelihood(w, x, t):
    """Log probability of label(s) ``t`` under weights ``w``.

    ``x`` may be a single feature vector or an ``(n, d)`` matrix; ``w`` may be
    a single weight vector or one weight row per example.
    """
    w = np.asarray(w, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if w.ndim == 2:
        logits = np.einsum("ij,ij->i", x, w)
    else:
        logits = x @ w
    return log_sigmoid(np.asarray(t) * logits)


def per_example_grad(vp: VariationalParams, x, t, noise) -> np.ndarray:
    """Reparameterised gradient of ``log p(t_i | x_i, w_i)`` per example.

    Each example gets its own weight sample ``w_i = mu + exp(rho) * noise_i``.

    Args:
        vp: current variational parameters.
        x: features, shape ``(n, d)`` (or ``(d,)`` for one example).
        t: labels in {-1, +1}, shape ``(n,)``.
        noise: standard-normal draws, shape ``(n, d)``.

    Returns:
        Array of shape ``(n, 2d)``: ``[d/dmu, d/drho]`` for each example.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    noise = np.atleast_2d(np.asarray(noise, dtype=np.float64))
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    std = vp.std
    scaled_noise = noise * std
    w = vp.mu + scaled_noise
    margin = t * np.einsum("ij,ij->i", x, w)
    # d/dz log sigmoid(z) = sigmoid(-z)
    coef = expit(-margin) * t
    g_w = coef[:, None] * x
    return np.concatenate([g_w, g_w * scaled_noise], axis=1)


def kl_grad(vp: VariationalParams, cavity: GaussianNatural) -> np.ndarray:
    """Exact gradient of ``KL(q || cavity)`` with respect to ``(mu, rho)``."""
    if not cavity.is_normalizable:
        raise CavityCollapseError("cavity distribution is not normalizable")
    cav_var = -0.5 / cavity.eta2
    cav_mean = cavity.eta1 * cav_var
    var = np.exp(2.0 * vp.rho)
    return np.concatenate([(vp.mu - cav_mean) / cav_var, var / cav_var - 1.0])


def predict(q: GaussianMoment, x) -> np.ndarray:
    """Probit-approximated predictive probability that ``t = +1``."""
    x = np.asarray(x, dtype=np.float64)
    mean_logit = x @ q.mean
    spread = (x * x) @ q.variance
    return expit(mean_logit / np.sqrt(1.0 + _PROBIT_SCALE * spread))


def evaluate(q: GaussianMoment, x, t) -> tuple[float, float]:
    """Test accuracy and average predictive log likelihood.

    Returns:
        ``(accuracy, avg_log_lik)``; an example counts as positive when its
        predictive probability exceeds 0.5.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    t = np.asarray(t)
    if t.size == 0:
        raise ValueError("evaluation set is empty")
    mean_logit = x @ q.mean
    spread = (x * x) @ q.variance
    z = mean_logit / np.sqrt(1.0 + _PROBIT_SCALE * spread)
    # z > 0 <=> predicted probability > 0.5
    predicted = np.where(z > 0, 1, -1)
    accuracy = float(np.mean(predicted == t))
    avg_ll = float(np.mean(log_sigmoid(t * z)))
    return accuracy, avg_ll
