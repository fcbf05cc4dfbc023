"""Per-example clipping, the Gaussian mechanism, and a Rényi-DP accountant.

The accountant tracks the Rényi differential privacy of the Poisson-subsampled
Gaussian mechanism on a fixed grid of orders and converts to ``(epsilon,
delta)`` with ``eps = min_a [rdp(a) + log(1/delta) / (a - 1)]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.special import gammaln, logsumexp

from fedbayes.exceptions import ContractViolationError

__all__ = [
    "DEFAULT_ORDERS",
    "PrivacyParams",
    "MomentsLedger",
    "clip",
    "noisy_average",
    "rdp_subsampled_gaussian",
    "accumulate_step",
    "epsilon",
    "delta_for_client",
    "budget_exhausted",
]

DEFAULT_ORDERS = (1.5,) + tuple(float(a) for a in range(2, 65)) + (128.0, 256.0)

_CLIP_SLACK = 1e-9


@dataclass(frozen=True)
class PrivacyParams:
    """Mechanism settings for one client.

    ``noise_scale`` is the noise multiplier: the Gaussian added to the sum of
    clipped gradients has standard deviation ``noise_scale * clip_c``.
    """

    clip_c: float = 75.0
    noise_scale: float = 5.0
    sample_rate: float = 0.02
    delta: float = 1e-4
    epsilon_max: float = 1.0

    def __post_init__(self):
        if not self.clip_c > 0:
            raise ValueError("clip_c must be positive")
        if self.noise_scale < 0:
            raise ValueError("noise_scale must be non-negative")
        if not 0 < self.sample_rate <= 1:
            raise ValueError("sample_rate must lie in (0, 1]")
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")
        if not self.epsilon_max > 0:
            raise ValueError("epsilon_max must be positive")


def clip(g, clip_c: float) -> np.ndarray:
    """Scale ``g`` (or each row of ``g``) to have l2 norm at most ``clip_c``."""
    if not clip_c > 0:
        raise ValueError("clip_c must be positive")
    g = np.asarray(g, dtype=np.float64)
    norms = np.linalg.norm(g, axis=-1, keepdims=True)
    return g / np.maximum(1.0, norms / clip_c)


def noisy_average(clipped, clip_c: float, noise_scale: float, lot_size: float, gauss) -> np.ndarray:
    """Gaussian mechanism on a sum of clipped vectors.

    Returns ``(sum(clipped) + noise_scale * clip_c * gauss) / lot_size``.

    Raises:
        ContractViolationError: if any input exceeds the clipping bound.
    """
    gauss = np.asarray(gauss, dtype=np.float64)
    clipped = np.asarray(clipped, dtype=np.float64)
    if clipped.size == 0:
        total = np.zeros_like(gauss)
    else:
        clipped = clipped.reshape(-1, gauss.size)
        norms = np.linalg.norm(clipped, axis=1)
        if np.any(norms > clip_c + _CLIP_SLACK):
            raise ContractViolationError(
                f"input norm {norms.max():.6g} exceeds clipping bound {clip_c:.6g}"
            )
        total = clipped.sum(axis=0)
    if noise_scale > 0:
        total = total + (noise_scale * clip_c) * gauss
    return total / lot_size


def _log_moment_integer(q: float, sigma: float, alpha: int) -> float:
    # log E_{mu0}[(mu/mu0)^alpha] via the binomial expansion of the mixture.
    k = np.arange(alpha + 1, dtype=np.float64)
    log_binom = gammaln(alpha + 1) - gammaln(k + 1) - gammaln(alpha - k + 1)
    if q == 1.0:
        return alpha * (alpha - 1) / (2.0 * sigma**2)
    terms = log_binom + k * math.log(q) + (alpha - k) * math.log1p(-q) + (k * k - k) / (2.0 * sigma**2)
    return float(max(logsumexp(terms), 0.0))


def rdp_subsampled_gaussian(q: float, sigma: float, alpha: float) -> float:
    """Rényi-DP of order ``alpha`` for one Poisson-subsampled Gaussian step.

    Integer orders use the exact binomial expansion. A fractional order is
    bounded by linear interpolation of the log-moment between the bracketing
    integer orders, which is an upper bound because the log-moment is convex
    in the order.

    Args:
        q: Poisson inclusion probability.
        sigma: noise multiplier (noise stdev divided by l2 sensitivity).
        alpha: Rényi order, must exceed 1.
    """
    if not alpha > 1:
        raise ValueError(f"Renyi order must exceed 1, got {alpha}")
    if not 0 <= q <= 1:
        raise ValueError("sample rate must lie in [0, 1]")
    if q == 0:
        return 0.0
    if sigma == 0:
        return math.inf
    if q == 1.0:
        return alpha / (2.0 * sigma**2)
    lo = math.floor(alpha)
    if lo == alpha:
        return _log_moment_integer(q, sigma, int(alpha)) / (alpha - 1)
    hi = lo + 1
    lm_lo = _log_moment_integer(q, sigma, lo) if lo > 1 else 0.0
    lm_hi = _log_moment_integer(q, sigma, hi)
    frac = alpha - lo
    return ((1 - frac) * lm_lo + frac * lm_hi) / (alpha - 1)


@lru_cache(maxsize=256)
def _rdp_vector(q: float, sigma: float, orders: tuple) -> np.ndarray:
    vec = np.array([rdp_subsampled_gaussian(q, sigma, a) for a in orders])
    vec.setflags(write=False)
    return vec


@dataclass(frozen=True, eq=False)
class MomentsLedger:
    """Cumulative Rényi-DP of one client's releases."""

    orders: tuple = DEFAULT_ORDERS
    rdp: np.ndarray = field(default=None)
    steps: int = 0

    def __post_init__(self):
        orders = tuple(float(a) for a in self.orders)
        if any(a <= 1 for a in orders):
            raise ValueError("all orders must exceed 1")
        rdp = np.zeros(len(orders)) if self.rdp is None else np.array(self.rdp, dtype=np.float64)
        if rdp.shape != (len(orders),):
            raise ValueError("rdp must have one entry per order")
        rdp.setflags(write=False)
        object.__setattr__(self, "orders", orders)
        object.__setattr__(self, "rdp", rdp)

    def __repr__(self):
        return f"MomentsLedger(steps={self.steps})"


def accumulate_step(ledger: MomentsLedger, q: float, sigma: float, n_steps: int = 1) -> MomentsLedger:
    """Compose ``n_steps`` further subsampled-Gaussian releases into the ledger."""
    if n_steps < 0:
        raise ValueError("n_steps must be non-negative")
    if n_steps == 0:
        return ledger
    step = _rdp_vector(float(q), float(sigma), ledger.orders)
    return MomentsLedger(ledger.orders, ledger.rdp + n_steps * step, ledger.steps + n_steps)


def epsilon(ledger: MomentsLedger, delta: float) -> float:
    """Smallest epsilon over the order grid for the given ``delta``."""
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    orders = np.asarray(ledger.orders)
    with np.errstate(invalid="ignore"):
        candidates = ledger.rdp + math.log(1.0 / delta) / (orders - 1.0)
    return float(np.min(candidates))


def epsilon_for(q: float, sigma: float, steps: int, delta: float, orders=DEFAULT_ORDERS) -> float:
    """Epsilon after ``steps`` releases at rate ``q`` and noise multiplier ``sigma``."""
    return epsilon(accumulate_step(MomentsLedger(orders), q, sigma, steps), delta)


def delta_for_client(n_m: int) -> float:
    """Largest power of ten not exceeding ``1 / n_m``."""
    n_m = int(n_m)
    if n_m < 2:
        raise ValueError("a client needs at least two examples for delta < 1")
    return 10.0 ** -len(str(n_m - 1))


def budget_exhausted(ledger: MomentsLedger, params: PrivacyParams) -> bool:
    """Whether one more release would push epsilon past ``epsilon_max``."""
    nxt = accumulate_step(ledger, params.sample_rate, params.noise_scale)
    return epsilon(nxt, params.delta) > params.epsilon_max
