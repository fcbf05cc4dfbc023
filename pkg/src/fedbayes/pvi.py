"""Client-side local optimisation and server-side factor bookkeeping for PVI.

A client receives the current global posterior ``q_old``, removes its own
factor to form the cavity, and minimises the local free energy::

    KL(q || cavity) - sum_{i in shard} E_q[log p(t_i | x_i, w)]

with Adagrad over ``(mu, rho)``. The change in its factor, ``q_new / q_old``,
is damped and sent to the server, which multiplies it into ``q`` and the
client's stored factor.

The private variant clips each example's contribution to the likelihood
gradient estimate, adds Gaussian noise to the sum and charges the client's
moments ledger once per step. The KL term touches no data and is computed
exactly.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from fedbayes import expfam
from fedbayes.exceptions import CavityCollapseError, NonNormalizableError
from fedbayes.expfam import GaussianMoment, GaussianNatural
from fedbayes.model import VariationalParams, kl_grad, per_example_grad
from fedbayes.privacy import (
    MomentsLedger,
    PrivacyParams,
    accumulate_step,
    budget_exhausted,
    clip,
    noisy_average,
)

logger = logging.getLogger(__name__)

__all__ = [
    "LocalOptConfig",
    "FactorState",
    "ServerState",
    "Adagrad",
    "cavity",
    "local_objective_grad",
    "local_optimize",
    "local_optimize_dp",
    "compute_delta",
    "apply_damping",
    "server_apply",
]


@dataclass(frozen=True)
class LocalOptConfig:
    """Local optimiser settings.

    Exactly one of ``batch_size`` (fixed-size minibatches without
    replacement) and ``sample_rate`` (Poisson minibatches) is used;
    ``sample_rate`` wins when set. With ``persistent_accumulator`` the
    Adagrad accumulator is kept per client across that client's rounds
    instead of starting from zero every round.
    """

    n_steps: int = 25
    learning_rate: float = 2.0
    damping: float = 0.1
    batch_size: int | None = 100
    sample_rate: float | None = None
    adagrad_epsilon: float = 1e-8
    n_mc_samples: int = 1
    persistent_accumulator: bool = False

    def __post_init__(self):
        if self.n_steps < 0:
            raise ValueError("n_steps must be non-negative")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0 < self.damping <= 1:
            raise ValueError("damping must lie in (0, 1]")
        if self.sample_rate is None:
            if self.batch_size is None or self.batch_size < 1:
                raise ValueError("need a positive batch_size or a sample_rate")
        elif not 0 < self.sample_rate <= 1:
            raise ValueError("sample_rate must lie in (0, 1]")
        if self.n_mc_samples < 1:
            raise ValueError("n_mc_samples must be at least 1")


@dataclass
class FactorState:
    """One client's approximate likelihood and privacy bookkeeping."""

    t_m: GaussianNatural
    ledger: MomentsLedger = field(default_factory=MomentsLedger)
    exhausted: bool = False
    accumulator: np.ndarray | None = None

    @classmethod
    def fresh(cls, d: int, orders=None) -> "FactorState":
        ledger = MomentsLedger() if orders is None else MomentsLedger(orders)
        return cls(GaussianNatural.zeros(d), ledger)


@dataclass
class ServerState:
    """Prior, global posterior and every client's factor."""

    prior: GaussianNatural
    q: GaussianNatural
    factors: list

    @classmethod
    def initial(cls, prior: GaussianNatural, m_clients: int) -> "ServerState":
        return cls(prior, prior, [FactorState.fresh(prior.dim) for _ in range(m_clients)])

    def ledger_residual(self) -> float:
        """Largest absolute gap between ``q`` and ``prior * prod(t_m)``."""
        eta1 = self.prior.eta1 + sum(f.t_m.eta1 for f in self.factors)
        eta2 = self.prior.eta2 + sum(f.t_m.eta2 for f in self.factors)
        return float(max(np.max(np.abs(eta1 - self.q.eta1)), np.max(np.abs(eta2 - self.q.eta2))))


class Adagrad:
    """Per-coordinate Adagrad with the accumulator starting at zero."""

    def __init__(self, theta, learning_rate: float, epsilon: float = 1e-8, accum=None):
        self.theta = np.array(theta, dtype=np.float64)
        self.learning_rate = learning_rate
        self.epsilon = epsilon
        if accum is None:
            self.accum = np.zeros_like(self.theta)
        else:
            # shared with the caller so a client's history carries over
            if np.shape(accum) != self.theta.shape:
                raise ValueError("accumulator shape does not match parameters")
            self.accum = accum

    def step(self, grad):
        self.accum += grad * grad
        self.theta -= self.learning_rate * grad / np.sqrt(self.accum + self.epsilon)
        return self.theta


def cavity(q_old: GaussianNatural, t_old: GaussianNatural) -> GaussianNatural:
    """Global posterior with the client's factor removed.

    Raises:
        CavityCollapseError: if the result is not a normalizable Gaussian.
    """
    cav = expfam.divide(q_old, t_old)
    if not cav.is_normalizable:
        raise CavityCollapseError("cavity q_old / t_old is not normalizable")
    return cav


def _draw_batch(n: int, cfg: LocalOptConfig, rng):
    # returns (indices, denominator of the likelihood-sum estimator)
    if cfg.sample_rate is not None:
        mask = rng.random(n) < cfg.sample_rate
        return np.flatnonzero(mask), cfg.sample_rate * n
    size = min(cfg.batch_size, n)
    return rng.choice(n, size=size, replace=False), float(size)


def _likelihood_grads(vp, x, t, n_mc, rng, grad_fn=per_example_grad):
    # per-example reparameterised grads, averaged over n_mc weight samples
    g = grad_fn(vp, x, t, rng.standard_normal(x.shape))
    for _ in range(n_mc - 1):
        g += grad_fn(vp, x, t, rng.standard_normal(x.shape))
    if n_mc > 1:
        g /= n_mc
    return g


def _scaled_sum(per, scale):
    return (scale * per).sum(axis=0)


def local_objective_grad(vp: VariationalParams, cav: GaussianNatural, x, t, batch, noise,
                         denominator=None) -> np.ndarray:
    """Stochastic gradient of the local free energy.

    Args:
        vp: current variational parameters.
        cav: cavity distribution.
        x, t: the client's full shard.
        batch: indices of the minibatch.
        noise: standard-normal draws of shape ``(len(batch), d)``.
        denominator: divisor of the minibatch likelihood sum; defaults to
            ``len(batch)``.
    """
    batch = np.asarray(batch)
    if batch.size == 0:
        raise ValueError("minibatch is empty")
    n_m = t.shape[0]
    denom = float(batch.size) if denominator is None else denominator
    per = per_example_grad(vp, x[batch], t[batch], noise)
    return kl_grad(vp, cav) - _scaled_sum(per, n_m / denom)


def local_optimize(x, t, t_old: GaussianNatural, q_old: GaussianNatural, cfg: LocalOptConfig,
                   rng, accumulator=None, grad_fn=None) -> VariationalParams:
    """Run ``cfg.n_steps`` non-private Adagrad steps on the local free energy.

    Optimisation starts from the moments of ``q_old``, so zero steps return
    ``q_old`` unchanged.

    Args:
        x, t: the client's shard.
        t_old: the client's current factor.
        q_old: the current global posterior.
        cfg: optimiser settings.
        rng: ``numpy.random.Generator`` for minibatches and weight samples.
        accumulator: optional Adagrad accumulator of length ``2 * d``,
            updated in place.
        grad_fn: per-example likelihood gradient with the signature of
            :func:`fedbayes.model.per_example_grad`; defaults to the logistic
            model.
    """
    grad_fn = per_example_grad if grad_fn is None else grad_fn
    cav = cavity(q_old, t_old)
    vp0 = VariationalParams.from_moment(expfam.to_moment(q_old))
    opt = Adagrad(vp0.flat(), cfg.learning_rate, cfg.adagrad_epsilon, accumulator)
    n_m = t.shape[0]
    vp = vp0
    for _ in range(cfg.n_steps):
        batch, denom = _draw_batch(n_m, cfg, rng)
        grad = kl_grad(vp, cav)
        if batch.size:
            per = _likelihood_grads(vp, x[batch], t[batch], cfg.n_mc_samples, rng, grad_fn)
            grad = grad - _scaled_sum(per, n_m / denom)
        vp = VariationalParams.from_flat(opt.step(grad))
    return vp


def local_optimize_dp(x, t, t_old: GaussianNatural, q_old: GaussianNatural, cfg: LocalOptConfig,
                      priv: PrivacyParams, ledger: MomentsLedger, rng, accumulator=None):
    """Differentially private local optimisation.

    Minibatches are Poisson samples at rate ``priv.sample_rate``, with
    expected lot size ``L = sample_rate * N_m``. Each sampled example
    contributes ``(N_m / L) * grad log p(t_i | x_i, w)`` to the estimate of
    the shard's likelihood gradient; that contribution is clipped to
    ``priv.clip_c`` and the sum is perturbed with
    ``N(0, (noise_scale * clip_c)^2 I)``. Every example's influence on a
    release is bounded by ``clip_c``, so each step is one subsampled
    Gaussian release for the accountant. The budget is checked before every
    step and the loop stops once one more step would overshoot
    ``priv.epsilon_max``.

    Returns:
        ``(vp, ledger, steps_taken, exhausted)``.
    """
    cav = cavity(q_old, t_old)
    vp0 = VariationalParams.from_moment(expfam.to_moment(q_old))
    opt = Adagrad(vp0.flat(), cfg.learning_rate, cfg.adagrad_epsilon, accumulator)
    n_m = t.shape[0]
    q_rate = priv.sample_rate
    scale = n_m / (q_rate * n_m)
    vp = vp0
    steps = 0
    exhausted = False
    dim = 2 * vp0.dim
    empty = np.zeros((0, dim))
    for _ in range(cfg.n_steps):
        if budget_exhausted(ledger, priv):
            exhausted = True
            break
        batch = np.flatnonzero(rng.random(n_m) < q_rate)
        grad = kl_grad(vp, cav)
        if batch.size:
            per = _likelihood_grads(vp, x[batch], t[batch], cfg.n_mc_samples, rng)
            contrib = clip(scale * per, priv.clip_c)
        else:
            contrib = empty
        if batch.size or priv.noise_scale > 0:
            gauss = rng.standard_normal(dim) if priv.noise_scale > 0 else None
            released = noisy_average(contrib, priv.clip_c, priv.noise_scale, 1.0,
                                     np.zeros(dim) if gauss is None else gauss)
            grad = grad - released
        ledger = accumulate_step(ledger, q_rate, priv.noise_scale)
        steps += 1
        vp = VariationalParams.from_flat(opt.step(grad))
    if not exhausted and budget_exhausted(ledger, priv):
        exhausted = True
    return vp, ledger, steps, exhausted


def compute_delta(q_new: GaussianMoment, q_old: GaussianNatural) -> GaussianNatural:
    """Undamped factor change ``q_new / q_old``."""
    return expfam.divide(expfam.to_natural(q_new), q_old)


def apply_damping(delta_raw: GaussianNatural, damping: float) -> GaussianNatural:
    """Scale a factor change; equivalent to ``t_new = t_old + damping * (t_opt - t_old)``."""
    return expfam.scale(delta_raw, damping)


def server_apply(server: ServerState, m: int, delta: GaussianNatural) -> ServerState:
    """Multiply a client's factor change into ``q`` and ``t_m``.

    Raises:
        NonNormalizableError: if the updated ``q`` would not be a valid
            Gaussian; the server state is left untouched.
    """
    if delta.dim != server.q.dim:
        raise ValueError(f"delta has dimension {delta.dim}, expected {server.q.dim}")
    q_new = expfam.multiply(server.q, delta)
    if not q_new.is_normalizable:
        raise NonNormalizableError(f"update from client {m} makes q non-normalizable")
    factor = server.factors[m]
    factors = list(server.factors)
    factors[m] = FactorState(expfam.multiply(factor.t_m, delta), factor.ledger, factor.exhausted,
                             factor.accumulator)
    return ServerState(server.prior, q_new, factors)
