"""Independent reference computations used by several test modules."""

import math
from functools import lru_cache

import numpy as np
from scipy import integrate, optimize


def log_moment_quadrature(q, sigma, alpha):
    """``log E_{z~N(0, s^2)}[((1-q) + q N(z|1,s^2)/N(z|0,s^2))^alpha]`` by quadrature.

    The integrand is handled in log space and rescaled by its maximum so high
    orders do not overflow.
    """
    def log_f(z):
        ratio = (2.0 * z - 1.0) / (2.0 * sigma**2)
        log_mix = np.logaddexp(math.log1p(-q), math.log(q) + ratio)
        return -0.5 * (z / sigma) ** 2 - math.log(sigma * math.sqrt(2 * math.pi)) + alpha * log_mix

    grid = np.linspace(-40 * sigma, alpha * 2.0 + 40 * sigma, 200001)
    vals = log_f(grid)
    peak = float(vals.max())
    z_peak = float(grid[np.argmax(vals)])
    width = 20.0 * sigma
    val, _ = integrate.quad(lambda z: math.exp(log_f(z) - peak), z_peak - width, z_peak + width,
                            points=[z_peak], limit=500, epsabs=0, epsrel=1e-11)
    return peak + math.log(val)


@lru_cache(maxsize=None)
def rdp_quadrature(q, sigma, alpha):
    return log_moment_quadrature(q, sigma, alpha) / (alpha - 1)


def epsilon_quadrature(q, sigma, steps, delta, orders):
    orders = np.asarray(orders, dtype=np.float64)
    rdp = np.array([rdp_quadrature(q, sigma, a) for a in orders])
    return float(np.min(steps * rdp + math.log(1.0 / delta) / (orders - 1.0)))


def probit_free_elbo(mu, log_s, x, t, prior_var=1.0, n_nodes=40):
    """Exact (quadrature) negative ELBO of Bayesian logistic regression, d <= 2."""
    s = np.exp(log_s)
    nodes, weights = np.polynomial.hermite.hermgauss(n_nodes)
    # the logit of example i is Gaussian with mean x_i.mu and variance sum x_ij^2 s_j^2
    m = x @ mu
    v = (x * x) @ (s * s)
    z = m[:, None] + np.sqrt(2 * v)[:, None] * nodes[None, :]
    exp_ll = (-np.logaddexp(0.0, -t[:, None] * z) @ weights) / np.sqrt(np.pi)
    kl = 0.5 * np.sum(s * s / prior_var + mu * mu / prior_var - 1.0 - np.log(s * s / prior_var))
    return kl - exp_ll.sum()


def global_vi_reference(x, t, prior_var=1.0):
    """Mean and variance minimising the exact negative ELBO."""
    d = x.shape[1]

    def obj(theta):
        return probit_free_elbo(theta[:d], theta[d:], x, t, prior_var)

    res = optimize.minimize(obj, np.concatenate([np.zeros(d), np.full(d, -1.0)]),
                            method="L-BFGS-B", options={"gtol": 1e-10, "ftol": 1e-15, "maxiter": 5000})
    return res.x[:d], np.exp(2 * res.x[d:])

