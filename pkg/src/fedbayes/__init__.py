"""Federated Bayesian logistic regression with partitioned variational inference.

Modules:
    expfam: diagonal Gaussians in natural and moment form.
    model: logistic likelihood, reparameterised gradients, probit prediction.
    privacy: clipping, the Gaussian mechanism and a Renyi-DP accountant.
    pvi: client-side local optimisation and server-side factor updates.
    sim: the asynchronous training loop, seeds and sweeps.
    data: UCI Adult loading and the small/large client partitioner.
    config, cli: experiment files and the ``fedbayes`` command.
"""

from fedbayes.estimator import FederatedBayesianLogisticRegression
from fedbayes.expfam import GaussianMoment, GaussianNatural
from fedbayes.privacy import MomentsLedger, PrivacyParams
from fedbayes.pvi import LocalOptConfig
from fedbayes.sim import RunConfig, RunResult, run

__version__ = "0.1.0"

__all__ = [
    "FederatedBayesianLogisticRegression",
    "GaussianMoment",
    "GaussianNatural",
    "LocalOptConfig",
    "MomentsLedger",
    "PrivacyParams",
    "RunConfig",
    "RunResult",
    "run",
]
