"""scikit-learn style wrapper around the federated simulator."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_array, check_is_fitted, check_random_state, check_X_y

from fedbayes import expfam, model, sim
from fedbayes.data import Dataset
from fedbayes.privacy import PrivacyParams
from fedbayes.pvi import LocalOptConfig

__all__ = ["FederatedBayesianLogisticRegression"]


class FederatedBayesianLogisticRegression(ClassifierMixin, BaseEstimator):
    """Bayesian logistic regression fitted by simulated federated training.

    The training rows are split across clients (by ``groups`` if given,
    otherwise uniformly at random into ``n_clients`` shards) and one of the
    simulator's engines is run. The fitted posterior is a diagonal Gaussian
    over the weights.

    Args:
        engine: ``"pvi"``, ``"dp_pvi"`` or ``"global_vi"``.
        n_clients: number of shards when ``groups`` is not passed to ``fit``.
        max_communications: communication budget of the run.
        n_steps: local optimiser steps per round.
        learning_rate: Adagrad rate; ``None`` uses the engine default.
        damping: factor damping for the PVI engines.
        batch_size: minibatch size for the non-private engines.
        epsilon_max, clip_c, noise_scale, sample_rate: privacy settings, only
            read by ``dp_pvi``.
        prior_variance: variance of the zero-mean Gaussian prior.
        fit_intercept: append a constant feature.
        random_state: seed for the shard split and the run.

    Attributes:
        classes_: the two class labels; ``classes_[1]`` is the positive one.
        coef_mean_, coef_var_: posterior moments of the feature weights.
        intercept_mean_, intercept_var_: posterior moments of the intercept
            (zero when ``fit_intercept`` is false).
        result_: the simulator's :class:`~fedbayes.sim.RunResult`.
    """

    def __init__(self, engine="pvi", n_clients=10, max_communications=1000, n_steps=25,
                 learning_rate=None, damping=0.1, batch_size=100, epsilon_max=1.0, clip_c=75.0,
                 noise_scale=5.0, sample_rate=0.02, prior_variance=1.0, fit_intercept=True,
                 random_state=None):
        self.engine = engine
        self.n_clients = n_clients
        self.max_communications = max_communications
        self.n_steps = n_steps
        self.learning_rate = learning_rate
        self.damping = damping
        self.batch_size = batch_size
        self.epsilon_max = epsilon_max
        self.clip_c = clip_c
        self.noise_scale = noise_scale
        self.sample_rate = sample_rate
        self.prior_variance = prior_variance
        self.fit_intercept = fit_intercept
        self.random_state = random_state

    def _run_config(self) -> sim.RunConfig:
        base = sim.default_local_config(self.engine)
        local = LocalOptConfig(
            n_steps=1 if self.engine == "global_vi" else self.n_steps,
            learning_rate=base.learning_rate if self.learning_rate is None else self.learning_rate,
            damping=1.0 if self.engine == "global_vi" else self.damping,
            batch_size=self.batch_size,
            persistent_accumulator=base.persistent_accumulator,
        )
        priv = PrivacyParams(clip_c=self.clip_c, noise_scale=self.noise_scale,
                             sample_rate=self.sample_rate, epsilon_max=self.epsilon_max)
        return sim.RunConfig(engine=self.engine, local=local, privacy=priv,
                             max_communications=self.max_communications,
                             prior_variance=self.prior_variance)

    def _design(self, X):
        if self.fit_intercept:
            return np.hstack([X, np.ones((X.shape[0], 1))])
        return X

    def fit(self, X, y, groups=None):
        """Fit the posterior.

        Args:
            X: array of shape ``(n_samples, n_features)``.
            y: binary labels.
            groups: optional client id per row.

        Returns:
            self
        """
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_ = unique_labels(y)
        if self.classes_.size != 2:
            raise ValueError(f"expected two classes, got {self.classes_.size}")
        self.n_features_in_ = X.shape[1]
        t = np.where(y == self.classes_[1], 1, -1).astype(np.int8)
        xd = self._design(X)
        rng = check_random_state(self.random_state)

        if groups is None:
            if not 1 <= self.n_clients <= X.shape[0]:
                raise ValueError("n_clients must lie between 1 and the number of samples")
            perm = rng.permutation(X.shape[0])
            shards_idx = np.array_split(perm, self.n_clients)
        else:
            groups = np.asarray(groups)
            if groups.shape != (X.shape[0],):
                raise ValueError("groups must have one entry per sample")
            shards_idx = [np.flatnonzero(groups == g) for g in np.unique(groups)]
        shards = [Dataset(xd[i], t[i]) for i in shards_idx]

        seed = int(rng.randint(np.iinfo(np.int32).max))
        self.result_ = sim.run(self._run_config(), shards, None, seed)
        post = expfam.to_moment(self.result_.server.q)
        k = self.n_features_in_
        self.coef_mean_ = post.mean[:k].copy()
        self.coef_var_ = post.variance[:k].copy()
        self.intercept_mean_ = float(post.mean[k]) if self.fit_intercept else 0.0
        self.intercept_var_ = float(post.variance[k]) if self.fit_intercept else 0.0
        self.posterior_ = post
        return self

    def predict_proba(self, X):
        """Posterior predictive class probabilities, columns ordered as ``classes_``."""
        check_is_fitted(self, "posterior_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        p = model.predict(self.posterior_, self._design(X))
        return np.column_stack([1.0 - p, p])

    def predict(self, X):
        proba = self.predict_proba(X)
        return self.classes_[(proba[:, 1] > 0.5).astype(int)]
