"""Three iid Bernoulli(sigmoid(eta)) bits scored by squared distance to a fixed target."""

from __future__ import annotations

import numpy as np
from scipy.special import expit

from rbgrad.distributions import IndependentBernoulliProduct
from rbgrad.estimators import EstimatorConfig, GradEstimate, run_estimator

TARGET_P = (0.6, 0.51, 0.48)


class BernoulliLoss:
    """``f(b) = sum_i (b_i - p_i)**2``; independent of ``eta``."""

    def __init__(self, p=TARGET_P):
        self.p = np.asarray(p, dtype=float)
        d = len(self.p)
        bits = (np.arange(2**d)[:, None] >> np.arange(d)) & 1
        self.table = ((bits - self.p) ** 2).sum(axis=1)

    def eval(self, z, eta):
        return float(self.table[z]), np.zeros(len(eta))


def bernoulli_integrand(eta, p=TARGET_P):
    eta = np.atleast_1d(np.asarray(eta, dtype=float))
    return IndependentBernoulliProduct(eta[0], d=len(p)), BernoulliLoss(p)


def bernoulli_exact_loss(eta, p=TARGET_P) -> float:
    s = float(expit(np.atleast_1d(eta)[0]))
    p = np.asarray(p)
    return float(np.sum(s * (1 - p) ** 2 + (1 - s) * p**2))


class BernoulliToy:
    def __init__(self, p=TARGET_P, eta0: float = -4.0):
        self.p = tuple(p)
        self.eta0 = eta0
        self.support_size = 2 ** len(self.p)

    def initial_params(self):
        return np.array([self.eta0])

    def loss(self, eta):
        return bernoulli_exact_loss(eta, self.p)

    def loss_grad(self, eta, config: EstimatorConfig, rng) -> GradEstimate:
        dist, f = bernoulli_integrand(eta, self.p)
        return run_estimator(config, dist, f, eta, rng)
