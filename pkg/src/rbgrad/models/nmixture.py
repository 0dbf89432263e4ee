"""N-mixture model: ``N ~ Poisson(lam)``, ``y_i | N ~ Binomial(N, p)`` with known ``p``.

The posterior over ``N`` is approximated by a negative binomial shifted to
start at ``max(y)``, parameterized by ``eta = (log r_hat, logit p_hat)``.
"""

from __future__ import annotations

import numpy as np
from scipy.special import gammaln

from rbgrad.distributions import ShiftedNegativeBinomial
from rbgrad.estimators import EstimatorConfig, GradEstimate, run_estimator


def nmixture_simulate(n_true: int = 10, p: float = 0.2, count: int = 1000, rng=None) -> np.ndarray:
    rng = np.random.default_rng() if rng is None else rng
    return rng.binomial(n_true, p, size=count)


def log_binomial(y, n, p):
    """``log Binomial(y; n, p)``; ``-inf`` where ``y > n``."""
    y = np.asarray(y, dtype=float)
    n = np.asarray(n, dtype=float)
    with np.errstate(invalid="ignore"):
        out = (gammaln(n + 1) - gammaln(y + 1) - gammaln(n - y + 1)
               + y * np.log(p) + (n - y) * np.log1p(-p))
    return np.where(y <= n, out, -np.inf)


class NMixtureModel:
    def __init__(self, y, p: float = 0.2, lam: float = 10.0, r0: float = 5.0, p0: float = 0.5):
        self.y = np.asarray(y, dtype=int)
        if self.y.size == 0:
            raise ValueError("data must be non-empty")
        self.p = p
        self.lam = lam
        self.y_max = int(self.y.max())
        self.values, self.counts = np.unique(self.y, return_counts=True)
        self.eta0 = np.array([np.log(r0), np.log(p0 / (1 - p0))])
        self.support_size = None

    def distribution(self, eta) -> ShiftedNegativeBinomial:
        return ShiftedNegativeBinomial(eta[0], eta[1], shift=self.y_max)

    def log_joint(self, n) -> np.ndarray:
        """``sum_i log Binomial(y_i; N, p) + log Poisson(N; lam)`` for an array of ``N``."""
        n = np.atleast_1d(np.asarray(n, dtype=float))
        loglik = (self.counts[:, None] * log_binomial(self.values[:, None], n[None, :], self.p)).sum(0)
        logprior = n * np.log(self.lam) - self.lam - gammaln(n + 1)
        return loglik + logprior

    def initial_params(self):
        return self.eta0.copy()

    def elbo(self, eta) -> float:
        """``E_q[log p(y, N) - log q(N)]`` summed until the scanned mass reaches ``1 - 1e-12``."""
        dist = self.distribution(eta)
        atoms, probs = zip(*dist.enumerate_support())
        atoms = np.array(atoms)
        probs = np.array(probs)
        f = self.log_joint(atoms) - dist.log_pmf_array(atoms)
        return float((probs * f).sum())

    def loss(self, eta) -> float:
        return -self.elbo(eta)

    def exact_elbo_grad(self, eta) -> np.ndarray:
        dist = self.distribution(eta)
        atoms, probs = zip(*dist.enumerate_support())
        atoms = np.array(atoms)
        probs = np.array(probs)
        f = self.log_joint(atoms) - dist.log_pmf_array(atoms)
        return ((probs * (f - 1.0))[:, None] * dist.score_array(atoms)).sum(0)

    def loss_grad(self, eta, config: EstimatorConfig, rng) -> GradEstimate:
        dist = self.distribution(eta)
        est = run_estimator(config, dist, NMixtureIntegrand(self), eta, rng)
        return GradEstimate(-est.grad, est.base_evals)


class NMixtureIntegrand:
    """``f(N) = log p(y | N) + log p(N) - log q(N)``; only the last term depends on ``eta``."""

    def __init__(self, model: NMixtureModel):
        self.model = model

    def eval(self, z, eta):
        dist = self.model.distribution(eta)
        value = float(self.model.log_joint(z)[0]) - dist.log_pmf(z)
        return value, -dist.score(z)


def nmixture_integrand(log_r, logit_p, data, p: float = 0.2, lam: float = 10.0):
    model = NMixtureModel(data, p=p, lam=lam)
    eta = np.array([log_r, logit_p], dtype=float)
    return model.distribution(eta), NMixtureIntegrand(model)
