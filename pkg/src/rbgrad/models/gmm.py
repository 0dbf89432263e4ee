"""Mean-field variational inference for a Gaussian mixture with point-mass centroids.

Parameters are packed as ``eta = [mu_hat.ravel(), logits.ravel()]`` where
``mu_hat`` is ``(K, d)`` and ``logits`` is ``(N, K)``; the variational
membership of datum ``n`` is ``softmax(logits[n])``.

The per-datum integrand is

    f_n(z) = log Normal(y_n; mu_hat[z], sigma_y**2 I) + log pi[z] - log q_n(z)

and the ELBO is ``sum_n E_{q_n}[f_n] + sum_k log Normal(mu_hat[k]; 0, sigma0**2 I)``.
Each datum's expectation is estimated independently and the gradients summed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import log_softmax, softmax

from rbgrad.distributions import SoftmaxCategorical
from rbgrad.estimators import EstimatorConfig, GradEstimate

LOG_2PI = np.log(2 * np.pi)


@dataclass(frozen=True)
class GmmData:
    y: np.ndarray
    z: np.ndarray
    mu: np.ndarray


def gmm_simulate(K, N, d, sigma0, sigma_y, pi, rng) -> GmmData:
    if not (sigma0 > 0 and sigma_y > 0):
        raise ValueError("sigma0 and sigma_y must be positive")
    pi = np.asarray(pi, dtype=float)
    mu = rng.normal(0.0, sigma0, size=(K, d))
    z = rng.choice(K, size=N, p=pi / pi.sum())
    y = mu[z] + rng.normal(0.0, sigma_y, size=(N, d))
    return GmmData(y, z, mu)


def _sq_dists(x, c):
    return ((x[:, None, :] - c[None, :, :]) ** 2).sum(-1)


def kmeans_pp_seed(data, K, rng):
    n = len(data)
    centers = [data[rng.integers(n)]]
    for _ in range(1, K):
        d2 = _sq_dists(data, np.array(centers)).min(axis=1)
        total = d2.sum()
        if total == 0:
            centers.append(data[rng.integers(n)])
        else:
            centers.append(data[rng.choice(n, p=d2 / total)])
    return np.array(centers, dtype=float)


def lloyd_step(data, centers):
    """One assignment + update pass. Empty clusters are re-seeded at the farthest point."""
    d2 = _sq_dists(data, centers)
    labels = d2.argmin(axis=1)
    new = centers.copy()
    for k in range(len(centers)):
        members = labels == k
        if members.any():
            new[k] = data[members].mean(axis=0)
        else:
            far = int(d2[np.arange(len(data)), labels].argmax())
            new[k] = data[far]
            labels[far] = k
            d2[far, :] = 0.0
    return new, labels


def distortion(data, centers):
    return float(_sq_dists(data, centers).min(axis=1).sum())


def kmeans_init(data, K, rng, iters: int = 20, centers=None):
    """K-means (K-means++ seeding, Lloyd iterations) turned into variational parameters.

    Returns ``(mu_hat, logits)``; each datum's membership puts 0.99 on its
    nearest centroid and spreads 0.01 evenly over the others.
    """
    data = np.asarray(data, dtype=float)
    if data.ndim == 1:
        data = data[:, None]
    if K > len(data):
        raise ValueError("K must not exceed the number of data points")
    centers = kmeans_pp_seed(data, K, rng) if centers is None else np.asarray(centers, dtype=float)
    for _ in range(iters):
        new, _ = lloyd_step(data, centers)
        if np.allclose(new, centers):
            centers = new
            break
        centers = new
    labels = _sq_dists(data, centers).argmin(axis=1)
    probs = np.full((len(data), K), 0.01 / (K - 1) if K > 1 else 0.0)
    probs[np.arange(len(data)), labels] = 0.99 if K > 1 else 1.0
    return centers, np.log(probs)


def log_normal_iso(x, mean, sigma):
    d = x.shape[-1]
    return -0.5 * (((x - mean) / sigma) ** 2).sum(-1) - d * np.log(sigma) - 0.5 * d * LOG_2PI


class GmmModel:
    """Gaussian-mixture ELBO over packed parameters; see module docstring."""

    def __init__(self, y, K, sigma0=5.0, sigma_y=0.5, pi=None, init=None):
        self.y = np.asarray(y, dtype=float)
        if self.y.ndim == 1:
            self.y = self.y[:, None]
        self.N, self.d = self.y.shape
        self.K = K
        self.sigma0 = sigma0
        self.sigma_y = sigma_y
        self.pi = np.full(K, 1.0 / K) if pi is None else np.asarray(pi, dtype=float)
        self.log_pi = np.log(self.pi)
        self.init = init
        self.support_size = K
        self.dim = K * self.d + self.N * K

    def pack(self, mu, logits):
        return np.concatenate([np.asarray(mu, float).ravel(), np.asarray(logits, float).ravel()])

    def unpack(self, eta):
        eta = np.asarray(eta, dtype=float)
        split = self.K * self.d
        return eta[:split].reshape(self.K, self.d), eta[split:].reshape(self.N, self.K)

    def logit_slice(self, n):
        start = self.K * self.d + n * self.K
        return slice(start, start + self.K)

    def initial_params(self):
        if self.init is None:
            raise ValueError("model has no initialization; pass init=(mu_hat, logits)")
        return self.pack(*self.init)

    def integrand_table(self, mu, logits):
        """``(N, K)`` array of ``f_n(z)`` and the ``(N, K)`` log-memberships."""
        log_q = log_softmax(logits, axis=1)
        loglik = log_normal_iso(self.y[:, None, :], mu[None, :, :], self.sigma_y)
        return loglik + self.log_pi - log_q, log_q

    def log_prior(self, mu):
        return float(log_normal_iso(mu, 0.0, self.sigma0).sum())

    def elbo(self, eta):
        mu, logits = self.unpack(eta)
        table, log_q = self.integrand_table(mu, logits)
        return float((np.exp(log_q) * table).sum()) + self.log_prior(mu)

    def loss(self, eta):
        return -self.elbo(eta)

    def per_datum(self, n, eta):
        """Distribution and integrand for datum ``n`` on the full parameter vector."""
        _, logits = self.unpack(eta)
        dist = SoftmaxCategorical(logits[n], param_slice=self.logit_slice(n), dim=self.dim)
        return dist, GmmDatumIntegrand(self, n)

    def weighted_grad(self, eta, atoms, weights, controls):
        """ELBO gradient of ``sum_n sum_j W[n,j] g_n(A[n,j])`` plus the prior term.

        ``g_n(a) = (f_n(a) - C[n,j]) score_n(a) + grad f_n(a)``. With ``atoms``
        covering all categories, ``weights = q`` and ``controls = 0`` this is
        the exact gradient.
        """
        mu, logits = self.unpack(eta)
        table, log_q = self.integrand_table(mu, logits)
        q = np.exp(log_q)
        rows = np.arange(self.N)[:, None]
        coef = weights * (table[rows, atoms] - controls - 1.0)
        g_logits = -q * coef.sum(axis=1, keepdims=True)
        np.add.at(g_logits, (np.broadcast_to(rows, atoms.shape), atoms), coef)
        resid = (self.y[:, None, :] - mu[atoms]) / self.sigma_y**2
        g_mu = np.zeros_like(mu)
        np.add.at(g_mu, atoms, weights[..., None] * resid)
        g_mu -= mu / self.sigma0**2
        return self.pack(g_mu, g_logits)

    def exact_elbo_grad(self, eta):
        _, logits = self.unpack(eta)
        q = softmax(logits, axis=1)
        atoms = np.broadcast_to(np.arange(self.K), (self.N, self.K))
        return self.weighted_grad(eta, atoms, q, np.zeros_like(q))

    def loss_grad(self, eta, config: EstimatorConfig, rng) -> GradEstimate:
        if config.kind == "exact":
            return GradEstimate(-self.exact_elbo_grad(eta), self.N * self.K)
        atoms, weights, controls = self.draw_plan(eta, config, rng)
        return GradEstimate(-self.weighted_grad(eta, atoms, weights, controls), self.N * atoms.shape[1])

    def draw_plan(self, eta, config: EstimatorConfig, rng):
        """Atoms, weights and control variates for every datum under ``config``.

        Column layout per datum: the ``k`` top atoms (weights ``q``) followed by
        ``s`` conditional tail draws (weights ``tail / s``). REINFORCE+ draws a
        control-variate atom per auxiliary draw; Rao-Blackwellization shares one
        across all columns, while minibatch and budgeted draws give each tail
        column its own.
        """
        mu, logits = self.unpack(eta)
        table, log_q = self.integrand_table(mu, logits)
        q = np.exp(log_q)
        order = np.argsort(-log_q, axis=1, kind="stable")
        sorted_q = np.take_along_axis(q, order, axis=1)

        if config.budgeted:
            n = config.minibatch_n
            k = _select_k_rows(sorted_q, n) if config.auto_k else np.full(self.N, config.rb_k)
            shared = False
        elif config.rb_k > 0:
            n, k, shared = config.rb_k + 1, np.full(self.N, config.rb_k), True
        else:
            n, k, shared = config.minibatch_n, np.zeros(self.N, dtype=int), False
        k = np.minimum(k, self.K)
        cols = np.arange(n)
        exact_col = cols[None, :] < k[:, None]
        padded_q = np.pad(sorted_q, ((0, 0), (0, max(0, n - self.K))))[:, :n]
        included = np.where(exact_col, padded_q, 0.0).sum(axis=1)
        tail = np.where(k >= self.K, 0.0, np.clip(1.0 - included, 0.0, None))

        # mask of atoms excluded from the tail draw, per datum
        rank = np.empty_like(order)
        np.put_along_axis(rank, order, np.arange(self.K)[None, :], axis=1)
        tail_q = np.where(rank < k[:, None], 0.0, q)
        draws = _sample_rows(tail_q, n, rng)

        top = np.pad(order, ((0, 0), (0, max(0, n - self.K))))[:, :n]
        atoms = np.where(exact_col, top, draws)
        n_tail = np.maximum(n - k, 1)
        has_tail = (tail > 0) & (tail_q.sum(axis=1) > 0)
        tail_w = np.where(has_tail, tail / n_tail, 0.0)
        weights = np.where(exact_col, np.take_along_axis(q, top, axis=1), tail_w[:, None])

        if config.kind == "reinforce":
            controls = np.zeros((self.N, n))
        elif shared:
            cv = _sample_rows(q, 1, rng)[:, 0]
            controls = np.broadcast_to(table[np.arange(self.N), cv][:, None], (self.N, n)).copy()
        else:
            cv = _sample_rows(q, n + 1, rng)
            # column 0 of the draws serves the exact block, the rest one per tail column
            per_col = np.where(exact_col, cv[:, :1], cv[:, 1:])
            controls = table[np.arange(self.N)[:, None], per_col]
        return atoms, weights, controls


def _sample_rows(weights, m, rng):
    """``m`` iid categorical draws per row, proportional to non-negative ``weights``."""
    cdf = np.cumsum(weights, axis=1)
    total = cdf[:, -1:]
    u = rng.random((weights.shape[0], m)) * total
    idx = (cdf[:, None, :] > u[:, :, None]).argmax(axis=2)
    return idx


def _select_k_rows(sorted_q, n):
    K = sorted_q.shape[1]
    kmax = min(n, K)
    cum = np.concatenate([np.zeros((len(sorted_q), 1)), np.cumsum(sorted_q, axis=1)], axis=1)
    best_k = np.zeros(len(sorted_q), dtype=int)
    best = np.full(len(sorted_q), np.inf)
    for k in range(kmax + 1):
        tail = np.zeros(len(sorted_q)) if k == K else np.clip(1.0 - cum[:, k], 0.0, None)
        if k == n:
            value = np.where(tail > 0, np.inf, 0.0)
        else:
            value = tail / (n - k)
        better = value < best
        best_k[better], best[better] = k, value[better]
    return best_k


class GmmDatumIntegrand:
    """``f_n(z)`` and its gradient on the full packed parameter vector."""

    def __init__(self, model: GmmModel, n: int):
        self.model, self.n = model, n

    def eval(self, z, eta):
        m = self.model
        mu, logits = m.unpack(eta)
        log_q = log_softmax(logits[self.n])
        y = m.y[self.n]
        value = float(log_normal_iso(y, mu[z], m.sigma_y)) + m.log_pi[z] - log_q[z]
        grad = np.zeros(len(eta))
        local = np.exp(log_q)
        local[z] -= 1.0
        grad[m.logit_slice(self.n)] = local
        grad[z * m.d:(z + 1) * m.d] = (y - mu[z]) / m.sigma_y**2
        return value, grad
