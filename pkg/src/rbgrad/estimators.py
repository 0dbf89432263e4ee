"""Gradient estimators for ``grad_eta E_{z ~ q_eta}[f_eta(z)]``.

Base estimators (REINFORCE, REINFORCE+) are evaluated at a given atom with
their auxiliary randomness held fixed; the wrappers in this module decide
which atoms to evaluate and how to weight them:

* :func:`estimate` -- one draw ``z ~ q``.
* :func:`rao_blackwellize` -- exact sum over the top-``k`` atoms plus one
  conditional draw from the complement, weighted by the tail mass.
* :func:`minibatch` -- average of ``N`` independent draws.
* :func:`rb_budgeted` -- ``k`` exact terms plus ``N - k`` conditional draws.
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from rbgrad.distributions import DiscreteDistribution, TopKSet
from rbgrad.errors import ContractError, DomainError


class Integrand(Protocol):
    def eval(self, z: int, eta: np.ndarray) -> tuple[float, np.ndarray]:
        """Return ``f_eta(z)`` and its gradient with respect to the full ``eta``."""


@dataclass(frozen=True)
class GradEstimate:
    grad: np.ndarray
    base_evals: int


@dataclass(frozen=True)
class AuxDraws:
    """Auxiliary randomness of a base estimator, fixed across evaluations.

    ``control_variate_value`` caches ``f(control_variate_atom)`` so that the
    control variate is computed once per gradient estimate.
    """

    control_variate_atom: int | None = None
    control_variate_value: float | None = field(default=None, compare=False)


def reinforce_at(dist, integrand, eta, z, aux=None) -> np.ndarray:
    value, grad_f = integrand.eval(z, eta)
    return value * dist.score(z) + grad_f


def reinforce_plus_at(dist, integrand, eta, z, aux) -> np.ndarray:
    """REINFORCE with the scalar control variate ``C = f(z')``, ``z'`` taken from ``aux``."""
    if aux is None or aux.control_variate_atom is None:
        raise ContractError("REINFORCE+ needs aux.control_variate_atom")
    c = aux.control_variate_value
    if c is None:
        c, _ = integrand.eval(aux.control_variate_atom, eta)
    value, grad_f = integrand.eval(z, eta)
    return (value - c) * dist.score(z) + grad_f


class BaseEstimator(ABC):
    name: str

    @abstractmethod
    def draw_aux(self, dist, integrand, eta, rng) -> AuxDraws: ...

    @abstractmethod
    def aux_law(self, dist, integrand, eta) -> list[tuple[AuxDraws, float]]:
        """All auxiliary outcomes with their probabilities (finite support only)."""

    @abstractmethod
    def eval_at(self, dist, integrand, eta, z, aux) -> np.ndarray: ...


class Reinforce(BaseEstimator):
    name = "reinforce"

    def draw_aux(self, dist, integrand, eta, rng):
        return AuxDraws()

    def aux_law(self, dist, integrand, eta):
        return [(AuxDraws(), 1.0)]

    def eval_at(self, dist, integrand, eta, z, aux):
        return reinforce_at(dist, integrand, eta, z, aux)


class ReinforcePlus(BaseEstimator):
    name = "reinforce-plus"

    def draw_aux(self, dist, integrand, eta, rng):
        z_cv = dist.sample(rng)
        return AuxDraws(z_cv, integrand.eval(z_cv, eta)[0])

    def aux_law(self, dist, integrand, eta):
        return [(AuxDraws(z, integrand.eval(z, eta)[0]), p)
                for z, p in dist.enumerate_support() if p > 0]

    def eval_at(self, dist, integrand, eta, z, aux):
        return reinforce_plus_at(dist, integrand, eta, z, aux)


REINFORCE = Reinforce()
REINFORCE_PLUS = ReinforcePlus()
BASE_ESTIMATORS = {e.name: e for e in (REINFORCE, REINFORCE_PLUS)}


def exact_gradient(dist: DiscreteDistribution, integrand, eta) -> GradEstimate:
    """Sum ``q(z) [f(z) score(z) + grad f(z)]`` over the support.

    Infinite supports are enumerated until the cumulative mass reaches
    ``1 - 1e-12``.
    """
    total = np.zeros(len(eta))
    atoms = dist.enumerate_support()
    for z, p in atoms:
        if p > 0:
            total += p * reinforce_at(dist, integrand, eta, z)
    return GradEstimate(total, len(atoms))


def estimate(base: BaseEstimator, dist, integrand, eta, rng) -> GradEstimate:
    aux = base.draw_aux(dist, integrand, eta, rng)
    z = dist.sample(rng)
    return GradEstimate(base.eval_at(dist, integrand, eta, z, aux), 1)


def _topk_sum(base, dist, integrand, eta, topk: TopKSet, aux) -> np.ndarray:
    total = np.zeros(len(eta))
    for z in topk.atoms:
        total += dist.pmf(z) * base.eval_at(dist, integrand, eta, z, aux)
    return total


def _check_k(dist, k):
    if k < 0:
        raise DomainError(f"k must be non-negative, got {k}")
    if dist.support_size is not None and k > dist.support_size:
        raise DomainError(f"k={k} exceeds support size {dist.support_size}")


def rao_blackwellize(base: BaseEstimator, dist, integrand, eta, k: int, rng) -> GradEstimate:
    """Exact contribution of the top-``k`` atoms plus a tail-weighted conditional draw.

    One auxiliary draw is shared by all ``k + 1`` evaluations. When the tail
    carries no mass the conditional draw is skipped and ``k`` evaluations are
    reported.
    """
    _check_k(dist, k)
    aux = base.draw_aux(dist, integrand, eta, rng)
    topk = dist.top_k(k)
    total = _topk_sum(base, dist, integrand, eta, topk, aux)
    if topk.tail_mass > 0:
        v = dist.sample_conditional_complement(topk, rng)
        total += topk.tail_mass * base.eval_at(dist, integrand, eta, v, aux)
        return GradEstimate(total, k + 1)
    return GradEstimate(total, k)


def minibatch(base: BaseEstimator, dist, integrand, eta, n: int, rng) -> GradEstimate:
    if n < 1:
        raise DomainError("minibatch size must be >= 1")
    total = np.zeros(len(eta))
    for _ in range(n):
        total += estimate(base, dist, integrand, eta, rng).grad
    return GradEstimate(total / n, n)


def rb_budgeted(base: BaseEstimator, dist, integrand, eta, n: int, k: int, rng) -> GradEstimate:
    """Spend a budget of ``n`` evaluations as ``k`` exact terms and ``n - k`` tail draws.

    The exact terms share one auxiliary draw; each tail draw gets its own, so
    that ``k = 0`` coincides with :func:`minibatch` under the same generator.
    """
    _check_k(dist, k)
    if k > n:
        raise DomainError(f"k={k} exceeds budget n={n}")
    topk = dist.top_k(k)
    if k == n and topk.tail_mass > 0:
        raise DomainError("k = n leaves no draws for a tail with positive mass")
    total = np.zeros(len(eta))
    if k:
        aux = base.draw_aux(dist, integrand, eta, rng)
        total += _topk_sum(base, dist, integrand, eta, topk, aux)
    if not topk.tail_mass > 0:
        return GradEstimate(total, k)
    draws = n - k
    tail = np.zeros(len(eta))
    for _ in range(draws):
        aux = base.draw_aux(dist, integrand, eta, rng)
        v = dist.sample_conditional_complement(topk, rng)
        tail += base.eval_at(dist, integrand, eta, v, aux)
    return GradEstimate(total + topk.tail_mass * (tail / draws), n)


def select_k(dist: DiscreteDistribution, n: int) -> int:
    """Budget split minimizing ``tail_mass(k) / (n - k)`` over ``k = 0..n``.

    ``k = n`` is admissible only when its tail mass is exactly zero. Ties go to
    the smaller ``k``.
    """
    if n < 1:
        raise DomainError("budget must be >= 1")
    kmax = n if dist.support_size is None else min(n, dist.support_size)
    best_k, best = 0, np.inf
    for k in range(kmax + 1):
        tail = dist.top_k(k).tail_mass
        if k == n:
            if tail > 0:
                continue
            value = 0.0
        else:
            value = tail / (n - k)
        if value < best:
            best_k, best = k, value
    return best_k


def compose_triplet(u: int, v: int, b: int) -> int:
    return v if b else u


@dataclass(frozen=True)
class EstimatorConfig:
    """How to turn one gradient query into base-estimator evaluations.

    ``kind`` is ``"exact"`` or a base estimator name. ``rb_k = 0`` disables
    Rao-Blackwellization. With ``budgeted`` the ``minibatch_n`` evaluations are
    split into ``rb_k`` exact terms plus conditional draws (``auto_k`` picks the
    split with :func:`select_k` at every call).
    """

    kind: str = "reinforce-plus"
    rb_k: int = 0
    minibatch_n: int = 1
    budgeted: bool = False
    auto_k: bool = False

    def validate(self, support_size: int | None = None) -> list[str]:
        problems = []
        if self.kind != "exact" and self.kind not in BASE_ESTIMATORS:
            problems.append(f"estimator: unknown kind {self.kind!r}")
        if self.rb_k < 0:
            problems.append(f"rb_k: must be >= 0, got {self.rb_k}")
        if self.minibatch_n < 1:
            problems.append(f"minibatch_n: must be >= 1, got {self.minibatch_n}")
        if support_size is not None and self.rb_k > support_size:
            problems.append(f"rb_k: {self.rb_k} exceeds support size {support_size}")
        if self.budgeted:
            if self.rb_k > self.minibatch_n:
                problems.append("rb_k, minibatch_n: budgeted estimator needs rb_k <= minibatch_n")
            elif self.rb_k == self.minibatch_n and not self.auto_k and (
                    support_size is None or self.rb_k < support_size):
                problems.append("rb_k, minibatch_n: k = N leaves no draws for a positive tail")
        elif self.rb_k > 0 and self.minibatch_n > 1:
            problems.append("rb_k, minibatch_n: both > 1 requires the budgeted estimator")
        if self.auto_k and not self.budgeted:
            problems.append("auto_k: only meaningful with the budgeted estimator")
        return problems

    @property
    def evals_per_call(self) -> int | None:
        if self.kind == "exact":
            return None
        if self.budgeted:
            return self.minibatch_n
        return self.rb_k + 1 if self.rb_k else self.minibatch_n


def run_estimator(config: EstimatorConfig, dist, integrand, eta, rng) -> GradEstimate:
    """Dispatch one gradient query according to ``config``."""
    if config.kind == "exact":
        return exact_gradient(dist, integrand, eta)
    base = BASE_ESTIMATORS[config.kind]
    if config.budgeted:
        k = select_k(dist, config.minibatch_n) if config.auto_k else config.rb_k
        return rb_budgeted(base, dist, integrand, eta, config.minibatch_n, k, rng)
    if config.rb_k > 0:
        return rao_blackwellize(base, dist, integrand, eta, config.rb_k, rng)
    if config.minibatch_n > 1:
        return minibatch(base, dist, integrand, eta, config.minibatch_n, rng)
    return estimate(base, dist, integrand, eta, rng)
