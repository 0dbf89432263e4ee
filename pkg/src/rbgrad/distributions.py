"""Discrete distribution families over finite and countably infinite supports.

Every distribution owns a contiguous slice of a flat parameter vector. Scores
are returned as full-length vectors that are zero outside that slice, so that
estimates from the distribution and from an integrand can simply be added.

Atoms are non-negative integers. For :class:`IndependentBernoulliProduct` the
atom's base-2 digits are the bit vector (bit ``i`` is ``(atom >> i) & 1``); for
:class:`ShiftedNegativeBinomial` the atom is the count ``N >= shift``.
"""

from __future__ import annotations

import math
from abc import ABC, abstractmethod
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy import special

from rbgrad.errors import DegenerateTailError, DomainError, NumericError

SCAN_CAP = 10**6
SCAN_MASS = 1.0 - 1e-12
_CHUNK = 256


def log_gamma(x: float) -> float:
    """Natural log of the gamma function for ``x > 0``."""
    if not x > 0:
        raise DomainError(f"log_gamma requires x > 0, got {x}")
    return math.lgamma(x)


def digamma(x: float) -> float:
    """Digamma function (derivative of :func:`log_gamma`) for ``x > 0``."""
    if not x > 0:
        raise DomainError(f"digamma requires x > 0, got {x}")
    return float(special.digamma(x))


def log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


@dataclass(frozen=True)
class TopKSet:
    """The ``k`` highest-probability atoms, in descending pmf order."""

    atoms: tuple[int, ...]
    included_mass: float
    tail_mass: float

    @property
    def k(self) -> int:
        return len(self.atoms)


class DiscreteDistribution(ABC):
    """Interface shared by all families.

    Subclasses set ``dim`` (length of the full parameter vector) and
    ``param_slice`` (the coordinates the distribution owns).
    """

    dim: int
    param_slice: slice
    support_size: int | None  # None for countably infinite support

    @abstractmethod
    def log_pmf(self, z: int) -> float: ...

    def pmf(self, z: int) -> float:
        return math.exp(self.log_pmf(z))

    @abstractmethod
    def score(self, z: int) -> np.ndarray: ...

    @abstractmethod
    def sample(self, rng: np.random.Generator) -> int: ...

    @abstractmethod
    def top_k(self, k: int) -> TopKSet: ...

    @abstractmethod
    def sample_conditional_complement(self, topk: TopKSet, rng: np.random.Generator) -> int: ...

    @abstractmethod
    def enumerate_support(self, mass_cutoff: float = SCAN_MASS) -> list[tuple[int, float]]: ...

    def sample_conditional_topk(self, topk: TopKSet, rng: np.random.Generator) -> int:
        if topk.k == 0 or not topk.included_mass > 0:
            raise DegenerateTailError("top-k set carries no probability mass")
        weights = np.array([self.pmf(a) for a in topk.atoms])
        return topk.atoms[_inverse_cdf(weights, rng.random())]

    def _embed(self, local: np.ndarray) -> np.ndarray:
        out = np.zeros(self.dim)
        out[self.param_slice] = local
        return out


def _inverse_cdf(weights: np.ndarray, u: float) -> int:
    """Index drawn with probability proportional to ``weights`` using one uniform ``u``."""
    cdf = np.cumsum(weights)
    total = cdf[-1]
    if not total > 0:
        raise DegenerateTailError("cannot sample from zero total mass")
    idx = int(np.searchsorted(cdf, u * total, side="right"))
    if idx >= len(weights):
        idx = int(np.flatnonzero(weights > 0)[-1])
    return idx


class FiniteDistribution(DiscreteDistribution):
    """A distribution over ``{0, ..., K-1}`` backed by a table of log-probabilities."""

    log_probs: np.ndarray

    @property
    def support_size(self) -> int:
        return len(self.log_probs)

    @cached_property
    def probs(self) -> np.ndarray:
        return np.exp(self.log_probs)

    def _check(self, z) -> int:
        if isinstance(z, (bool, np.bool_)) or not isinstance(z, (int, np.integer)):
            raise DomainError(f"atom must be an integer, got {z!r}")
        if not 0 <= z < self.support_size:
            raise DomainError(f"atom {z} outside support of size {self.support_size}")
        return int(z)

    def log_pmf(self, z: int) -> float:
        return float(self.log_probs[self._check(z)])

    def pmf(self, z: int) -> float:
        return float(self.probs[self._check(z)])

    def sample(self, rng: np.random.Generator) -> int:
        return _inverse_cdf(self.probs, rng.random())

    @cached_property
    def _order(self) -> np.ndarray:
        # stable sort on -log_prob: ties resolved by ascending atom index
        return np.argsort(-self.log_probs, kind="stable")

    @cached_property
    def _topk_memo(self) -> dict:
        return {}

    def _topk_entry(self, k: int):
        """``(TopKSet, complement atoms, complement pmf)``, memoized per ``k``."""
        entry = self._topk_memo.get(k)
        if entry is None:
            if k < 0 or k > self.support_size:
                raise DomainError(f"k={k} outside [0, {self.support_size}]")
            atoms = tuple(int(a) for a in self._order[:k])
            included = float(self.probs[list(atoms)].sum()) if k else 0.0
            tail = 0.0 if k == self.support_size else max(0.0, 1.0 - included)
            rest = np.sort(self._order[k:])
            entry = (TopKSet(atoms, included, tail), rest, self.probs[rest])
            self._topk_memo[k] = entry
        return entry

    def top_k(self, k: int) -> TopKSet:
        return self._topk_entry(k)[0]

    def complement(self, topk: TopKSet) -> np.ndarray:
        return self._topk_entry(topk.k)[1]

    def sample_conditional_complement(self, topk: TopKSet, rng: np.random.Generator) -> int:
        if not topk.tail_mass > 0:
            raise DegenerateTailError("degenerate tail: complement of top-k has zero mass")
        _, rest, weights = self._topk_entry(topk.k)
        return int(rest[_inverse_cdf(weights, rng.random())])

    def enumerate_support(self, mass_cutoff: float = SCAN_MASS) -> list[tuple[int, float]]:
        return [(z, float(p)) for z, p in enumerate(self.probs)]


class SoftmaxCategorical(FiniteDistribution):
    """Categorical distribution with ``probs = softmax(logits)``.

    Args:
        logits: length-K real vector.
        param_slice: where the logits live inside the full parameter vector.
            Defaults to the whole vector.
        dim: length of the full parameter vector. Defaults to K.
    """

    def __init__(self, logits, param_slice: slice | None = None, dim: int | None = None):
        self.logits = np.asarray(logits, dtype=float)
        if self.logits.ndim != 1 or len(self.logits) == 0:
            raise DomainError("logits must be a non-empty vector")
        if not np.all(np.isfinite(self.logits)):
            raise NumericError("non-finite logits")
        self.dim = len(self.logits) if dim is None else dim
        self.param_slice = slice(0, len(self.logits)) if param_slice is None else param_slice
        self.log_probs = self.logits - special.logsumexp(self.logits)

    def score(self, z: int) -> np.ndarray:
        local = -self.probs.copy()
        local[self._check(z)] += 1.0
        return self._embed(local)


class IndependentBernoulliProduct(FiniteDistribution):
    """``d`` iid Bernoulli(sigmoid(eta)) bits encoded as one categorical over ``2**d`` atoms."""

    def __init__(self, eta: float, d: int = 3, param_slice: slice | None = None, dim: int | None = None):
        if d < 1:
            raise DomainError("d must be positive")
        self.eta = float(eta)
        self.d = d
        self.dim = 1 if dim is None else dim
        self.param_slice = slice(0, 1) if param_slice is None else param_slice
        self.ones = np.array([bin(a).count("1") for a in range(2**d)])
        self.sigma = float(special.expit(self.eta))
        self.log_probs = self.ones * log_sigmoid(self.eta) + (d - self.ones) * log_sigmoid(-self.eta)

    def bits(self, z: int) -> np.ndarray:
        z = self._check(z)
        return np.array([(z >> i) & 1 for i in range(self.d)])

    def score(self, z: int) -> np.ndarray:
        return self._embed(np.array([self.ones[self._check(z)] - self.d * self.sigma]))


class ShiftedNegativeBinomial(DiscreteDistribution):
    """Negative binomial on ``{shift, shift+1, ...}`` with unconstrained parameters.

    ``pmf(shift + m) = Gamma(m + r) / (Gamma(r) m!) * (1 - p)**r * p**m`` where
    ``r = exp(log_r)`` and ``p = sigmoid(logit_p)``. Parameter order inside the
    owned slice is ``(log_r, logit_p)``.
    """

    support_size = None

    def __init__(self, log_r: float, logit_p: float, shift: int = 0,
                 param_slice: slice | None = None, dim: int | None = None):
        if shift < 0:
            raise DomainError("shift must be non-negative")
        self.log_r = float(log_r)
        self.logit_p = float(logit_p)
        if not (math.isfinite(self.log_r) and math.isfinite(self.logit_p)):
            raise NumericError("non-finite negative binomial parameters")
        self.shift = int(shift)
        self.r = math.exp(self.log_r)
        self.p = float(special.expit(self.logit_p))
        self._log_p = float(log_sigmoid(self.logit_p))
        self._log_1mp = float(log_sigmoid(-self.logit_p))
        self.dim = 2 if dim is None else dim
        self.param_slice = slice(0, 2) if param_slice is None else param_slice

    def _offsets(self, m) -> np.ndarray:
        m = np.asarray(m, dtype=float)
        return (special.gammaln(m + self.r) - special.gammaln(self.r) - special.gammaln(m + 1.0)
                + self.r * self._log_1mp + m * self._log_p)

    def _check(self, z) -> int:
        if isinstance(z, (bool, np.bool_)) or not isinstance(z, (int, np.integer)) or z < 0:
            raise DomainError(f"atom must be a non-negative integer, got {z!r}")
        return int(z)

    def log_pmf(self, z: int) -> float:
        z = self._check(z)
        if z < self.shift:
            return -math.inf
        return float(self._offsets(z - self.shift))

    def log_pmf_array(self, atoms) -> np.ndarray:
        m = np.asarray(atoms) - self.shift
        out = np.full(m.shape, -np.inf)
        ok = m >= 0
        out[ok] = self._offsets(m[ok])
        return out

    def score(self, z: int) -> np.ndarray:
        z = self._check(z)
        if z < self.shift:
            raise DomainError(f"atom {z} below shift {self.shift}")
        m = z - self.shift
        d_log_r = self.r * (special.digamma(m + self.r) - special.digamma(self.r) + self._log_1mp)
        d_logit_p = m * (1.0 - self.p) - self.r * self.p
        return self._embed(np.array([d_log_r, d_logit_p]))

    def score_array(self, atoms) -> np.ndarray:
        """Scores of many atoms as a ``(len(atoms), 2)`` array over the owned slice."""
        m = np.asarray(atoms, dtype=float) - self.shift
        if np.any(m < 0):
            raise DomainError("atom below shift")
        d_log_r = self.r * (special.digamma(m + self.r) - special.digamma(self.r) + self._log_1mp)
        d_logit_p = m * (1.0 - self.p) - self.r * self.p
        return np.stack([d_log_r, d_logit_p], axis=-1)

    def _tail_bound(self, m: np.ndarray, pmf: np.ndarray) -> np.ndarray:
        """Upper bound on the mass strictly beyond each ``m`` (``inf`` where no bound applies).

        Uses the ratio ``pmf(j+1)/pmf(j) = p (j + r) / (j + 1)``, which past
        ``m`` is at most ``rho(m)`` for ``r >= 1`` and at most ``p`` otherwise.
        """
        rho = self.p * (m + self.r) / (m + 1.0) if self.r >= 1 else np.full(m.shape, self.p)
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(rho < 1, pmf * rho / (1.0 - rho), np.inf)

    def _prefix_end(self, mass_cutoff: float):
        """pmf of the shortest prefix whose mass reaches ``mass_cutoff``.

        The scan also stops once the analytic tail bound drops below
        ``1 - mass_cutoff``, which rounding can make necessary.
        """
        chunks, total, start = [], 0.0, 0
        while True:
            if start >= SCAN_CAP:
                raise NumericError("support scan exceeded cap")
            m = np.arange(start, start + _CHUNK, dtype=float)
            pmf = np.exp(self._offsets(m))
            cum = total + np.cumsum(pmf)
            stop = np.flatnonzero((cum >= mass_cutoff) | (self._tail_bound(m, pmf) <= 1.0 - mass_cutoff))
            if len(stop):
                chunks.append(pmf[:stop[0] + 1])
                return np.concatenate(chunks)
            chunks.append(pmf)
            total = float(cum[-1])
            start += _CHUNK

    @cached_property
    def _window(self) -> np.ndarray:
        """pmf of ``shift + m`` for ``m = 0..W-1``, covering mass ``>= 1 - 1e-12``."""
        return self._prefix_end(SCAN_MASS)

    def top_k(self, k: int) -> TopKSet:
        if k < 0:
            raise DomainError("k must be non-negative")
        window = self._window
        if k > len(window):
            window = np.exp(self._offsets(np.arange(k)))
        order = np.argsort(-window, kind="stable")[:k]
        atoms = tuple(int(m) + self.shift for m in order)
        included = float(window[order].sum()) if k else 0.0
        return TopKSet(atoms, included, max(0.0, 1.0 - included))

    def _scan(self, excluded: set[int], target_frac: float, tail: float) -> int:
        """Inverse-CDF scan over the support minus ``excluded`` for ``u = target_frac * tail``."""
        u = target_frac * tail
        acc, start = 0.0, 0
        seen_atoms, seen_mass = [], []
        mode = max(0, math.floor((self.r - 1.0) * self.p / (1.0 - self.p))) if self.r > 1 else 0
        while start < SCAN_CAP:
            m = np.arange(start, min(start + _CHUNK, SCAN_CAP))
            pmf = np.exp(self._offsets(m))
            for a in excluded:
                if start <= a - self.shift < start + len(m):
                    pmf[a - self.shift - start] = 0.0
            cum = acc + np.cumsum(pmf)
            hit = np.flatnonzero(cum > u)
            if len(hit):
                return int(m[hit[0]]) + self.shift
            stalled = float(cum[-1]) == acc
            acc = float(cum[-1])
            seen_atoms.append(m)
            seen_mass.append(pmf)
            if start > mode and stalled:
                # remaining mass underflows; renormalize over what was scanned
                masses = np.concatenate(seen_mass)
                return int(np.concatenate(seen_atoms)[_inverse_cdf(masses, target_frac)]) + self.shift
            start += _CHUNK
        raise NumericError("conditional scan exceeded cap")

    def sample(self, rng: np.random.Generator) -> int:
        return self._scan(set(), rng.random(), 1.0)

    def sample_conditional_complement(self, topk: TopKSet, rng: np.random.Generator) -> int:
        if not topk.tail_mass > 0:
            raise DegenerateTailError("degenerate tail: complement of top-k has zero mass")
        return self._scan(set(topk.atoms), rng.random(), topk.tail_mass)

    def enumerate_support(self, mass_cutoff: float = SCAN_MASS) -> list[tuple[int, float]]:
        if not mass_cutoff < 1:
            raise DomainError("infinite support requires mass_cutoff < 1")
        pmf = self._window if mass_cutoff == SCAN_MASS else self._prefix_end(mass_cutoff)
        return [(self.shift + i, float(p)) for i, p in enumerate(pmf)]
