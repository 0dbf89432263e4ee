"""First-order optimizers and the loop that threads gradient estimates into updates."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, replace
from typing import Protocol

import numpy as np

from rbgrad.errors import NumericError
from rbgrad.estimators import EstimatorConfig, GradEstimate

logger = logging.getLogger(__name__)


def _finite(grad):
    grad = np.asarray(grad, dtype=float)
    if not np.all(np.isfinite(grad)):
        raise NumericError("non-finite gradient")
    return grad


def sgd_step(eta, grad, lr: float):
    if not lr > 0:
        raise ValueError("lr must be positive")
    return np.asarray(eta, dtype=float) - lr * _finite(grad)


@dataclass(frozen=True)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, dim: int, **hyper) -> "AdamState":
        return cls(np.zeros(dim), np.zeros(dim), **hyper)


def adam_step(state: AdamState, eta, grad) -> tuple[AdamState, np.ndarray]:
    """Bias-corrected Adam update for minimization. Returns the new state and parameters."""
    grad = _finite(grad)
    if grad.shape != state.m.shape:
        raise ValueError(f"gradient shape {grad.shape} does not match state {state.m.shape}")
    t = state.t + 1
    m = state.beta1 * state.m + (1 - state.beta1) * grad
    v = state.beta2 * state.v + (1 - state.beta2) * grad**2
    m_hat = m / (1 - state.beta1**t)
    v_hat = v / (1 - state.beta2**t)
    eta = np.asarray(eta, dtype=float) - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return replace(state, m=m, v=v, t=t), eta


@dataclass(frozen=True)
class OptimizerConfig:
    name: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


class Model(Protocol):
    """What :func:`run_optimization` needs from an experiment model."""

    support_size: int | None

    def initial_params(self) -> np.ndarray: ...

    def loss(self, eta: np.ndarray) -> float:
        """Exact (or enumerated) reporting loss, to be minimized."""

    def loss_grad(self, eta: np.ndarray, config: EstimatorConfig,
                  rng: np.random.Generator) -> GradEstimate:
        """Stochastic estimate of the gradient of the reporting loss."""


@dataclass(frozen=True)
class TraceRecord:
    trial: int
    iter: int
    loss: float
    grad_norm: float
    base_evals: int
    wall_ms: float
    aborted: bool = False


def trial_rng(seed: int, trial: int) -> np.random.Generator:
    """Generator for one trial: PCG64 seeded from the entropy pair ``(seed, trial)``.

    Streams for different trials are independent and adding trials leaves
    earlier ones untouched.
    """
    return np.random.default_rng(np.random.SeedSequence([seed, trial]))


def run_trial(model: Model, estimator_config: EstimatorConfig, optimizer_config: OptimizerConfig,
              iters: int, trial: int, seed: int) -> list[TraceRecord]:
    return _trial(model, estimator_config, optimizer_config, iters, trial, seed)[0]


def _trial(model, estimator_config, optimizer_config, iters, trial, seed):
    rng = trial_rng(seed, trial)
    eta = model.initial_params()
    state = AdamState.zeros(len(eta), lr=optimizer_config.lr, beta1=optimizer_config.beta1,
                            beta2=optimizer_config.beta2, eps=optimizer_config.eps)
    records = []
    start = time.perf_counter()
    for it in range(iters):
        try:
            est = model.loss_grad(eta, estimator_config, rng)
            if optimizer_config.name == "adam":
                state, eta = adam_step(state, eta, est.grad)
            else:
                eta = sgd_step(eta, est.grad, optimizer_config.lr)
            loss = model.loss(eta)
            if not np.isfinite(loss):
                raise NumericError("non-finite loss")
        except NumericError as exc:
            logger.warning("trial %d aborted at iteration %d: %s", trial, it, exc)
            records.append(TraceRecord(trial, it, float("nan"), float("nan"), 0,
                                       (time.perf_counter() - start) * 1e3, aborted=True))
            break
        records.append(TraceRecord(trial, it, float(loss), float(np.linalg.norm(est.grad)),
                                   est.base_evals, (time.perf_counter() - start) * 1e3))
    return records, eta


def run_optimization(model: Model, estimator_config: EstimatorConfig,
                     optimizer_config: OptimizerConfig, iters: int, trials: int,
                     seed: int, jobs: int = 1, return_params: bool = False):
    """Run ``trials`` independent optimizations from the model's initial point.

    Row ``iter`` holds the loss after the ``iter``-th update and the norm of the
    estimate that drove it. Records are ordered by ``(trial, iter)`` whatever
    the value of ``jobs``. With ``return_params`` the final parameter vector of
    each trial is returned alongside the records.
    """
    if iters < 1 or trials < 1:
        raise ValueError("iters and trials must be >= 1")
    args = [(model, estimator_config, optimizer_config, iters, t, seed) for t in range(trials)]
    if jobs > 1 and trials > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_trial_args, args))
    else:
        results = [_trial(*a) for a in args]
    records = [rec for trial_records, _ in results for rec in trial_records]
    if return_params:
        return records, [params for _, params in results]
    return records


def _trial_args(args):
    return _trial(*args)
