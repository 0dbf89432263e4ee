"""Rao-Blackwellized stochastic gradients for discrete distributions."""

from rbgrad.distributions import (
    IndependentBernoulliProduct,
    ShiftedNegativeBinomial,
    SoftmaxCategorical,
    TopKSet,
)
from rbgrad.estimators import (
    REINFORCE,
    REINFORCE_PLUS,
    AuxDraws,
    EstimatorConfig,
    GradEstimate,
    compose_triplet,
    estimate,
    exact_gradient,
    minibatch,
    rao_blackwellize,
    rb_budgeted,
    select_k,
)

__version__ = "0.1.0"
