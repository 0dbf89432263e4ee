"""Experiment models: each pairs a discrete distribution with an integrand and a reporting loss."""

from rbgrad.models.bernoulli import (
    TARGET_P,
    BernoulliLoss,
    BernoulliToy,
    bernoulli_exact_loss,
    bernoulli_integrand,
)
from rbgrad.models.data import read_dataset, write_dataset
from rbgrad.models.gmm import GmmData, GmmModel, gmm_simulate, kmeans_init
from rbgrad.models.nmixture import NMixtureModel, nmixture_integrand, nmixture_simulate

__all__ = [
    "TARGET_P",
    "BernoulliLoss",
    "BernoulliToy",
    "GmmData",
    "GmmModel",
    "NMixtureModel",
    "bernoulli_exact_loss",
    "bernoulli_integrand",
    "gmm_simulate",
    "kmeans_init",
    "nmixture_integrand",
    "nmixture_simulate",
    "read_dataset",
    "write_dataset",
]
