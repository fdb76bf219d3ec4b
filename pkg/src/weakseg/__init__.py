"""Weak supervision for semantic segmentation from image-level labels.

Auxiliary pixel targets come from an entropy-maximising image-level prior;
a neighbourhood KL loss built on a dense-CRF bilateral kernel ties each
pixel's prediction to those of similar nearby pixels.
"""

__version__ = "0.1.0"

from ._accel import backend
from .distributions import InvalidInputError, LabelSet, entropy, kl_divergence, softmax_grid
from .kernels import FeatureImage, KernelParams, filter_exact, filter_fast, kernel_value
from .losses import LossConfig, LossReport, classification_loss_and_grad, total_loss_and_grad
from .meanfield import PairwiseCrf, PotentialForm, meanfield_fixed_point, meanfield_step
from .neighborhood import NeighborhoodMode, exponentiated_weighted_mean, neighborhood_loss_and_grad, weighted_mean
from .prior import PriorConstraints, PriorSolution, apply_prior, solve_prior, solve_prior_two_class

__all__ = [
    "FeatureImage",
    "InvalidInputError",
    "KernelParams",
    "LabelSet",
    "LossConfig",
    "LossReport",
    "NeighborhoodMode",
    "PairwiseCrf",
    "PotentialForm",
    "PriorConstraints",
    "PriorSolution",
    "apply_prior",
    "backend",
    "classification_loss_and_grad",
    "entropy",
    "exponentiated_weighted_mean",
    "filter_exact",
    "filter_fast",
    "kernel_value",
    "kl_divergence",
    "meanfield_fixed_point",
    "meanfield_step",
    "neighborhood_loss_and_grad",
    "softmax_grid",
    "solve_prior",
    "solve_prior_two_class",
    "total_loss_and_grad",
    "weighted_mean",
]
