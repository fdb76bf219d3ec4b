"""Training objective: auxiliary-label cross-entropy plus weighted neighbourhood KL.

    L = -sum_j sum_l q_aux_j(l) log p_j(l) + lambda KL(p || p_neighb)

Both terms are nonnegative and minimised.  ``q_aux`` (from the prior) and
``p_neighb`` are treated as constants within a step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .distributions import InvalidInputError, LabelSet, as_grid, log_softmax_grid, softmax_grid
from .kernels import FeatureImage, KernelParams
from .neighborhood import NeighborhoodMode, neighborhood_loss_and_grad
from .prior import DEFAULT_GRID_SIZE, PriorConstraints, PriorSolution, apply_prior, induced_masses, solve_prior


@dataclass(frozen=True)
class LossConfig:
    lam: float = 0.3
    mode: NeighborhoodMode = NeighborhoodMode.EXPONENTIATED
    normalize_per_pixel: bool = False
    use_prior: bool = True
    stop_gradient: bool = True
    filter_method: str = "fast"
    grid_size: int = DEFAULT_GRID_SIZE

    def __post_init__(self):
        if not np.isfinite(self.lam) or self.lam < 0:
            raise InvalidInputError("lambda must be a finite nonnegative number")
        object.__setattr__(self, "mode", NeighborhoodMode.parse(self.mode))
        if self.filter_method not in ("exact", "fast"):
            raise InvalidInputError(f"unknown filter method {self.filter_method!r}")


@dataclass(frozen=True)
class LossReport:
    class_loss: float
    neighb_loss: float
    total: float
    grad: np.ndarray
    aux: np.ndarray
    prior: PriorSolution | None
    npix: int
    lam: float


def classification_loss_and_grad(logits, q_aux):
    """Cross-entropy ``-sum q_aux log softmax(logits)`` and its gradient ``p - q_aux``."""
    logits = as_grid(logits, "logits")
    q = as_grid(q_aux, "q_aux")
    if q.shape != logits.shape:
        raise InvalidInputError(f"shape mismatch {logits.shape} vs {q.shape}")
    loss = float(-np.sum(q * log_softmax_grid(logits)))
    grad = softmax_grid(logits) - q
    return loss, grad


def auxiliary_labels(p, labels: LabelSet, constraints: PriorConstraints, use_prior: bool = True, grid_size: int = DEFAULT_GRID_SIZE):
    """``q_aux`` and the prior it came from.  Without the prior, weights are uniform over present labels."""
    if use_prior:
        sol = solve_prior(p, labels, constraints, grid_size)
    else:
        beta = np.where(labels.mask(), 1.0 / len(labels.present), 0.0)
        masses = induced_masses(p, beta, labels)
        sol = PriorSolution(beta=beta, feasible=True, objective=float(-np.log(len(labels.present))), masses=masses)
    return apply_prior(p, sol, labels), sol


def total_loss_and_grad(
    config: LossConfig,
    params: KernelParams,
    feat: FeatureImage,
    logits,
    labels: LabelSet,
    constraints: PriorConstraints | None = None,
) -> LossReport:
    logits = as_grid(logits, "logits")
    if logits.shape[:2] != feat.shape:
        raise InvalidInputError(f"logits shape {logits.shape} does not match image {feat.shape}")
    if logits.shape[2] != labels.num_classes:
        raise InvalidInputError(f"logits have {logits.shape[2]} labels, label set has {labels.num_classes}")
    constraints = PriorConstraints() if constraints is None else constraints
    p = softmax_grid(logits)
    aux, sol = auxiliary_labels(p, labels, constraints, config.use_prior, config.grid_size)
    class_loss, grad = classification_loss_and_grad(logits, aux)
    neighb_loss = 0.0
    if config.lam > 0:
        neighb_loss, ngrad, _ = neighborhood_loss_and_grad(
            config.mode, params, feat, logits, config.filter_method, config.stop_gradient
        )
        grad = grad + config.lam * ngrad
    npix = feat.npix
    if config.normalize_per_pixel:
        class_loss /= npix
        neighb_loss /= npix
        grad = grad / npix
    return LossReport(
        class_loss=class_loss,
        neighb_loss=neighb_loss,
        total=class_loss + config.lam * neighb_loss,
        grad=grad,
        aux=aux,
        prior=sol,
        npix=npix,
        lam=config.lam,
    )
