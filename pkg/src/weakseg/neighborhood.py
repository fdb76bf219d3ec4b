"""Neighbourhood distributions and the neighbourhood KL loss."""

from __future__ import annotations

from enum import Enum

import numpy as np

from .distributions import EPS, InvalidInputError, as_grid, floor_distribution, softmax_grid
from .kernels import FeatureImage, KernelParams, make_filter


class NeighborhoodMode(str, Enum):
    WEIGHTED = "weighted"
    EXPONENTIATED = "exponentiated"

    @classmethod
    def parse(cls, value) -> "NeighborhoodMode":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise InvalidInputError(f"unknown neighborhood mode {value!r}") from None


def _normalizer(op, feat: FeatureImage) -> np.ndarray:
    if feat.npix < 2:
        raise InvalidInputError("a single-pixel image has no neighbours")
    norm = op.normalizer
    if np.any(norm <= 0):
        raise InvalidInputError("zero kernel normaliser: pixel has no neighbours")
    return norm


def _mean_field_sum(op, feat, p):
    """Kernel-weighted neighbour mean ``sum_{j!=i} k_ij p_j / sum_{j!=i} k_ij``."""
    filtered = op.apply(p)
    norm = _normalizer(op, feat)
    return filtered / norm[..., None], norm


def weighted_mean(params: KernelParams, feat: FeatureImage, p, method: str = "exact") -> np.ndarray:
    p = as_grid(p, "p")
    op = make_filter(params, feat, method)
    m, _ = _mean_field_sum(op, feat, p)
    # convex combination; renormalise away rounding drift
    return m / m.sum(axis=-1, keepdims=True)


def _exponentiate(m: np.ndarray, scale: float) -> np.ndarray:
    z = scale * m
    z -= z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def exponentiated_weighted_mean(params: KernelParams, feat: FeatureImage, p, method: str = "exact") -> np.ndarray:
    """Softmax of the normalised-kernel neighbour sum, scaled by ``params.exp_scale``."""
    p = as_grid(p, "p")
    op = make_filter(params, feat, method)
    m, _ = _mean_field_sum(op, feat, p)
    return _exponentiate(m, params.exp_scale)


def neighborhood_distribution(mode, params, feat, p, method: str = "exact") -> np.ndarray:
    mode = NeighborhoodMode.parse(mode)
    if mode is NeighborhoodMode.WEIGHTED:
        return weighted_mean(params, feat, p, method)
    return exponentiated_weighted_mean(params, feat, p, method)


def neighborhood_loss_and_grad(
    mode,
    params: KernelParams,
    feat: FeatureImage,
    logits,
    method: str = "exact",
    stop_gradient: bool = True,
):
    """``KL(p || p_neighb)`` summed over pixels and its gradient w.r.t. logits.

    With ``stop_gradient`` (the default) the neighbourhood distribution is a
    fixed target and only ``p = softmax(logits)`` is differentiated.  Otherwise
    the gradient also flows through the target via the filter's adjoint.

    Returns ``(loss, grad, target)``.
    """
    mode = NeighborhoodMode.parse(mode)
    p = softmax_grid(logits)
    if p.shape[:2] != feat.shape:
        raise InvalidInputError(f"logits shape {p.shape} does not match image {feat.shape}")
    op = make_filter(params, feat, method)
    m, norm = _mean_field_sum(op, feat, p)
    if mode is NeighborhoodMode.WEIGHTED:
        target = m / m.sum(axis=-1, keepdims=True)
    else:
        target = _exponentiate(m, params.exp_scale)

    pf = floor_distribution(p)
    tf = floor_distribution(target)
    log_ratio = np.log(pf) - np.log(tf)
    kl_i = np.sum(pf * log_ratio, axis=-1, keepdims=True)
    loss = float(kl_i.sum())

    # d/dp of sum p log(p/t) with t held fixed: log(p/t) + 1
    g = log_ratio + 1.0
    if not stop_gradient:
        if mode is NeighborhoodMode.WEIGHTED:
            # t = A p  ->  -A^T (p / t)
            v = p / np.maximum(target, EPS)
        else:
            # t = softmax(s A p)  ->  -s A^T (p - t)
            v = params.exp_scale * (p - target)
        g = g - op.adjoint(v / norm[..., None])
    grad = p * (g - np.sum(p * g, axis=-1, keepdims=True))
    return loss, grad, target
