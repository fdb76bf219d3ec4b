"""Per-pixel label distributions: softmax, KL divergence, entropy.

Grids are ``(H, W, K)`` float64 arrays, pixel-major, with ``K = L + 1`` labels
and label 0 reserved for background.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Floor applied to probabilities before any logarithm.
EPS = 1e-12


class InvalidInputError(ValueError):
    """Raised for non-finite, mis-shaped or off-simplex inputs."""


@dataclass(frozen=True)
class LabelSet:
    """Labels present in one image; ``num_classes`` counts background."""

    num_classes: int
    present: tuple[int, ...]

    def __post_init__(self):
        present = tuple(sorted(set(int(v) for v in self.present)))
        if 0 not in present:
            present = (0,) + present
        if any(v < 0 or v >= self.num_classes for v in present):
            raise InvalidInputError(f"labels {present} outside [0, {self.num_classes - 1}]")
        object.__setattr__(self, "present", present)

    @property
    def foreground(self) -> tuple[int, ...]:
        return tuple(v for v in self.present if v != 0)

    def mask(self) -> np.ndarray:
        m = np.zeros(self.num_classes, dtype=bool)
        m[list(self.present)] = True
        return m


def as_grid(values, name: str = "grid") -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 3:
        raise InvalidInputError(f"{name} must be (H, W, K), got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} contains non-finite values")
    return arr


def softmax_grid(logits) -> np.ndarray:
    """Per-pixel softmax over the last axis, max-subtracted for stability."""
    f = as_grid(logits, "logits")
    z = f - f.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax_grid(logits) -> np.ndarray:
    f = as_grid(logits, "logits")
    z = f - f.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def floor_distribution(p, eps: float = EPS) -> np.ndarray:
    """Clamp to ``[eps, 1]`` and renormalise each pixel."""
    q = np.clip(np.asarray(p, dtype=np.float64), eps, 1.0)
    return q / q.sum(axis=-1, keepdims=True)


def check_distribution(p, name: str = "distribution", atol: float = 1e-9) -> np.ndarray:
    arr = as_grid(p, name)
    if np.any(arr < -atol) or np.any(arr > 1 + atol):
        raise InvalidInputError(f"{name} has entries outside [0, 1]")
    if not np.allclose(arr.sum(axis=-1), 1.0, atol=atol, rtol=0):
        raise InvalidInputError(f"{name} rows do not sum to 1")
    return arr


def kl_per_pixel(p, q) -> np.ndarray:
    """``sum_l p log(p/q)`` at every pixel, both sides floored first."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise InvalidInputError(f"shape mismatch {p.shape} vs {q.shape}")
    pf = floor_distribution(p)
    qf = floor_distribution(q)
    return np.sum(pf * (np.log(pf) - np.log(qf)), axis=-1)


def kl_divergence(p, q) -> float:
    """KL divergence summed over pixels. Divide by ``H*W`` for a per-pixel mean."""
    return float(kl_per_pixel(p, q).sum())


def entropy(weights) -> float:
    """Shannon entropy in nats, with ``0 log 0 = 0``."""
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w < 0):
        raise InvalidInputError("negative weight")
    nz = w[w > 0]
    return float(-np.sum(nz * np.log(nz)))
