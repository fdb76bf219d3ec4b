"""Contrast-sensitive two-kernel similarity and dense filtering with it.

    k(i, j) = w1 exp(-|x_i - x_j|^2 / 2 ta^2 - |i - j|^2 / 2 tb^2)
            + w2 exp(-|i - j|^2 / 2 tg^2)

with colours ``x`` on the 0-255 scale and positions in pixels.  Two filters
compute ``sum_{j != i} k(i, j) p_j`` together with ``sum_{j != i} k(i, j)``:

* ``filter_exact`` - direct O(n^2) summation.
* ``filter_fast`` - permutohedral lattice for the bilateral term, used as a
  ratio against an exact per-image normaliser, plus an exact separable
  convolution for the spatial term.  The per-image work is cached on the
  ``FeatureImage`` so repeated filtering of the same image is cheap.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from . import _accel
from ._accel import njit
from ._lattice import Lattice
from .distributions import InvalidInputError

NORMALIZATION_MODES = ("unit", "total_weight")


@dataclass(frozen=True)
class KernelParams:
    """Bilateral kernel hyper-parameters.

    ``downscale`` divides both spatial std-devs.  ``normalization`` controls the
    per-pixel normalised kernel used by the exponentiated neighbourhood and by
    normalised mean-field: ``"unit"`` rows sum to 1, ``"total_weight"`` rows sum
    to ``w1 + w2``.
    """

    w1: float = 10.0
    w2: float = 3.0
    theta_alpha: float = 13.0
    theta_beta: float = 13.0
    theta_gamma: float = 3.0
    downscale: int = 1
    normalization: str = "total_weight"

    def __post_init__(self):
        if self.w1 < 0 or self.w2 < 0:
            raise InvalidInputError("kernel weights must be nonnegative")
        if min(self.theta_alpha, self.theta_beta, self.theta_gamma) <= 0:
            raise InvalidInputError("kernel std-devs must be positive")
        if int(self.downscale) != self.downscale or self.downscale < 1:
            raise InvalidInputError("downscale must be a positive integer")
        if self.normalization not in NORMALIZATION_MODES:
            raise InvalidInputError(f"normalization must be one of {NORMALIZATION_MODES}")

    @classmethod
    def from_mapping(cls, values: dict) -> "KernelParams":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise InvalidInputError(f"unknown kernel keys: {sorted(unknown)}")
        return cls(**values)

    @property
    def beta(self) -> float:
        return self.theta_beta / self.downscale

    @property
    def gamma(self) -> float:
        return self.theta_gamma / self.downscale

    @property
    def self_weight(self) -> float:
        return self.w1 + self.w2

    @property
    def exp_scale(self) -> float:
        """Row sum of the normalised kernel."""
        return 1.0 if self.normalization == "unit" else self.w1 + self.w2


@dataclass(frozen=True, eq=False)
class FeatureImage:
    """Per-pixel features ``[colour, position]`` of one image."""

    color: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        c = np.asarray(self.color, dtype=np.float64)
        if c.ndim != 3 or c.shape[2] != 3:
            raise InvalidInputError(f"image must be (H, W, 3), got {c.shape}")
        c = np.ascontiguousarray(c)
        c.flags.writeable = False
        object.__setattr__(self, "color", c)

    @classmethod
    def from_image(cls, image) -> "FeatureImage":
        return cls(np.asarray(image, dtype=np.float64))

    @property
    def shape(self) -> tuple[int, int]:
        return self.color.shape[0], self.color.shape[1]

    @property
    def npix(self) -> int:
        return self.color.shape[0] * self.color.shape[1]

    def positions(self) -> np.ndarray:
        h, w = self.shape
        rows, cols = np.divmod(np.arange(h * w), w)
        return np.stack([rows, cols], axis=1).astype(np.float64)

    def colors(self) -> np.ndarray:
        return self.color.reshape(-1, 3)

    def _pixel(self, idx) -> int:
        h, w = self.shape
        if np.ndim(idx) == 0:
            k = int(idx)
        else:
            r, c = idx
            if not (0 <= r < h and 0 <= c < w):
                raise InvalidInputError(f"pixel {idx} out of bounds")
            k = int(r) * w + int(c)
        if not 0 <= k < h * w:
            raise InvalidInputError(f"pixel {idx} out of bounds")
        return k


def kernel_value(params: KernelParams, feat: FeatureImage, i, j) -> float:
    """Similarity between two distinct pixels given as ``(row, col)`` or flat index."""
    a, b = feat._pixel(i), feat._pixel(j)
    if a == b:
        raise InvalidInputError("kernel_value is undefined for i == j")
    pos = feat.positions()
    col = feat.colors()
    s2 = float(np.sum((pos[a] - pos[b]) ** 2))
    c2 = float(np.sum((col[a] - col[b]) ** 2))
    return float(
        params.w1 * np.exp(-c2 / (2 * params.theta_alpha**2) - s2 / (2 * params.beta**2))
        + params.w2 * np.exp(-s2 / (2 * params.gamma**2))
    )


def kernel_matrix(params: KernelParams, feat: FeatureImage) -> np.ndarray:
    """Dense ``(n, n)`` kernel with a zero diagonal. Small images only."""
    pos = feat.positions()
    col = feat.colors()
    s2 = ((pos[:, None, :] - pos[None, :, :]) ** 2).sum(-1)
    c2 = ((col[:, None, :] - col[None, :, :]) ** 2).sum(-1)
    k = params.w1 * np.exp(-c2 / (2 * params.theta_alpha**2) - s2 / (2 * params.beta**2))
    k += params.w2 * np.exp(-s2 / (2 * params.gamma**2))
    np.fill_diagonal(k, 0.0)
    return k


def _check_grid(feat: FeatureImage, p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 3 or p.shape[:2] != feat.shape:
        raise InvalidInputError(f"grid shape {p.shape} does not match image {feat.shape}")
    return p


# ---------------------------------------------------------------------------
# exact O(n^2) filtering
# ---------------------------------------------------------------------------


@njit(fastmath=False)
def _pairwise_numba(col, pos, vals, w1, w2, ca, cb, cg):
    n = col.shape[0]
    c = vals.shape[1]
    out = np.zeros((n, c))
    norm = np.zeros(n)
    for i in range(n - 1):
        for j in range(i + 1, n):
            dr = pos[i, 0] - pos[j, 0]
            dc = pos[i, 1] - pos[j, 1]
            s2 = dr * dr + dc * dc
            c2 = 0.0
            for t in range(3):
                x = col[i, t] - col[j, t]
                c2 += x * x
            kv = w1 * np.exp(-c2 * ca - s2 * cb) + w2 * np.exp(-s2 * cg)
            norm[i] += kv
            norm[j] += kv
            for k in range(c):
                out[i, k] += kv * vals[j, k]
                out[j, k] += kv * vals[i, k]
    return out, norm


def _pairwise_numpy(col, pos, vals, w1, w2, ca, cb, cg, block=256):
    n = col.shape[0]
    out = np.empty((n, vals.shape[1]))
    norm = np.empty(n)
    for start in range(0, n, block):
        stop = min(n, start + block)
        s2 = ((pos[start:stop, None, :] - pos[None, :, :]) ** 2).sum(-1)
        c2 = ((col[start:stop, None, :] - col[None, :, :]) ** 2).sum(-1)
        k = w1 * np.exp(-c2 * ca - s2 * cb) + w2 * np.exp(-s2 * cg)
        k[np.arange(stop - start), np.arange(start, stop)] = 0.0
        out[start:stop] = k @ vals
        norm[start:stop] = k.sum(axis=1)
    return out, norm


def _pairwise(col, pos, vals, w1, w2, ca, cb, cg, use_numba=None):
    use_numba = _accel.NUMBA_ENABLED if use_numba is None else use_numba
    fn = _pairwise_numba if use_numba else _pairwise_numpy
    return fn(col, pos, np.ascontiguousarray(vals), float(w1), float(w2), float(ca), float(cb), float(cg))


def filter_exact(params: KernelParams, feat: FeatureImage, p):
    """Return ``(sum_{j!=i} k(i,j) p_j, sum_{j!=i} k(i,j))`` by direct summation."""
    p = _check_grid(feat, p)
    h, w, kk = p.shape
    out, norm = _pairwise(
        feat.colors(),
        feat.positions(),
        p.reshape(-1, kk),
        params.w1,
        params.w2,
        0.5 / params.theta_alpha**2,
        0.5 / params.beta**2,
        0.5 / params.gamma**2,
    )
    return out.reshape(h, w, kk), norm.reshape(h, w)


# ---------------------------------------------------------------------------
# fast filtering
# ---------------------------------------------------------------------------


def _gauss_1d(n: int, sigma: float) -> np.ndarray:
    i = np.arange(n, dtype=np.float64)
    return np.exp(-((i[:, None] - i[None, :]) ** 2) / (2 * sigma**2))


class FastFilterPlan:
    """Per-image precomputation for ``filter_fast``.

    Bilateral term: the lattice estimates the kernel-weighted *mean* (ratio of
    two lattice outputs), which is rescaled by the exact bilateral normaliser
    computed once here.  Spatial term: exact separable Gaussian convolution.
    The self-contribution ``(w1 + w2) p_i`` is subtracted at the end.
    """

    def __init__(self, params: KernelParams, feat: FeatureImage):
        self.params = params
        self.shape = feat.shape
        h, w = feat.shape
        n = feat.npix
        col, pos = feat.colors(), feat.positions()
        self.lattice = None
        if params.w1 > 0:
            f5 = np.concatenate([col / params.theta_alpha, pos / params.beta], axis=1)
            self.lattice = Lattice(f5)
            _, n1 = _pairwise(col, pos, np.zeros((n, 1)), 1.0, 0.0, 0.5 / params.theta_alpha**2, 0.5 / params.beta**2, 1.0)
            self.norm1 = n1 + 1.0  # bilateral normaliser including j = i
            self.lat1 = self.lattice.apply(np.ones(n))
            self.ratio_scale = self.norm1 / self.lat1
        else:
            self.norm1 = np.ones(n)
        self.g_rows = _gauss_1d(h, params.gamma)
        self.g_cols = _gauss_1d(w, params.gamma)
        norm2 = np.outer(self.g_rows.sum(1), self.g_cols.sum(1)).ravel()
        self.normalizer = (params.w1 * (self.norm1 - 1.0) + params.w2 * (norm2 - 1.0)).reshape(h, w)

    def _spatial(self, p):
        return np.einsum("ab,bwk,cw->ack", self.g_rows, p, self.g_cols, optimize=True)

    def apply(self, p) -> np.ndarray:
        h, w, kk = p.shape
        prm = self.params
        out = prm.w2 * (self._spatial(p) - p)
        if self.lattice is not None:
            flat = p.reshape(-1, kk)
            full1 = self.ratio_scale[:, None] * self.lattice.apply(flat)
            out += prm.w1 * (full1 - flat).reshape(h, w, kk)
        return out

    def adjoint(self, v) -> np.ndarray:
        """Transpose of ``apply`` (needed when differentiating through the filter)."""
        h, w, kk = v.shape
        prm = self.params
        out = prm.w2 * (self._spatial(v) - v)
        if self.lattice is not None:
            flat = v.reshape(-1, kk)
            back = self.lattice.apply(self.ratio_scale[:, None] * flat, transpose=True)
            out += prm.w1 * (back - flat).reshape(h, w, kk)
        return out


def fast_plan(params: KernelParams, feat: FeatureImage) -> FastFilterPlan:
    key = ("fast", params)
    plan = feat._cache.get(key)
    if plan is None:
        plan = FastFilterPlan(params, feat)
        feat._cache[key] = plan
    return plan


def filter_fast(params: KernelParams, feat: FeatureImage, p):
    """Lattice-based approximation of ``filter_exact`` (same return contract)."""
    p = _check_grid(feat, p)
    plan = fast_plan(params, feat)
    return plan.apply(p), plan.normalizer.copy()


class ExactFilter:
    """``filter_exact`` wrapped as an operator with the same interface as the plan."""

    def __init__(self, params: KernelParams, feat: FeatureImage):
        self.params = params
        self.feat = feat
        self._normalizer = None

    @property
    def normalizer(self) -> np.ndarray:
        if self._normalizer is None:
            h, w = self.feat.shape
            _, self._normalizer = filter_exact(self.params, self.feat, np.zeros((h, w, 1)))
        return self._normalizer

    def apply(self, p) -> np.ndarray:
        out, norm = filter_exact(self.params, self.feat, p)
        self._normalizer = norm
        return out

    adjoint = apply  # the exact kernel is symmetric


def make_filter(params: KernelParams, feat: FeatureImage, method: str = "exact"):
    if method == "exact":
        return ExactFilter(params, feat)
    if method == "fast":
        return fast_plan(params, feat)
    raise InvalidInputError(f"unknown filter method {method!r}")
