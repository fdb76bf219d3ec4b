"""Mean-field inference for the dense pairwise CRF, plus exact enumeration oracles.

The CRF over a label field ``z`` has energy

    E(z) = sum_i phi_i(z_i) + sum_{i<j} phi_ij(z_i, z_j)

with pairwise term either the Potts disagreement ``k_ij 1(z_i != z_j)`` or the
agreement reward ``-k_ij 1(z_i == z_j)``.  A synchronous mean-field step is

    q_i(z) ∝ exp(-phi_i(z) - sum_{j != i} E_{z_j ~ q_j} phi_ij(z, z_j)).

With zero unaries and the agreement reward this is the fixed-point condition
``q_i(l) = exp(sum_{j != i} k_ij q_j(l)) / Z_i`` that mean-field solutions of
the CRF prior satisfy.  ``normalized=True`` swaps ``k`` for the per-pixel
normalised kernel (rows sum to ``params.exp_scale``); that kernel is not
symmetric, so the exact joint distribution is only defined without it.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .distributions import InvalidInputError, as_grid, floor_distribution, softmax_grid
from .kernels import FeatureImage, KernelParams, kernel_matrix, make_filter

MAX_ENUMERATION = 2**20


class PotentialForm(str, Enum):
    POTTS = "potts"  # k 1(z_i != z_j)
    AGREE = "agree"  # -k 1(z_i == z_j)

    @classmethod
    def parse(cls, value) -> "PotentialForm":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise InvalidInputError(f"unknown potential form {value!r}") from None


@dataclass(frozen=True, eq=False)
class PairwiseCrf:
    """Unary energies ``(H, W, K)`` in nats plus a bilateral pairwise kernel."""

    unary: np.ndarray
    params: KernelParams
    feat: FeatureImage
    form: PotentialForm = PotentialForm.AGREE
    normalized: bool = False
    method: str = "exact"

    def __post_init__(self):
        u = as_grid(self.unary, "unary")
        if u.shape[:2] != self.feat.shape:
            raise InvalidInputError(f"unary shape {u.shape} does not match image {self.feat.shape}")
        u = u.copy()
        u.flags.writeable = False
        object.__setattr__(self, "unary", u)
        object.__setattr__(self, "form", PotentialForm.parse(self.form))

    @property
    def num_labels(self) -> int:
        return self.unary.shape[2]

    @classmethod
    def prior(cls, params, feat, num_labels, normalized=False, method="exact") -> "PairwiseCrf":
        """The CRF prior: no unaries, agreement reward."""
        h, w = feat.shape
        return cls(np.zeros((h, w, num_labels)), params, feat, PotentialForm.AGREE, normalized, method)

    def operator(self):
        return make_filter(self.params, self.feat, self.method)


def _pairwise_expectation(crf: PairwiseCrf, q: np.ndarray) -> np.ndarray:
    """``sum_{j != i} E_{q_j} phi_ij(z, z_j)`` for every pixel and label ``z``."""
    op = crf.operator()
    filtered = op.apply(q)  # sum_j k_ij q_j(z)
    norm = op.normalizer[..., None]  # sum_j k_ij
    if crf.normalized:
        if np.any(norm <= 0):
            raise InvalidInputError("normalised kernel needs a positive normaliser at every pixel")
        scale = crf.params.exp_scale / norm
        filtered = filtered * scale
        norm = np.full_like(norm, crf.params.exp_scale)
    if crf.form is PotentialForm.POTTS:
        # E[k 1(z != z_j)] = k (1 - q_j(z))
        return norm - filtered
    return -filtered


def meanfield_step(crf: PairwiseCrf, q) -> np.ndarray:
    """One synchronous mean-field update of every pixel."""
    q = as_grid(q, "q")
    if q.shape != crf.unary.shape:
        raise InvalidInputError(f"q shape {q.shape} does not match CRF {crf.unary.shape}")
    return softmax_grid(-crf.unary - _pairwise_expectation(crf, q))


def uniform_grid(shape) -> np.ndarray:
    h, w, k = shape
    return np.full((h, w, k), 1.0 / k)


def meanfield_fixed_point(crf: PairwiseCrf, init=None, max_iters: int = 200, tol: float = 1e-10, damping: float = 0.5):
    """Iterate ``q <- (1 - damping) step(q) + damping q`` until the max change is below ``tol``.

    Returns ``(q, iterations, residual)``; hitting ``max_iters`` is not an error.
    """
    if not 0.0 <= damping < 1.0:
        raise InvalidInputError("damping must lie in [0, 1)")
    q = uniform_grid(crf.unary.shape) if init is None else as_grid(init, "init").copy()
    residual = np.inf
    it = 0
    for it in range(1, max_iters + 1):
        new = (1.0 - damping) * meanfield_step(crf, q) + damping * q
        residual = float(np.max(np.abs(new - q)))
        q = new
        if residual < tol:
            break
    return q, it, residual


def fixed_point_residual(crf: PairwiseCrf, q) -> float:
    """Max per-entry gap between ``q`` and its undamped update."""
    q = as_grid(q, "q")
    return float(np.max(np.abs(meanfield_step(crf, q) - q)))


# ---------------------------------------------------------------------------
# exact enumeration (tiny grids)
# ---------------------------------------------------------------------------


def _check_enumerable(crf: PairwiseCrf) -> tuple[int, int]:
    n = crf.feat.npix
    k = crf.num_labels
    if float(k) ** n > MAX_ENUMERATION:
        raise InvalidInputError(f"{k}^{n} label fields exceed the enumeration limit {MAX_ENUMERATION}")
    if crf.normalized:
        raise InvalidInputError("the normalised kernel is not symmetric; no joint distribution to enumerate")
    return n, k


def _configurations(n: int, k: int, start: int, stop: int) -> np.ndarray:
    idx = np.arange(start, stop, dtype=np.int64)[:, None]
    return (idx // (k ** np.arange(n, dtype=np.int64))[None, :]) % k


def crf_energies(crf: PairwiseCrf, chunk: int = 1 << 15) -> np.ndarray:
    """Energy of every label field, indexed by ``sum_i z_i K^i`` (flat pixel order)."""
    n, k = _check_enumerable(crf)
    kmat = kernel_matrix(crf.params, crf.feat)
    upper = np.triu(kmat, 1)
    unary = crf.unary.reshape(n, k)
    total = k**n
    out = np.empty(total)
    for start in range(0, total, chunk):
        z = _configurations(n, k, start, min(total, start + chunk))
        e = unary[np.arange(n)[None, :], z].sum(axis=1)
        same = z[:, :, None] == z[:, None, :]
        agree = np.einsum("mij,ij->m", same, upper)
        if crf.form is PotentialForm.POTTS:
            e += upper.sum() - agree
        else:
            e -= agree
        out[start : start + z.shape[0]] = e
    return out


def exact_crf_distribution(crf: PairwiseCrf) -> np.ndarray:
    """Probability of every label field, indexed by ``sum_i z_i K^i``."""
    e = crf_energies(crf)
    logp = -e - np.max(-e)
    p = np.exp(logp)
    return p / p.sum()


def exact_marginals(crf: PairwiseCrf, table=None) -> np.ndarray:
    n, k = _check_enumerable(crf)
    p = exact_crf_distribution(crf) if table is None else np.asarray(table)
    z = _configurations(n, k, 0, k**n)
    out = np.zeros((n, k))
    for i in range(n):
        out[i] = np.bincount(z[:, i], weights=p, minlength=k)
    h, w = crf.feat.shape
    return out.reshape(h, w, k)


def factorized_log_table(q) -> np.ndarray:
    """``log Q(z)`` for a factorised ``Q`` over every label field."""
    q = floor_distribution(as_grid(q, "q"))
    h, w, k = q.shape
    n = h * w
    logq = np.log(q.reshape(n, k))
    z = _configurations(n, k, 0, k**n)
    return logq[np.arange(n)[None, :], z].sum(axis=1)


def factorized_kl(q, table) -> float:
    """``KL(Q || P)`` with ``Q = prod_i q_i`` and ``P`` an enumerated table."""
    logq = factorized_log_table(q)
    p = np.asarray(table, dtype=np.float64)
    qz = np.exp(logq)
    return float(np.sum(qz * (logq - np.log(np.maximum(p, 1e-300)))))


def stationarity_gap(crf: PairwiseCrf, q, h: float = 1e-6) -> np.ndarray:
    """Per-pixel spread over labels of ``dKL/dQ_i(z) - (log Q_i(z) - sum_j k_ij Q_j(z))``.

    ``KL(Q || P)`` is differentiated by central differences in the unnormalised
    factor entries ``Q_i(z)``; for the prior CRF (zero unaries, agreement
    reward) the derivative is ``1 + log Q_i(z) - sum_{j != i} k_ij Q_j(z)`` plus
    a constant per pixel, so the returned spreads vanish up to FD error.
    """
    if crf.form is not PotentialForm.AGREE:
        raise InvalidInputError("stationarity identity is stated for the agreement reward")
    n, k = _check_enumerable(crf)
    q = as_grid(q, "q")
    qf = q.reshape(n, k)
    logp = np.log(np.maximum(exact_crf_distribution(crf), 1e-300))
    z = _configurations(n, k, 0, k**n)
    rows = np.arange(n)[None, :]

    def kl(flat):
        prod = np.prod(flat[rows, z], axis=1)
        logq = np.log(flat)[rows, z].sum(axis=1)
        return float(np.sum(prod * (logq - logp)))

    grad = np.empty((n, k))
    for i in range(n):
        for a in range(k):
            up = qf.copy()
            dn = qf.copy()
            up[i, a] += h
            dn[i, a] -= h
            grad[i, a] = (kl(up) - kl(dn)) / (2 * h)
    kmat = kernel_matrix(crf.params, crf.feat)
    predicted = np.log(qf) - kmat @ qf + crf.unary.reshape(n, k)
    diff = grad - predicted
    return diff.max(axis=1) - diff.min(axis=1)


# ---------------------------------------------------------------------------
# Potts / agreement equivalence
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EquivalenceReport:
    max_diff: float
    potts: np.ndarray
    agree: np.ndarray
    normalized: bool


def potential_equivalence_check(params: KernelParams, feat: FeatureImage, q, unary=None, normalized: bool = True, method: str = "exact") -> EquivalenceReport:
    """Compare one mean-field update under the Potts and agreement forms from the same ``q``."""
    q = as_grid(q, "q")
    u = np.zeros_like(q) if unary is None else unary
    potts = meanfield_step(PairwiseCrf(u, params, feat, PotentialForm.POTTS, normalized, method), q)
    agree = meanfield_step(PairwiseCrf(u, params, feat, PotentialForm.AGREE, normalized, method), q)
    return EquivalenceReport(float(np.max(np.abs(potts - agree))), potts, agree, normalized)


def search_unnormalized_counterexample(trials: int = 50, seed: int = 0, size: int = 6, num_labels: int = 3) -> EquivalenceReport:
    """Largest Potts-vs-agreement update gap found over random unnormalised instances.

    Varies kernel weights, colours, unaries and ``q``.  Note that the two forms
    differ by ``sum_j k_ij``, a per-pixel constant that the per-pixel softmax
    removes, so the gap found is at rounding level.
    """
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(trials):
        params = KernelParams(
            w1=float(rng.uniform(0.1, 50)),
            w2=float(rng.uniform(0.1, 50)),
            theta_alpha=float(rng.uniform(2, 60)),
            theta_beta=float(rng.uniform(0.5, 10)),
            theta_gamma=float(rng.uniform(0.5, 10)),
        )
        feat = FeatureImage(rng.uniform(0, 255, (size, size, 3)))
        q = rng.dirichlet(np.ones(num_labels), (size, size))
        unary = rng.normal(0, 2, (size, size, num_labels))
        report = potential_equivalence_check(params, feat, q, unary=unary, normalized=False)
        if best is None or report.max_diff > best.max_diff:
            best = report
    return best


def refine_with_meanfield(logits, params: KernelParams, feat: FeatureImage, iters: int, method: str = "exact") -> np.ndarray:
    """Dense-CRF post-processing: model softmax as unary, normalised Potts pairwise term.

    Starts from the softmax and applies ``iters`` undamped mean-field steps.
    """
    logits = as_grid(logits, "logits")
    if iters < 0:
        raise InvalidInputError("iteration count must be nonnegative")
    q = softmax_grid(logits)
    if iters == 0:
        return q
    crf = PairwiseCrf(-np.log(floor_distribution(q)), params, feat, PotentialForm.POTTS, normalized=True, method=method)
    for _ in range(iters):
        q = meanfield_step(crf, q)
    return q
