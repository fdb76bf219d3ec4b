"""Adaptive image-level prior and the auxiliary pixel labels it induces.

For an image with present labels ``y`` the prior puts weight ``beta_l`` on each
``l`` in ``y`` (zero elsewhere).  Coupling it with the network output gives

    q_aux_j(l) = p_j(l) beta_l / sum_l' p_j(l') beta_l'

and ``beta`` is the maximum-entropy point whose induced mean masses
``mean_j q_aux_j(l)`` clear per-label floors ``c_l``.  With one foreground label
this is a one-dimensional problem solved on a grid; several foreground labels
are handled by pairwise coordinate descent on the same grid, finished with a
local SQP refinement.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from . import _accel
from ._accel import njit
from .distributions import InvalidInputError, LabelSet, as_grid, floor_distribution

DEFAULT_GRID_SIZE = 1001


@dataclass(frozen=True)
class PriorConstraints:
    """Minimum mean mass per present label (background default 0.4, objects 0.2)."""

    c_background: float = 0.4
    c_foreground: float = 0.2
    overrides: dict = field(default_factory=dict)

    def for_labels(self, labels: LabelSet) -> np.ndarray:
        c = np.array(
            [self.overrides.get(l, self.c_background if l == 0 else self.c_foreground) for l in labels.present],
            dtype=np.float64,
        )
        if np.any(c < 0) or np.any(c > 1):
            raise InvalidInputError("mass floors must lie in [0, 1]")
        if c.sum() > 1 + 1e-12:
            raise InvalidInputError(f"mass floors sum to {c.sum():.3f} > 1 for labels {labels.present}")
        return c


@dataclass(frozen=True)
class PriorSolution:
    beta: np.ndarray  # length num_classes, zero on absent labels
    feasible: bool
    objective: float  # sum beta log beta over present labels
    hinge: float = 0.0
    masses: np.ndarray | None = None  # mean q_aux mass per present label


def neg_entropy(beta) -> float:
    b = np.asarray(beta, dtype=np.float64)
    nz = b[b > 0]
    return float(np.sum(nz * np.log(nz)))


def beta_grid(grid_size: int) -> np.ndarray:
    """``grid_size`` equally spaced points strictly inside (0, 1)."""
    if grid_size < 1:
        raise InvalidInputError("grid_size must be positive")
    return np.arange(1, grid_size + 1, dtype=np.float64) / (grid_size + 1)


def apply_prior(p, beta, labels: LabelSet) -> np.ndarray:
    """Couple per-pixel distributions with the prior (Bayes rule, renormalised)."""
    p = as_grid(p, "p")
    b = np.asarray(beta.beta if isinstance(beta, PriorSolution) else beta, dtype=np.float64)
    if b.shape != (p.shape[-1],):
        if b.shape == (len(labels.present),):
            full = np.zeros(p.shape[-1])
            full[list(labels.present)] = b
            b = full
        else:
            raise InvalidInputError(f"beta has shape {b.shape}, expected ({p.shape[-1]},)")
    if np.any(b < 0):
        raise InvalidInputError("beta must be nonnegative")
    b = np.where(labels.mask(), b, 0.0)
    q = floor_distribution(p) * b
    return q / q.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# grid evaluation of induced masses
# ---------------------------------------------------------------------------


@njit(fastmath=True)
def _pair_masses_numba(pp, beta, a, b, us):
    m, k = pp.shape
    t = beta[a] + beta[b]
    rest = np.zeros(m)
    for j in range(m):
        s = 0.0
        for l in range(k):
            if l != a and l != b:
                s += pp[j, l] * beta[l]
        rest[j] = s
    pa = np.ascontiguousarray(pp[:, a])
    pb = np.ascontiguousarray(pp[:, b])
    out = np.zeros((us.shape[0], k))
    acc = np.empty(k)
    for g in range(us.shape[0]):
        wa = t * us[g]
        wb = t - wa
        sa = 0.0
        sb = 0.0
        for j in range(m):
            inv = 1.0 / (rest[j] + wa * pa[j] + wb * pb[j])
            sa += pa[j] * inv
            sb += pb[j] * inv
        if k > 2:
            for l in range(k):
                acc[l] = 0.0
            for j in range(m):
                inv = 1.0 / (rest[j] + wa * pa[j] + wb * pb[j])
                for l in range(k):
                    if l != a and l != b:
                        acc[l] += pp[j, l] * inv
            for l in range(k):
                out[g, l] = acc[l] * beta[l] / m
        out[g, a] = sa * wa / m
        out[g, b] = sb * wb / m
    return out


def _pair_masses_numpy(pp, beta, a, b, us, block=128):
    m, k = pp.shape
    t = beta[a] + beta[b]
    others = [l for l in range(k) if l not in (a, b)]
    rest = pp[:, others] @ beta[others] if others else np.zeros(m)
    out = np.empty((us.shape[0], k))
    for start in range(0, us.shape[0], block):
        u = us[start : start + block, None]
        wa, wb = t * u, t - t * u
        inv = 1.0 / (rest[None, :] + wa * pp[None, :, a] + wb * pp[None, :, b])
        out[start : start + block] = (inv[:, :, None] * pp[None, :, :]).mean(axis=1) * beta[None, :]
        out[start : start + block, a] = (inv * pp[None, :, a]).mean(axis=1) * wa[:, 0]
        out[start : start + block, b] = (inv * pp[None, :, b]).mean(axis=1) * wb[:, 0]
    return out


def pair_masses(pp, beta, a: int, b: int, us, use_numba=None) -> np.ndarray:
    """Mean induced mass of every present label as ``beta_a : beta_b`` sweeps ``us``.

    ``pp`` holds floored probabilities of the present labels, one row per pixel;
    ``beta_a + beta_b`` is held at its current value and split as ``u, 1 - u``.
    """
    use_numba = _accel.NUMBA_ENABLED if use_numba is None else use_numba
    fn = _pair_masses_numba if use_numba else _pair_masses_numpy
    return fn(
        np.ascontiguousarray(pp, dtype=np.float64),
        np.ascontiguousarray(beta, dtype=np.float64),
        int(a),
        int(b),
        np.ascontiguousarray(us, dtype=np.float64),
    )


def induced_masses(p, beta, labels: LabelSet) -> np.ndarray:
    """Mean q_aux mass of each present label (order of ``labels.present``)."""
    q = apply_prior(p, beta, labels)
    return q.reshape(-1, q.shape[-1])[:, list(labels.present)].mean(axis=0)


def _present_probs(p, labels):
    p = as_grid(p, "p")
    return floor_distribution(p).reshape(-1, p.shape[-1])[:, list(labels.present)]


def _hinge(masses, c):
    return np.clip(c - masses, 0.0, None).sum(axis=-1)


def _solution(labels, beta_present, feasible, masses, c):
    full = np.zeros(labels.num_classes)
    full[list(labels.present)] = beta_present
    return PriorSolution(
        beta=full,
        feasible=bool(feasible),
        objective=neg_entropy(beta_present),
        hinge=float(_hinge(masses, c)),
        masses=np.asarray(masses, dtype=np.float64),
    )


def _two_class_table(p, labels, constraints, grid_size):
    if len(labels.present) != 2:
        raise InvalidInputError("two-class solver needs exactly one foreground label")
    pp = _present_probs(p, labels)
    c = constraints.for_labels(labels)
    us = beta_grid(grid_size)
    # present order is (0, fg): sweep beta_fg = u, beta_0 = 1 - u
    masses = pair_masses(pp, np.array([0.5, 0.5]), 1, 0, us)
    return us, masses, c


def solve_prior_fallback(p, labels: LabelSet, constraints: PriorConstraints, grid_size: int = DEFAULT_GRID_SIZE):
    """Grid point minimising the total constraint shortfall; marked infeasible."""
    us, masses, c = _two_class_table(p, labels, constraints, grid_size)
    k = int(np.argmin(_hinge(masses, c)))
    return _solution(labels, np.array([1 - us[k], us[k]]), False, masses[k], c)


def solve_prior_two_class(p, labels: LabelSet, constraints: PriorConstraints, grid_size: int = DEFAULT_GRID_SIZE):
    """Maximum-entropy feasible foreground weight on a uniform grid over (0, 1)."""
    us, masses, c = _two_class_table(p, labels, constraints, grid_size)
    feasible = np.all(masses >= c, axis=1)
    if not feasible.any():
        k = int(np.argmin(_hinge(masses, c)))
        return _solution(labels, np.array([1 - us[k], us[k]]), False, masses[k], c)
    obj = us * np.log(us) + (1 - us) * np.log(1 - us)
    obj = np.where(feasible, obj, np.inf)
    k = int(np.argmin(obj))
    return _solution(labels, np.array([1 - us[k], us[k]]), True, masses[k], c)


def solve_prior_multi(
    p,
    labels: LabelSet,
    constraints: PriorConstraints,
    grid_size: int = DEFAULT_GRID_SIZE,
    max_sweeps: int = 100,
    tol: float = 1e-8,
    num_starts: int = 4,
):
    """Pairwise coordinate descent over the simplex of present-label weights.

    Each move re-splits the mass of one pair of labels, holding the other
    weights fixed.  Candidates are the grid, a finer grid around the current
    split, and the current split itself.  Feasible points are ranked by
    negative entropy, infeasible ones by total shortfall.  A feasible result is
    then refined locally (also from the best points of a coarse simplex
    lattice) and a refinement is kept only if it stays feasible.
    Experimental beyond one foreground label.
    """
    k = len(labels.present)
    if k == 1:
        c = constraints.for_labels(labels)
        return _solution(labels, np.ones(1), True, np.ones(1), c)
    if k == 2:
        return solve_prior_two_class(p, labels, constraints, grid_size)
    pp = _present_probs(p, labels)
    c = constraints.for_labels(labels)
    grid = beta_grid(grid_size)
    beta = np.full(k, 1.0 / k)

    def score(masses, b):
        h = _hinge(masses, c)
        return (0, neg_entropy(b)) if h <= 0 else (1, float(h))

    masses = pair_masses(pp, beta, 0, 1, np.array([beta[0] / (beta[0] + beta[1])]))[0]
    current = score(masses, beta)
    for _ in range(max_sweeps):
        before = current
        for a, b in itertools.combinations(range(k), 2):
            t = beta[a] + beta[b]
            if t <= 0:
                continue
            u0 = beta[a] / t
            local = np.clip(u0 + (grid - 0.5) * (4.0 / (grid_size + 1)), grid[0] / 4, 1 - grid[0] / 4)
            us = np.concatenate([grid, local, [u0]])
            table = pair_masses(pp, beta, a, b, us)
            hinge = _hinge(table, c)
            ok = hinge <= 0
            if ok.any():
                ba, bb = t * us, t * (1 - us)
                fixed = neg_entropy(np.delete(beta, [a, b]))
                obj = fixed + ba * np.log(ba) + bb * np.log(bb)
                j = int(np.argmin(np.where(ok, obj, np.inf)))
            else:
                j = int(np.argmin(hinge))
            cand = beta.copy()
            cand[a], cand[b] = t * us[j], t * (1 - us[j])
            cand /= cand.sum()
            cand_score = score(table[j], cand)
            if cand_score <= current:
                beta, masses, current = cand, table[j], cand_score
        if before[0] == current[0] and abs(before[1] - current[1]) < tol:
            break
    # The feasible set can be a thin curved sliver with several local optima
    # along its boundary, so also polish from the best feasible points of a
    # coarse simplex lattice.
    starts = [beta] if current[0] == 0 else []
    lattice = _simplex_lattice(k)
    lat_masses = np.stack([_masses(pp, b) for b in lattice])
    ok = np.all(lat_masses >= c, axis=1)
    if ok.any():
        obj = np.where(ok, np.sum(lattice * np.log(lattice), axis=1), np.inf)
        starts += [lattice[j] for j in np.argsort(obj)[: min(int(ok.sum()), num_starts)]]
    for start in starts:
        for cand in (start, _polish(pp, start, c)):
            if cand is None:
                continue
            cm = _masses(pp, cand)
            cs = score(cm, cand)
            if cs < current:
                beta, masses, current = cand, cm, cs
    return _solution(labels, beta, current[0] == 0, masses, c)


def _simplex_lattice(k: int, budget: int = 2000) -> np.ndarray:
    """Points ``parts / n`` with positive integer parts summing to ``n``, for the largest ``n`` within ``budget`` points."""
    n = k
    while math.comb(n, k - 1) <= budget:  # count at resolution n + 1
        n += 1
    cuts = np.array(list(itertools.combinations(range(1, n), k - 1)), dtype=np.float64)
    edges = np.concatenate([np.zeros((len(cuts), 1)), cuts, np.full((len(cuts), 1), float(n))], axis=1)
    return np.diff(edges, axis=1) / n


def _masses(pp, beta):
    w = pp * beta
    return (w / w.sum(axis=1, keepdims=True)).mean(axis=0)


def _polish(pp, beta, c, floor=1e-9):
    """Local SQP refinement from a feasible point.

    Pairwise moves stall where a curved constraint boundary is not aligned
    with any pair direction; a smooth local solve walks along it.  Returns
    ``None`` unless the result is feasible (re-evaluated here).
    """
    from scipy.optimize import minimize

    def masses_jac(b):
        den = pp @ b
        r = pp / den[:, None]
        m = (r * b).mean(axis=0)
        jac = np.diag(r.mean(axis=0)) - (r * b).T @ r / pp.shape[0]
        return m, jac

    cons = [
        {"type": "eq", "fun": lambda b: b.sum() - 1.0, "jac": lambda b: np.ones_like(b)},
        {"type": "ineq", "fun": lambda b: masses_jac(b)[0] - c, "jac": lambda b: masses_jac(b)[1]},
    ]
    res = minimize(
        lambda b: float(np.sum(b * np.log(b))),
        beta,
        jac=lambda b: np.log(b) + 1.0,
        bounds=[(floor, 1.0)] * beta.shape[0],
        constraints=cons,
        method="SLSQP",
        options={"ftol": 1e-12, "maxiter": 200},
    )
    b = np.clip(res.x, floor, None)
    b /= b.sum()
    if not np.all(_masses(pp, b) >= c):
        # nudge back inside along the segment towards the feasible start
        for t in (0.999, 0.99, 0.9):
            trial = t * b + (1 - t) * beta
            if np.all(_masses(pp, trial) >= c):
                return trial
        return None
    return b


def solve_prior(p, labels: LabelSet, constraints: PriorConstraints, grid_size: int = DEFAULT_GRID_SIZE):
    if len(labels.present) == 2:
        return solve_prior_two_class(p, labels, constraints, grid_size)
    return solve_prior_multi(p, labels, constraints, grid_size)
