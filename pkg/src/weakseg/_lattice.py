"""Permutohedral lattice for high-dimensional Gaussian filtering.

Splat / blur / slice in the style of Adams, Baek & Davis (2010).  Only the
vertices touched by splatting are stored, so the lattice response is a biased
estimate of the Gaussian sum; callers use it through ratios (see
``kernels.FastFilterPlan``), where most of the bias cancels.

Vertex keys are packed into one int64 per vertex (mixed radix with a margin),
which turns the "neighbour along lattice direction j" lookup into a constant
code offset.
"""

from __future__ import annotations

import numpy as np

from . import _accel
from ._accel import njit


def _scales(d: int) -> np.ndarray:
    i = np.arange(d, dtype=np.float64)
    return np.sqrt(2.0 / 3.0) * (d + 1) / np.sqrt((i + 1.0) * (i + 2.0))


def _canonical(d: int) -> np.ndarray:
    d1 = d + 1
    i = np.arange(d1)[:, None]
    j = np.arange(d1)[None, :]
    return np.where(j <= d - i, i, i - d1).astype(np.int64)


# ---------------------------------------------------------------------------
# embedding: position -> enclosing simplex + barycentric weights
# ---------------------------------------------------------------------------


@njit
def _embed_numba(feat, scale, canonical):
    n, d = feat.shape
    d1 = d + 1
    keys = np.empty((n, d1, d), np.int64)
    bary_out = np.empty((n, d1))
    elevated = np.empty(d1)
    rem0 = np.empty(d1, np.int64)
    rank = np.empty(d1, np.int64)
    bary = np.empty(d1 + 1)
    for p in range(n):
        sm = 0.0
        for j in range(d, 0, -1):
            cf = feat[p, j - 1] * scale[j - 1]
            elevated[j] = sm - j * cf
            sm += cf
        elevated[0] = sm
        s = 0
        for i in range(d1):
            v = elevated[i] / d1
            up = np.ceil(v) * d1
            down = np.floor(v) * d1
            if up - elevated[i] < elevated[i] - down:
                rem0[i] = np.int64(up)
            else:
                rem0[i] = np.int64(down)
            s += rem0[i]
        s //= d1
        for i in range(d1):
            rank[i] = 0
        for i in range(d):
            for j in range(i + 1, d1):
                if elevated[i] - rem0[i] < elevated[j] - rem0[j]:
                    rank[i] += 1
                else:
                    rank[j] += 1
        if s > 0:
            for i in range(d1):
                if rank[i] >= d1 - s:
                    rem0[i] -= d1
                    rank[i] += s - d1
                else:
                    rank[i] += s
        elif s < 0:
            for i in range(d1):
                if rank[i] < -s:
                    rem0[i] += d1
                    rank[i] += d1 + s
                else:
                    rank[i] += s
        for i in range(d1 + 1):
            bary[i] = 0.0
        for i in range(d1):
            v = (elevated[i] - rem0[i]) / d1
            bary[d - rank[i]] += v
            bary[d1 - rank[i]] -= v
        bary[0] += 1.0 + bary[d1]
        for r in range(d1):
            for i in range(d):
                keys[p, r, i] = rem0[i] + canonical[r, rank[i]]
            bary_out[p, r] = bary[r]
    return keys, bary_out


def _embed_numpy(feat, scale, canonical):
    n, d = feat.shape
    d1 = d + 1
    c = feat * scale
    tail = np.zeros((n, d1))
    tail[:, :d] = np.cumsum(c[:, ::-1], axis=1)[:, ::-1]
    elevated = np.empty((n, d1))
    elevated[:, 0] = tail[:, 0]
    j = np.arange(1, d1)
    elevated[:, 1:] = tail[:, 1:] - j * c
    v = elevated / d1
    up = np.ceil(v) * d1
    down = np.floor(v) * d1
    rem0 = np.where(up - elevated < elevated - down, up, down).astype(np.int64)
    s = rem0.sum(axis=1) // d1
    diff = elevated - rem0
    order = np.argsort(-diff, axis=1, kind="stable")
    rank = np.empty((n, d1), np.int64)
    np.put_along_axis(rank, order, np.broadcast_to(np.arange(d1), (n, d1)), axis=1)
    sp = s[:, None]
    pos = (sp > 0) & (rank >= d1 - sp)
    neg = (sp < 0) & (rank < -sp)
    rem0 = rem0 - d1 * pos + d1 * neg
    rank = rank + sp - d1 * pos + d1 * neg
    w = (elevated - rem0) / d1
    bary = np.zeros((n, d1 + 1))
    rows = np.repeat(np.arange(n), d1)
    np.add.at(bary, (rows, (d - rank).ravel()), w.ravel())
    np.add.at(bary, (rows, (d1 - rank).ravel()), -w.ravel())
    bary[:, 0] += 1.0 + bary[:, d1]
    keys = np.empty((n, d1, d), np.int64)
    for r in range(d1):
        keys[:, r, :] = rem0[:, :d] + canonical[r][rank[:, :d]]
    return keys, bary[:, :d1].copy()


def _encoding(keys):
    """Mixed-radix strides for packing keys, and per-direction code offsets."""
    d = keys.shape[-1]
    margin = d + 1
    flat = keys.reshape(-1, d)
    lo = flat.min(axis=0) - margin
    hi = flat.max(axis=0) + margin
    span = (hi - lo + 1).astype(np.int64)
    if np.sum(np.log2(span.astype(np.float64))) > 62:
        raise OverflowError("lattice key range too large to pack into int64")
    stride = np.concatenate([[1], np.cumprod(span[:-1])]).astype(np.int64)
    tot = stride.sum()
    delta = np.empty(d + 1, np.int64)
    delta[:d] = tot - stride * (d + 1)
    delta[d] = tot
    return lo, stride, delta


# ---------------------------------------------------------------------------
# vertex table
# ---------------------------------------------------------------------------


@njit
def _hash_slot(code, mask):
    x = code ^ (code >> 31)
    x = x * 7046029254386353131
    x = x ^ (x >> 29)
    return x & mask


@njit
def _lookup(table, codes, code):
    mask = table.shape[0] - 1
    h = _hash_slot(code, mask)
    while True:
        e = table[h]
        if e == -1:
            return -1
        if codes[e] == code:
            return e
        h = (h + 1) & mask


@njit
def _build_numba(keys, lo, stride, delta):
    n, d1, d = keys.shape
    cap = 64
    while cap < 2 * n * d1:
        cap *= 2
    table = -np.ones(cap, np.int64)
    codes = np.empty(n * d1, np.int64)
    mask = cap - 1
    count = 0
    offsets = np.empty((n, d1), np.int32)
    for p in range(n):
        for r in range(d1):
            c = 0
            for i in range(d):
                c += (keys[p, r, i] - lo[i]) * stride[i]
            h = _hash_slot(c, mask)
            while True:
                e = table[h]
                if e == -1:
                    table[h] = count
                    codes[count] = c
                    e = count
                    count += 1
                    break
                if codes[e] == c:
                    break
                h = (h + 1) & mask
            offsets[p, r] = e
    nbr = np.empty((d1, count, 2), np.int32)
    for j in range(d1):
        for v in range(count):
            nbr[j, v, 0] = _lookup(table, codes, codes[v] - delta[j])
            nbr[j, v, 1] = _lookup(table, codes, codes[v] + delta[j])
    return offsets, nbr


def _build_numpy(keys, lo, stride, delta):
    n, d1, d = keys.shape
    codes = ((keys - lo) * stride).sum(axis=-1).ravel()
    uniq, inv = np.unique(codes, return_inverse=True)
    offsets = inv.reshape(n, d1).astype(np.int32)
    nv = uniq.shape[0]
    nbr = np.empty((d1, nv, 2), np.int32)
    for j in range(d1):
        for side, sgn in enumerate((-1, 1)):
            target = uniq + sgn * delta[j]
            idx = np.searchsorted(uniq, target)
            idx_c = np.minimum(idx, nv - 1)
            hit = (idx < nv) & (uniq[idx_c] == target)
            nbr[j, :, side] = np.where(hit, idx_c, -1)
    return offsets, nbr


# ---------------------------------------------------------------------------
# splat / blur / slice
# ---------------------------------------------------------------------------


@njit
def _apply_numba(offsets, bary, nbr, vals, order):
    n, d1 = offsets.shape
    nv = nbr.shape[1]
    c = vals.shape[1]
    lat = np.zeros((nv, c))
    for p in range(n):
        for r in range(d1):
            w = bary[p, r]
            e = offsets[p, r]
            for k in range(c):
                lat[e, k] += w * vals[p, k]
    tmp = np.empty_like(lat)
    for j in order:
        for v in range(nv):
            a = nbr[j, v, 0]
            b = nbr[j, v, 1]
            for k in range(c):
                acc = lat[v, k]
                if a >= 0:
                    acc += 0.5 * lat[a, k]
                if b >= 0:
                    acc += 0.5 * lat[b, k]
                tmp[v, k] = acc
        lat, tmp = tmp, lat
    out = np.zeros((n, c))
    for p in range(n):
        for r in range(d1):
            w = bary[p, r]
            e = offsets[p, r]
            for k in range(c):
                out[p, k] += w * lat[e, k]
    return out


def _apply_numpy(offsets, bary, nbr, vals, order):
    n, d1 = offsets.shape
    nv = nbr.shape[1]
    c = vals.shape[1]
    contrib = (bary[:, :, None] * vals[:, None, :]).reshape(-1, c)
    flat = offsets.ravel()
    lat = np.zeros((nv + 1, c))
    for k in range(c):
        lat[:nv, k] = np.bincount(flat, weights=contrib[:, k], minlength=nv)
    for j in order:
        a = np.where(nbr[j, :, 0] >= 0, nbr[j, :, 0], nv)
        b = np.where(nbr[j, :, 1] >= 0, nbr[j, :, 1], nv)
        new = np.zeros_like(lat)
        new[:nv] = lat[:nv] + 0.5 * (lat[a] + lat[b])
        lat = new
    return np.einsum("pr,prk->pk", bary, lat[offsets])


class Lattice:
    """Gaussian lattice over fixed positions (rows of ``feat``, in std-dev units)."""

    def __init__(self, feat, use_numba: bool | None = None):
        feat = np.ascontiguousarray(feat, dtype=np.float64)
        if feat.ndim != 2 or feat.shape[0] == 0:
            raise ValueError("lattice features must be a non-empty (n, d) array")
        self.use_numba = _accel.NUMBA_ENABLED if use_numba is None else use_numba
        d = feat.shape[1]
        scale, canonical = _scales(d), _canonical(d)
        embed = _embed_numba if self.use_numba else _embed_numpy
        keys, self.bary = embed(feat, scale, canonical)
        lo, stride, delta = _encoding(keys)
        build = _build_numba if self.use_numba else _build_numpy
        self.offsets, self.nbr = build(keys, lo, stride, delta)
        self.n = feat.shape[0]

    @property
    def num_vertices(self) -> int:
        return self.nbr.shape[1]

    def apply(self, vals, transpose: bool = False) -> np.ndarray:
        """Splat, blur along each lattice axis, slice.

        The axis blurs do not commute on a sparse lattice, so the operator is
        not exactly symmetric; ``transpose=True`` applies its transpose by
        blurring the axes in reverse order.
        """
        vals = np.ascontiguousarray(vals, dtype=np.float64)
        squeeze = vals.ndim == 1
        if squeeze:
            vals = vals[:, None]
        fn = _apply_numba if self.use_numba else _apply_numpy
        order = np.arange(self.nbr.shape[0], dtype=np.int64)
        out = fn(self.offsets, self.bary, self.nbr, vals, order[::-1].copy() if transpose else order)
        return out[:, 0] if squeeze else out
