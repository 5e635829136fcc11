"""Rank correlation: Kendall's tau-b and Spearman's rho with tie handling.

The fast paths are O(n log n); the ``*_naive`` functions enumerate all pairs
and exist to cross-check them in tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInputError, ValidationError

KENDALL_VARIANT = "tau-b"


@dataclass(frozen=True)
class PairedSample:
    x: np.ndarray
    y: np.ndarray

    @classmethod
    def of(cls, x, y) -> "PairedSample":
        x = np.asarray(x, dtype=np.float64).ravel()
        y = np.asarray(y, dtype=np.float64).ravel()
        if x.shape != y.shape:
            raise ValidationError(f"paired sample lengths differ: {x.size} vs {y.size}")
        if x.size < 2:
            raise ValidationError(f"paired sample needs at least 2 points, got {x.size}")
        if np.isnan(x).any() or np.isnan(y).any():
            raise ValidationError("paired sample contains NaN")
        return cls(x, y)


def _tied_pairs(sorted_values) -> int:
    """Number of tied pairs in an already sorted array."""
    if sorted_values.size == 0:
        return 0
    change = np.flatnonzero(np.diff(sorted_values)) + 1
    runs = np.diff(np.concatenate(([0], change, [sorted_values.size])))
    return int((runs * (runs - 1) // 2).sum())


def _count_inversions(seq) -> int:
    """Inversions (i < j, seq[i] > seq[j]) by bottom-up merge sort."""
    a = list(seq)
    n = len(a)
    buf = [0] * n
    inversions = 0
    width = 1
    while width < n:
        for lo in range(0, n, 2 * width):
            mid = min(lo + width, n)
            hi = min(lo + 2 * width, n)
            i, j, k = lo, mid, lo
            while i < mid and j < hi:
                if a[j] < a[i]:
                    buf[k] = a[j]
                    inversions += mid - i
                    j += 1
                else:
                    buf[k] = a[i]
                    i += 1
                k += 1
            buf[k:k + mid - i] = a[i:mid]
            k += mid - i
            buf[k:k + hi - j] = a[j:hi]
        a, buf = buf, a
        width *= 2
    return inversions


def _tau_b(n, tx, ty, txy, discordant):
    n0 = n * (n - 1) // 2
    if tx == n0 or ty == n0:
        raise DegenerateInputError("Kendall tau undefined: every value in one vector is tied")
    concordant_minus_discordant = n0 - tx - ty + txy - 2 * discordant
    tau = concordant_minus_discordant / math.sqrt((n0 - tx) * (n0 - ty))
    return min(1.0, max(-1.0, tau))


def kendall_tau(x, y) -> float:
    """Kendall's tau-b, O(n log n) (Knight's algorithm).

    Raises DegenerateInputError when either vector is entirely tied.
    """
    s = PairedSample.of(x, y)
    n = s.x.size
    order = np.lexsort((s.y, s.x))
    xs, ys = s.x[order], s.y[order]
    tx = _tied_pairs(xs)
    # pairs tied in both x and y
    same_x = np.concatenate(([True], xs[1:] != xs[:-1]))
    same_xy = same_x | np.concatenate(([True], ys[1:] != ys[:-1]))
    run_starts = np.flatnonzero(same_xy)
    runs = np.diff(np.concatenate((run_starts, [n])))
    txy = int((runs * (runs - 1) // 2).sum())
    # y ranks as dense integers so the merge sort compares ints
    y_rank = np.unique(ys, return_inverse=True)[1].tolist()
    discordant = _count_inversions(y_rank)
    ty = _tied_pairs(np.sort(s.y))
    return _tau_b(n, tx, ty, txy, discordant)


def kendall_tau_naive(x, y) -> float:
    """O(n^2) tau-b from explicit pair signs."""
    s = PairedSample.of(x, y)
    n = s.x.size
    iu = np.triu_indices(n, k=1)
    dx = np.sign(np.subtract.outer(s.x, s.x)[iu])
    dy = np.sign(np.subtract.outer(s.y, s.y)[iu])
    n0 = n * (n - 1) // 2
    tx = int((dx == 0).sum())
    ty = int((dy == 0).sum())
    if tx == n0 or ty == n0:
        raise DegenerateInputError("Kendall tau undefined: every value in one vector is tied")
    prod = dx * dy
    s_cd = int((prod > 0).sum()) - int((prod < 0).sum())
    return s_cd / math.sqrt((n0 - tx) * (n0 - ty))


def average_ranks(values) -> np.ndarray:
    """1-based ranks; tied values share the mean of their positions."""
    v = np.asarray(values, dtype=np.float64)
    order = np.argsort(v, kind="mergesort")
    sv = v[order]
    starts = np.flatnonzero(np.concatenate(([True], sv[1:] != sv[:-1])))
    ends = np.concatenate((starts[1:], [v.size]))
    mean_rank = (starts + ends + 1) / 2.0
    ranks = np.empty(v.size)
    ranks[order] = np.repeat(mean_rank, ends - starts)
    return ranks


def _pearson(a, b, what):
    da = a - a.mean()
    db = b - b.mean()
    sa = float(np.dot(da, da))
    sb = float(np.dot(db, db))
    if sa == 0.0 or sb == 0.0:
        raise DegenerateInputError(f"{what} undefined: zero rank variance")
    r = float(np.dot(da, db)) / math.sqrt(sa * sb)
    return min(1.0, max(-1.0, r))


def spearman_rho(x, y) -> float:
    """Pearson correlation of average ranks."""
    s = PairedSample.of(x, y)
    return _pearson(average_ranks(s.x), average_ranks(s.y), "Spearman rho")


def _ranks_naive(v):
    # rank_i = #{j: v_j < v_i} + (#{j: v_j == v_i} + 1) / 2
    below = (v[None, :] < v[:, None]).sum(axis=1)
    tied = (v[None, :] == v[:, None]).sum(axis=1)
    return (below + (tied + 1) / 2.0).tolist()


def spearman_rho_naive(x, y) -> float:
    """Ranks by pairwise counting, then the textbook Pearson sums."""
    s = PairedSample.of(x, y)
    rx = _ranks_naive(s.x)
    ry = _ranks_naive(s.y)
    n = len(rx)
    mx = sum(rx) / n
    my = sum(ry) / n
    sxy = sum((a - mx) * (b - my) for a, b in zip(rx, ry))
    sxx = sum((a - mx) ** 2 for a in rx)
    syy = sum((b - my) ** 2 for b in ry)
    if sxx == 0 or syy == 0:
        raise DegenerateInputError("Spearman rho undefined: zero rank variance")
    return sxy / math.sqrt(sxx * syy)
