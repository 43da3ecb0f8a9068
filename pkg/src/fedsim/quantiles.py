"""Federated quantile estimation over bucketized histograms.

Three approaches: a flat histogram at the finest granularity, a hierarchy of
dyadic histograms collected in a single round (one bucket per level per
client), and a multi-round binary search driven by repeated federated
counting queries. Accuracy of a CDF estimate is measured with the
Kolmogorov-Smirnov statistic on a shared grid.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import DomainError, EmptyHistogram, EmptyTree, GridMismatch
from .query import BucketSpec


def tree_path(value: float, low: float, high: float, depth: int) -> list[tuple[int, int]]:
    """Bucket index of ``value`` at each dyadic level 1..depth over [low, high).

    Values outside the range clamp to the leftmost/rightmost path.
    """
    if depth < 1:
        raise DomainError("depth must be >= 1")
    if not low < high:
        raise DomainError("low must be below high")
    frac = (value - low) / (high - low)
    frac = min(max(frac, 0.0), np.nextafter(1.0, 0.0))
    return [(d, int(frac * (1 << d))) for d in range(1, depth + 1)]


@dataclass
class HierarchicalHistogram:
    """Dyadic histogram stack: level d holds 2^d uniform buckets over [low, high)."""

    low: float
    high: float
    depth: int
    levels: list[np.ndarray]

    @classmethod
    def zeros(cls, low: float, high: float, depth: int) -> "HierarchicalHistogram":
        return cls(low, high, depth, [np.zeros(1 << d) for d in range(1, depth + 1)])

    @classmethod
    def from_values(
        cls, values: Sequence[float], low: float, high: float, depth: int
    ) -> "HierarchicalHistogram":
        tree = cls.zeros(low, high, depth)
        for v in values:
            for d, b in tree_path(float(v), low, high, depth):
                tree.levels[d - 1][b] += 1
        return tree

    @classmethod
    def from_entries(
        cls,
        entries: Mapping[str, tuple[float, float]],
        low: float,
        high: float,
        depth: int,
        use: str = "count",
    ) -> "HierarchicalHistogram":
        """Build from released entries keyed "level:bucket"."""
        tree = cls.zeros(low, high, depth)
        idx = 0 if use == "sum" else 1
        for key, pair in entries.items():
            level_s, _, bucket_s = key.partition(":")
            d, b = int(level_s), int(bucket_s)
            if 1 <= d <= depth and 0 <= b < (1 << d):
                tree.levels[d - 1][b] = pair[idx]
        return tree

    def grid_keys(self) -> list[str]:
        return [f"{d}:{b}" for d in range(1, self.depth + 1) for b in range(1 << d)]

    def dyadic_consistent(self, atol: float = 1e-9) -> bool:
        """Exact-data invariant: every parent equals the sum of its children."""
        for d in range(self.depth - 1):
            parents = self.levels[d]
            children = self.levels[d + 1].reshape(-1, 2).sum(axis=1)
            if not np.allclose(parents, children, atol=atol):
                return False
        return True


def quantile_from_tree(tree: HierarchicalHistogram, q: float, interpolate: bool = True) -> float:
    """Descend the hierarchy from the coarsest level toward the q-quantile leaf.

    At each level the left child is taken when the mass strictly left of it
    plus its own reaches q * total; negative (noised) counts are floored at
    zero for the descent. Within the final leaf the position is linearly
    interpolated.
    """
    if not 0.0 <= q <= 1.0:
        raise DomainError("q must be in [0, 1]")
    top = np.maximum(tree.levels[0], 0.0)
    total = float(top.sum())
    if total <= 0:
        raise EmptyTree("no mass in the hierarchy")
    target = q * total
    node = 0  # index within the previous level; the virtual root is index 0
    left_acc = 0.0
    for d in range(1, tree.depth + 1):
        counts = tree.levels[d - 1]
        left_child = 2 * node
        left_mass = max(float(counts[left_child]), 0.0)
        if left_acc + left_mass >= target:
            node = left_child
        else:
            left_acc += left_mass
            node = left_child + 1
    width = (tree.high - tree.low) / (1 << tree.depth)
    leaf_lo = tree.low + node * width
    if not interpolate:
        return leaf_lo
    leaf_mass = max(float(tree.levels[tree.depth - 1][node]), 0.0)
    if leaf_mass <= 0:
        frac = 0.5
    else:
        frac = min(max((target - left_acc) / leaf_mass, 0.0), 1.0)
    return leaf_lo + frac * width


def quantile_from_flat(
    counts: Sequence[float], bucket_spec: BucketSpec, q: float, interpolate: bool = True
) -> float:
    """Smallest bucket whose cumulative mass reaches q, linearly interpolated.

    Negative (noised) counts are handled through the monotone envelope of
    the cumulative sums rather than by clipping each bucket at zero:
    bucket-wise clipping turns zero-mean noise on the many empty buckets
    into a large spurious positive mass, while in the envelope neighboring
    noise cancels and only the running maximum is kept nondecreasing.
    On noise-free data the two are identical.
    """
    if not 0.0 <= q <= 1.0:
        raise DomainError("q must be in [0, 1]")
    arr = np.asarray(counts, dtype=float)
    if len(arr) != bucket_spec.buckets:
        raise DomainError("counts length must match the bucket grid")
    cum = np.maximum.accumulate(np.cumsum(arr))
    cum = np.maximum(cum, 0.0)
    total = float(cum[-1])
    if total <= 0:
        raise EmptyHistogram("no mass in the histogram")
    target = q * total
    b = int(np.searchsorted(cum, target, side="left"))
    b = min(b, bucket_spec.buckets - 1)
    edges = bucket_spec.edges()
    lo, hi = edges[b], edges[b + 1]
    if not interpolate:
        return lo
    before = float(cum[b - 1]) if b > 0 else 0.0
    mass = float(cum[b]) - before
    frac = 0.0 if mass <= 0 else min(max((target - before) / mass, 0.0), 1.0)
    return lo + frac * (hi - lo)


@dataclass(frozen=True)
class CdfEstimate:
    """Cumulative distribution sampled at bucket right-edges, normalized to 1."""

    grid: tuple[float, ...]
    cumulative: tuple[float, ...]

    @classmethod
    def from_counts(cls, counts: Sequence[float], bucket_spec: BucketSpec) -> "CdfEstimate":
        arr = np.maximum(np.asarray(counts, dtype=float), 0.0)
        total = arr.sum()
        if total <= 0:
            raise EmptyHistogram("no mass to build a CDF from")
        cum = np.maximum.accumulate(np.cumsum(arr) / total)
        cum = np.minimum(cum, 1.0)
        cum[-1] = 1.0
        return cls(tuple(bucket_spec.edges()[1:]), tuple(float(c) for c in cum))


def ks_error(estimated: CdfEstimate, truth: CdfEstimate) -> float:
    """Kolmogorov-Smirnov statistic: max CDF deviation over the shared grid."""
    if estimated.grid != truth.grid:
        raise GridMismatch("CDF estimates are on different grids")
    a = np.asarray(estimated.cumulative)
    b = np.asarray(truth.cumulative)
    return float(np.max(np.abs(a - b)))


@dataclass(frozen=True)
class MultiroundResult:
    value: float
    rounds_used: int
    converged: bool


def multiround_binary_search(
    query_driver: Callable[[float], float],
    q: float,
    low: float,
    high: float,
    tolerance: float,
    max_rounds: int = 12,
) -> MultiroundResult:
    """Binary search for the q-quantile using federated counting queries.

    ``query_driver(p)`` must answer the fraction of the population's values
    that are <= p; each call represents one collection round (and spends
    that round's budget when driven against a live aggregation). Stops when
    the answered fraction is within ``tolerance`` of q, flagging
    non-convergence if max_rounds is exhausted first.
    """
    if not 0.0 <= q <= 1.0:
        raise DomainError("q must be in [0, 1]")
    if not low < high:
        raise DomainError("low must be below high")
    lo, hi = low, high
    for r in range(1, max_rounds + 1):
        p = 0.5 * (lo + hi)
        frac = query_driver(p)
        if abs(frac - q) <= tolerance:
            return MultiroundResult(p, r, True)
        if frac < q:
            lo = p
        else:
            hi = p
    return MultiroundResult(0.5 * (lo + hi), max_rounds, False)
