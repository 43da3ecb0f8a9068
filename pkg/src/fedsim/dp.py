"""Differential-privacy mechanisms for histogram release.

Three privacy modes are supported: central DP (Gaussian noise added at the
trusted aggregator), local DP (generalized randomized response over one-hot
reports, debiased at release), and sample-and-threshold (random client
participation plus a count threshold; parameters are recorded rather than
converted into a derived (epsilon, delta) claim). A per-query budget splits
(epsilon, delta) linearly across periodic releases.

Sensitivities are L2: a client touching at most m buckets with at most C per
bucket has L2 norm C*sqrt(m), which is what the Gaussian mechanism's
calibration wants. Clamping to those bounds is enforced at ingest.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import BudgetExhausted, DegenerateError, DomainError
from . import rand


@dataclass
class PrivacyBudget:
    """(epsilon, delta) budget split linearly across a fixed number of releases.

    The recorded per-release shares are floats, nudged down by an ulp where
    needed so that the exact rational sum of everything ever handed out can
    never exceed the totals, no matter how epsilon/releases rounds.
    """

    epsilon_total: float
    delta_total: float
    releases_allowed: int
    releases_spent: int = 0

    def __post_init__(self) -> None:
        if not self.epsilon_total > 0:
            raise DomainError("epsilon_total must be positive")
        if not 0 <= self.delta_total < 1:
            raise DomainError("delta_total must be in [0, 1)")
        if self.releases_allowed < 1:
            raise DomainError("releases_allowed must be >= 1")

    @property
    def epsilon_per_release(self) -> float:
        return _safe_share(self.epsilon_total, self.releases_allowed)

    @property
    def delta_per_release(self) -> float:
        return _safe_share(self.delta_total, self.releases_allowed)

    @property
    def exhausted(self) -> bool:
        return self.releases_spent >= self.releases_allowed

    def state_dict(self) -> dict:
        return {
            "epsilon_total": self.epsilon_total,
            "delta_total": self.delta_total,
            "releases_allowed": self.releases_allowed,
            "releases_spent": self.releases_spent,
        }


def _safe_share(total: float, parts: int) -> float:
    if total == 0.0:
        return 0.0
    share = total / parts
    while Fraction(share) * parts > Fraction(total):
        share = math.nextafter(share, 0.0)
    return share


def split_budget(budget: PrivacyBudget) -> tuple[float, float]:
    """Spend one release from the budget, returning its (epsilon_i, delta_i)."""
    if budget.exhausted:
        raise BudgetExhausted(
            f"all {budget.releases_allowed} releases spent (epsilon={budget.epsilon_total})"
        )
    budget.releases_spent += 1
    return budget.epsilon_per_release, budget.delta_per_release


def gaussian_sigma(epsilon: float, delta: float, sensitivity: float) -> float:
    """Noise scale of the classic Gaussian mechanism.

    sigma = sensitivity * sqrt(2 * ln(1.25 / delta)) / epsilon
    """
    if not epsilon > 0:
        raise DomainError("epsilon must be positive")
    if not 0 < delta < 1:
        raise DomainError("delta must be in (0, 1)")
    if not sensitivity > 0:
        raise DomainError("sensitivity must be positive")
    return sensitivity * math.sqrt(2.0 * math.log(1.25 / delta)) / epsilon


@dataclass(frozen=True)
class GaussianParams:
    sigma: float
    sensitivity: float
    epsilon: float
    delta: float

    @classmethod
    def calibrate(cls, epsilon: float, delta: float, sensitivity: float) -> "GaussianParams":
        return cls(gaussian_sigma(epsilon, delta, sensitivity), sensitivity, epsilon, delta)

    @classmethod
    def zero(cls) -> "GaussianParams":
        """Degenerate no-noise parameters (mode NONE)."""
        return cls(0.0, 0.0, math.inf, 0.0)


def count_sensitivity(max_buckets_per_client: int) -> float:
    """L2 sensitivity of the per-bucket client counts."""
    return math.sqrt(max_buckets_per_client)


def sum_sensitivity(contribution_bound: float, max_buckets_per_client: int) -> float:
    """L2 sensitivity of the per-bucket value sums under ingest clamping."""
    return contribution_bound * math.sqrt(max_buckets_per_client)


@dataclass(frozen=True)
class NoisedHistogram:
    """Noised (sum, count) per bucket; values are real-valued and unrounded."""

    entries: dict[str, tuple[float, float]]
    sum_sigma: float = 0.0
    count_sigma: float = 0.0


def add_central_noise(
    histogram: Mapping[str, tuple[float, float]],
    sum_params: GaussianParams,
    count_params: GaussianParams,
    rng: np.random.Generator,
    domain: Iterable[str] | None = None,
) -> NoisedHistogram:
    """Add independent Gaussian noise to every bucket's sum and client count.

    When the bucket domain is known a priori (a fixed grid), pass it so that
    empty buckets are noised too; otherwise only observed keys are noised.
    Noised counts may come out negative; thresholding happens downstream.
    """
    keys = sorted(histogram.keys() if domain is None else domain)
    n = len(keys)
    if n == 0:
        return NoisedHistogram({}, sum_params.sigma, count_params.sigma)
    sum_noise = rng.normal(0.0, sum_params.sigma, n) if sum_params.sigma > 0 else np.zeros(n)
    count_noise = rng.normal(0.0, count_params.sigma, n) if count_params.sigma > 0 else np.zeros(n)
    entries = {}
    for i, key in enumerate(keys):
        s, c = histogram.get(key, (0.0, 0))
        entries[key] = (float(s) + float(sum_noise[i]), float(c) + float(count_noise[i]))
    return NoisedHistogram(entries, sum_params.sigma, count_params.sigma)


@dataclass(frozen=True)
class LdpParams:
    """Generalized randomized response over a one-hot domain of size B."""

    epsilon: float
    domain_size: int

    def __post_init__(self) -> None:
        if self.epsilon < 0:
            raise DomainError("epsilon must be nonnegative")
        if self.domain_size < 2:
            raise DomainError("domain_size must be >= 2")

    @property
    def p_keep(self) -> float:
        e = math.exp(self.epsilon)
        return e / (e + self.domain_size - 1)

    @property
    def p_other(self) -> float:
        return (1.0 - self.p_keep) / (self.domain_size - 1)


def ldp_perturb(bucket_index: int, params: LdpParams, rng: np.random.Generator) -> int:
    """Report the true bucket with probability p_keep, else a uniform other one."""
    if not 0 <= bucket_index < params.domain_size:
        raise DomainError(f"bucket index {bucket_index} outside [0, {params.domain_size})")
    if rng.random() < params.p_keep:
        return bucket_index
    other = int(rng.integers(0, params.domain_size - 1))
    return other if other < bucket_index else other + 1


def ldp_debias_exact(raw_counts: Sequence[int], n: int, params: LdpParams) -> list[Fraction]:
    """Invert the randomized-response channel in expectation, exactly.

    estimate_j = (raw_j - n * p_other) / (p_keep - p_other)

    Computed in rational arithmetic over the exact values of the float
    channel parameters, so sum(estimates) == n holds as an identity and
    debias(M @ c) == c for the channel's transition matrix M.
    """
    if len(raw_counts) != params.domain_size:
        raise DomainError("raw_counts length must equal the domain size")
    p = Fraction(params.p_keep)
    # the implemented channel picks uniformly among the B-1 other buckets, so
    # its exact per-bucket probability is (1-p)/(B-1), not the rounded float
    q = (1 - p) / (params.domain_size - 1)
    if p == q:
        raise DegenerateError("channel is non-invertible at epsilon = 0")
    denom = p - q
    n_q = n * q
    return [(Fraction(int(r)) - n_q) / denom for r in raw_counts]


def ldp_debias(raw_counts: Sequence[int], n: int, params: LdpParams) -> list[float]:
    """Float view of :func:`ldp_debias_exact`; estimates may be negative."""
    return [float(est) for est in ldp_debias_exact(raw_counts, n, params)]


def st_participation(client_id: int, query_id: str, sampling_rate: float, seed: int) -> bool:
    """Stable participation coin for sample-and-threshold, per (client, query)."""
    if not 0 <= sampling_rate <= 1:
        raise DomainError("sampling_rate must be in [0, 1]")
    return rand.coin(seed, "st", client_id, query_id) < sampling_rate


@dataclass(frozen=True)
class StParams:
    sampling_rate: float
    threshold: int

    def __post_init__(self) -> None:
        if not 0 < self.sampling_rate <= 1:
            raise DomainError("sampling_rate must be in (0, 1]")


def k_anon_filter(noised: NoisedHistogram, k: int) -> NoisedHistogram:
    """Drop every bucket whose noised client count is below k."""
    if k <= 0:
        return noised
    kept = {key: sc for key, sc in noised.entries.items() if sc[1] >= k}
    return NoisedHistogram(kept, noised.sum_sigma, noised.count_sigma)
