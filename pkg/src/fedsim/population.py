"""Heterogeneous device population and the evaluation-only ground truth.

Device heterogeneity follows two axes: activity (records per data-day drawn
from a log-series law, so most devices hold a single value while a few hold
over a hundred) and availability (85% of devices check in on a uniform
14-16h cycle; the long-tail rest follow a clamped exponential with a 48h
mean). Network quality is a per-device log-normal RTT law with a population
mode around 50 ms, slightly slower for long-tail devices so coverage can be
analyzed by latency band.

First check-ins are drawn from the equilibrium residual of each class's
renewal process, which makes the fleet's check-in stream stationary: a query
launched at any offset sees statistically identical pickup behavior.

All raw data points are mirrored into a ground-truth store that exists only
for evaluation (coverage, TVD, exact quantiles); no protocol component reads
it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Mapping

import numpy as np

from . import rand
from .client import ArrayTableView
from .errors import ConfigError
from .query import FederatedQuery

HOUR = 3600.0

FLEET_TABLE = "network_requests"
RTT_COLUMN = "rtt_ms"

CLASS_REGULAR = "regular"
CLASS_LONG_TAIL = "long_tail"


@dataclass(frozen=True)
class PopulationConfig:
    n: int
    regular_fraction: float = 0.85
    permanent_death_prob: float = 0.02
    checkin_low_hours: float = 14.0
    checkin_high_hours: float = 16.0
    tail_mean_hours: float = 48.0
    tail_min_hours: float = 14.0
    log_series_p: float = 0.95
    records_scale: float = 1.0  # thinning factor (1/34 models the quiet hourly grain)
    rtt_mode_ms: float = 50.0
    rtt_sigma_within: float = 0.30
    rtt_mu_jitter: float = 0.10
    tail_rtt_shift: float = 0.04
    data_timestamp_hours: float = -1.0

    def validate(self) -> None:
        if self.n < 1:
            raise ConfigError("population n must be >= 1")
        if not 0.0 <= self.regular_fraction <= 1.0:
            raise ConfigError("regular_fraction must be in [0, 1]")
        if not 0.0 < self.log_series_p < 1.0:
            raise ConfigError("log_series_p must be in (0, 1)")
        if not 0.0 <= self.records_scale <= 1.0:
            raise ConfigError("records_scale must be in (0, 1]")
        if not self.checkin_low_hours < self.checkin_high_hours:
            raise ConfigError("check-in window must have low < high")

    def to_dict(self) -> dict[str, Any]:
        return {
            "n": self.n,
            "regularFraction": self.regular_fraction,
            "permanentDeathProb": self.permanent_death_prob,
            "checkinLowHours": self.checkin_low_hours,
            "checkinHighHours": self.checkin_high_hours,
            "tailMeanHours": self.tail_mean_hours,
            "tailMinHours": self.tail_min_hours,
            "logSeriesP": self.log_series_p,
            "recordsScale": self.records_scale,
            "rttModeMs": self.rtt_mode_ms,
            "rttSigmaWithin": self.rtt_sigma_within,
            "rttMuJitter": self.rtt_mu_jitter,
            "tailRttShift": self.tail_rtt_shift,
            "dataTimestampHours": self.data_timestamp_hours,
        }

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "PopulationConfig":
        known = {
            "n": "n",
            "regularFraction": "regular_fraction",
            "permanentDeathProb": "permanent_death_prob",
            "checkinLowHours": "checkin_low_hours",
            "checkinHighHours": "checkin_high_hours",
            "tailMeanHours": "tail_mean_hours",
            "tailMinHours": "tail_min_hours",
            "logSeriesP": "log_series_p",
            "recordsScale": "records_scale",
            "rttModeMs": "rtt_mode_ms",
            "rttSigmaWithin": "rtt_sigma_within",
            "rttMuJitter": "rtt_mu_jitter",
            "tailRttShift": "tail_rtt_shift",
            "dataTimestampHours": "data_timestamp_hours",
        }
        unknown = set(doc) - set(known)
        if unknown:
            raise ConfigError(f"unknown population keys: {sorted(unknown)}")
        if "n" not in doc:
            raise ConfigError("population config requires n")
        cfg = cls(**{known[k]: v for k, v in doc.items()})
        cfg.validate()
        return cfg


@dataclass(frozen=True)
class DeviceProfile:
    client_id: int
    device_class: str
    records_per_day: int
    rtt_mu: float
    permanently_dead: bool


@dataclass
class Population:
    """Columnar fleet state plus the per-device data (one flat table)."""

    config: PopulationConfig
    seed: int
    is_tail: np.ndarray
    dead: np.ndarray
    rtt_mu: np.ndarray
    n_records: np.ndarray
    offsets: np.ndarray
    values: np.ndarray
    first_checkin: np.ndarray
    record_ts: float

    @property
    def n(self) -> int:
        return len(self.n_records)

    @property
    def total_points(self) -> int:
        return int(self.offsets[-1])

    def device_class(self, client_id: int) -> str:
        return CLASS_LONG_TAIL if self.is_tail[client_id] else CLASS_REGULAR

    def device_values(self, client_id: int) -> np.ndarray:
        return self.values[self.offsets[client_id] : self.offsets[client_id + 1]]

    def store_view(self, client_id: int) -> ArrayTableView:
        view = ArrayTableView(FLEET_TABLE, {RTT_COLUMN: self.device_values(client_id)})
        view.client_id = client_id
        return view

    def profile(self, client_id: int) -> DeviceProfile:
        return DeviceProfile(
            client_id=client_id,
            device_class=self.device_class(client_id),
            records_per_day=int(self.n_records[client_id]),
            rtt_mu=float(self.rtt_mu[client_id]),
            permanently_dead=bool(self.dead[client_id]),
        )


def generate_population(
    n: int, seed: int, config: PopulationConfig | None = None
) -> tuple[Population, "GroundTruthStore"]:
    """Deterministically materialize a fleet and its evaluation mirror."""
    if config is None:
        config = PopulationConfig(n=n)
    elif config.n != n:
        config = PopulationConfig(**{**config.__dict__, "n": n})
    config.validate()
    gen = rand.generator(seed, "population", n)

    is_tail = gen.random(n) >= config.regular_fraction
    dead = gen.random(n) < config.permanent_death_prob
    mu_base = math.log(config.rtt_mode_ms) + config.rtt_sigma_within**2
    rtt_mu = (
        mu_base
        + config.rtt_mu_jitter * gen.standard_normal(n)
        + config.tail_rtt_shift * is_tail
    )
    n_records = gen.logseries(config.log_series_p, n).astype(np.int64)
    if config.records_scale < 1.0:
        n_records = gen.binomial(n_records, config.records_scale).astype(np.int64)
    offsets = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(n_records, out=offsets[1:])
    total = int(offsets[-1])
    values = np.exp(
        np.repeat(rtt_mu, n_records) + config.rtt_sigma_within * gen.standard_normal(total)
    )

    first_checkin = np.empty(n, dtype=np.float64)
    lo = config.checkin_low_hours * HOUR
    hi = config.checkin_high_hours * HOUR
    # equilibrium residual of the U[lo,hi] renewal: R = V * X, X length-biased
    u1 = gen.random(n)
    u2 = gen.random(n)
    length_biased = np.sqrt(lo * lo + (hi * hi - lo * lo) * u1)
    first_checkin[:] = u2 * length_biased
    # equilibrium residual of the max(tmin, Exp(tmean)) renewal
    tmin = config.tail_min_hours * HOUR
    tmean = config.tail_mean_hours * HOUR
    mean_period = tmin + tmean * math.exp(-tmin / tmean)
    u3 = gen.random(n)
    u4 = gen.random(n)
    tail_res = np.where(
        u3 < tmin / mean_period,
        u4 * tmin,
        tmin - tmean * np.log1p(-u4 * (1.0 - 1e-12)),
    )
    first_checkin[is_tail] = tail_res[is_tail]
    first_checkin[dead] = np.inf

    pop = Population(
        config=config,
        seed=seed,
        is_tail=is_tail,
        dead=dead,
        rtt_mu=rtt_mu,
        n_records=n_records,
        offsets=offsets,
        values=values,
        first_checkin=first_checkin,
        record_ts=config.data_timestamp_hours * HOUR,
    )
    return pop, GroundTruthStore(pop)


@dataclass
class QueryGroundTruth:
    """Exact per-query histogram and coverage weights, from the mirrored data."""

    w: dict[str, float]
    points_per_client: np.ndarray
    total_points: float
    scalar_values: np.ndarray | None = None  # per-device value for one-hot queries
    matching_values: np.ndarray | None = None

    def exact_quantile(self, q: float) -> float:
        vals = self.scalar_values if self.scalar_values is not None else self.matching_values
        if vals is None or len(vals) == 0:
            raise ConfigError("no values to take a quantile of")
        return float(np.quantile(vals, q))


class GroundTruthStore:
    """Central mirror of all generated data points, for evaluation only."""

    def __init__(self, population: Population):
        self.population = population
        self._cache: dict[str, QueryGroundTruth] = {}

    def for_query(self, query: FederatedQuery) -> QueryGroundTruth:
        gt = self._cache.get(query.query_id)
        if gt is None:
            gt = self._compute(query)
            self._cache[query.query_id] = gt
        return gt

    def _segment_counts(self, mask: np.ndarray) -> np.ndarray:
        cums = np.zeros(len(mask) + 1, dtype=np.int64)
        np.cumsum(mask, out=cums[1:])
        off = self.population.offsets
        return cums[off[1:]] - cums[off[:-1]]

    def _first_matching(self, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(has_match, first matching value) per device."""
        pop = self.population
        nz = np.flatnonzero(mask)
        j = np.searchsorted(nz, pop.offsets[:-1])
        has = (j < len(nz)) & (nz[np.minimum(j, len(nz) - 1)] < pop.offsets[1:])
        firsts = np.zeros(pop.n, dtype=np.float64)
        firsts[has] = pop.values[nz[j[has]]]
        return has, firsts

    def _filter_mask(self, query: FederatedQuery) -> np.ndarray:
        pop = self.population
        mask = np.ones(len(pop.values), dtype=bool)
        for clause in query.transform.filter:
            if clause.column != RTT_COLUMN:
                raise ConfigError(
                    f"fleet ground truth supports filters on {RTT_COLUMN!r} only"
                )
            col = pop.values
            if clause.op == "==":
                mask &= col == clause.value
            elif clause.op == "!=":
                mask &= col != clause.value
            elif clause.op == "<":
                mask &= col < clause.value
            elif clause.op == "<=":
                mask &= col <= clause.value
            elif clause.op == ">":
                mask &= col > clause.value
            else:
                mask &= col >= clause.value
        return mask

    def _compute(self, query: FederatedQuery) -> QueryGroundTruth:
        if query.transform.source_table != FLEET_TABLE or query.dimension_cols:
            raise ConfigError("fleet ground truth covers undimensioned RTT-table queries")
        pop = self.population
        spec = query.bucket_spec
        agg = query.transform.aggregations[0]
        mask = self._filter_mask(query)
        m_counts = self._segment_counts(mask)

        if query.one_hot or query.tree_metric is not None:
            if agg.op == "count":
                has = m_counts > 0
                scalars = m_counts.astype(np.float64)[has]
            elif agg.op == "sample":
                has, firsts = self._first_matching(mask)
                scalars = firsts[has]
            else:  # sum
                cums = np.zeros(len(mask) + 1, dtype=np.float64)
                np.cumsum(np.where(mask, pop.values, 0.0), out=cums[1:])
                sums = cums[pop.offsets[1:]] - cums[pop.offsets[:-1]]
                has = m_counts > 0
                scalars = sums[has]
            assert spec is not None
            idx = _bucket_indices(scalars, spec)
            points = has.astype(np.int64)
            if query.tree_metric is not None:
                depth = int(math.log2(spec.buckets))
                w: dict[str, float] = {}
                for d in range(1, depth + 1):
                    counts = np.bincount(idx >> (depth - d), minlength=1 << d)
                    for b in np.nonzero(counts)[0]:
                        w[f"{d}:{int(b)}"] = float(counts[b])
            else:
                counts = np.bincount(idx, minlength=spec.buckets)
                w = {spec.label(int(b)): float(counts[b]) for b in np.nonzero(counts)[0]}
            return QueryGroundTruth(
                w=w,
                points_per_client=points,
                total_points=float(points.sum()),
                scalar_values=scalars,
            )

        # multi-record histogram over the bucket grid
        if spec is None:
            raise ConfigError("fleet ground truth needs a bucket grid")
        matched = pop.values[mask]
        idx = _bucket_indices(matched, spec)
        if agg.op == "count":
            counts = np.bincount(idx, minlength=spec.buckets).astype(np.float64)
        else:
            counts = np.bincount(idx, weights=matched, minlength=spec.buckets)
        w = {spec.label(int(b)): float(counts[b]) for b in np.nonzero(counts)[0]}
        return QueryGroundTruth(
            w=w,
            points_per_client=m_counts,
            total_points=float(m_counts.sum()),
            matching_values=matched,
        )

    def band_points(self, query: FederatedQuery, split_ms: float) -> dict[str, np.ndarray]:
        """Per-client matching point counts below/at-or-above the RTT split."""
        mask = self._filter_mask(query)
        low = self._segment_counts(mask & (self.population.values < split_ms))
        high = self._segment_counts(mask & (self.population.values >= split_ms))
        return {"low": low, "high": high}


def _bucket_indices(values: np.ndarray, spec) -> np.ndarray:
    idx = np.clip(((values - spec.low) / spec.width).astype(np.int64), 0, spec.buckets - 1)
    idx[values >= spec.high] = spec.buckets - 1
    return idx
