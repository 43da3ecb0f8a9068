"""Canned scenario builders for the experiment suite and CLI.

These encode the calibrated defaults used by the acceptance experiments:
a 85/15 regular/long-tail fleet, log-series per-device activity, and a
log-normal RTT law with its mode at 50 ms. Privacy-mode comparisons run on a
one-hot sampled-RTT histogram (B=51) so all four modes see identical client
contributions; quantile experiments use 2048-bucket grids.
"""

from __future__ import annotations

from typing import Any

from .population import PopulationConfig
from .simulation import FailureSpec, Scenario

RTT_BUCKETS_51 = {"low": 0.0, "high": 500.0, "buckets": 51, "overflow": True}
QUANTILE_GRID_2048 = {"low": 0.0, "high": 1024.0, "buckets": 2048, "overflow": False}
ACTIVITY_GRID_2048 = {"low": 1.0, "high": 2048.0, "buckets": 2048, "overflow": True}

MODE_PRIVACY: dict[str, dict[str, Any]] = {
    "cdp": {
        "mode": "centralDP",
        "epsilon": 1.0,
        "delta": 1e-8,
        "kAnonThreshold": 100,
        "contributionBound": 1.0,
        "maxBucketsPerClient": 1,
    },
    "ldp": {
        "mode": "localDP",
        "epsilon": 1.0,
        "delta": 0.0,
        # at desk scale the debiased estimates carry noise of a few thousand
        # counts per bucket; the threshold must sit above that to matter
        "kAnonThreshold": 12000,
        "contributionBound": 1.0,
        "maxBucketsPerClient": 1,
    },
    "st": {
        "mode": "sampleThreshold",
        "epsilon": 1.0,
        "delta": 1e-8,
        "kAnonThreshold": 50,
        "contributionBound": 1.0,
        "maxBucketsPerClient": 1,
        "stSamplingRate": 0.25,
    },
    "none": {
        "mode": "none",
        "epsilon": 1.0,
        "delta": 0.0,
        "kAnonThreshold": 100,
        "contributionBound": 1.0,
        "maxBucketsPerClient": 1,
    },
}


def rtt_histogram_document(
    query_id: str,
    privacy: dict[str, Any] | None = None,
    release_interval_hours: float = 1.0,
    max_releases: int = 96,
    min_reporters: int = 50,
) -> dict:
    """Multi-record RTT histogram: every stored value, bucketized on device."""
    return {
        "query": {
            "queryId": query_id,
            "onDeviceQuery": {
                "sourceTable": "network_requests",
                "filter": [],
                "groupBy": [],
                "aggregations": [{"op": "count", "column": "rtt_ms"}],
            },
            "dimensionCols": [],
            "metricCols": {"count": ["rtt_ms"]},
            "bucketSpec": dict(RTT_BUCKETS_51),
            "clientSamplingRate": 1.0,
            "oneHot": False,
        },
        "privacy": privacy
        or {
            "mode": "none",
            "epsilon": 1.0,
            "delta": 0.0,
            "kAnonThreshold": 0,
            "contributionBound": 100.0,
            "maxBucketsPerClient": 16,
        },
        "schedule": {
            "releaseIntervalHours": release_interval_hours,
            "maxReleases": max_releases,
            "minReporters": min_reporters,
        },
        "output": {"sink": query_id},
    }


def onehot_rtt_document(
    query_id: str,
    privacy: dict[str, Any],
    release_interval_hours: float = 44.0,
    max_releases: int = 1,
    min_reporters: int = 1000,
) -> dict:
    """One sampled RTT value per device over the B=51 grid (mode comparison)."""
    return {
        "query": {
            "queryId": query_id,
            "onDeviceQuery": {
                "sourceTable": "network_requests",
                "filter": [],
                "groupBy": [],
                "aggregations": [{"op": "sample", "column": "rtt_ms"}],
            },
            "dimensionCols": [],
            "metricCols": {"count": ["rtt_ms"]},
            "bucketSpec": dict(RTT_BUCKETS_51),
            "clientSamplingRate": 1.0,
            "oneHot": True,
        },
        "privacy": privacy,
        "schedule": {
            "releaseIntervalHours": release_interval_hours,
            "maxReleases": max_releases,
            "minReporters": min_reporters,
        },
        "output": {"sink": query_id},
    }


def activity_cdf_document(
    query_id: str = "activity_cdf",
    release_interval_hours: float = 12.0,
    max_releases: int = 8,
) -> dict:
    """Per-device daily record count as a one-hot over 2048 count buckets."""
    return {
        "query": {
            "queryId": query_id,
            "onDeviceQuery": {
                "sourceTable": "network_requests",
                "filter": [],
                "groupBy": [],
                "aggregations": [{"op": "count", "column": "rtt_ms"}],
            },
            "dimensionCols": [],
            "metricCols": {"count": ["rtt_ms"]},
            "bucketSpec": dict(ACTIVITY_GRID_2048),
            "clientSamplingRate": 1.0,
            "oneHot": True,
        },
        "privacy": {
            "mode": "none",
            "epsilon": 1.0,
            "delta": 0.0,
            "kAnonThreshold": 0,
            "contributionBound": 1.0,
            "maxBucketsPerClient": 1,
        },
        "schedule": {
            "releaseIntervalHours": release_interval_hours,
            "maxReleases": max_releases,
            "minReporters": 100,
        },
        "output": {"sink": query_id},
    }


def p90_quantile_document(
    query_id: str,
    method: str,
    with_dp: bool,
    release_interval_hours: float,
    max_releases: int,
) -> dict:
    """Sampled-RTT quantile query on the 2048-leaf grid (flat or tree)."""
    if with_dp:
        privacy: dict[str, Any] = {
            "mode": "centralDP",
            "epsilon": 1.0,
            "delta": 1e-8,
            "kAnonThreshold": 0,
            "contributionBound": 1.0,
            "maxBucketsPerClient": 11 if method == "tree" else 1,
        }
    else:
        privacy = {
            "mode": "none",
            "epsilon": 1.0,
            "delta": 0.0,
            "kAnonThreshold": 0,
            "contributionBound": 1.0,
            "maxBucketsPerClient": 11 if method == "tree" else 1,
        }
    return {
        "query": {
            "queryId": query_id,
            "onDeviceQuery": {
                "sourceTable": "network_requests",
                "filter": [],
                "groupBy": [],
                "aggregations": [{"op": "sample", "column": "rtt_ms"}],
            },
            "dimensionCols": [],
            "metricCols": {
                "quantile": [{"column": "rtt_ms", "targets": [0.9], "method": method}]
            },
            "bucketSpec": dict(QUANTILE_GRID_2048),
            "clientSamplingRate": 1.0,
            "oneHot": method == "flat",
        },
        "privacy": privacy,
        "schedule": {
            "releaseIntervalHours": release_interval_hours,
            "maxReleases": max_releases,
            "minReporters": 100,
        },
        "output": {"sink": query_id},
    }


def count_leq_document(query_id: str, threshold: float | None) -> dict:
    """Global COUNT of records with rtt_ms <= threshold (one multiround probe)."""
    filt = [] if threshold is None else [{"column": "rtt_ms", "op": "<=", "value": threshold}]
    return {
        "query": {
            "queryId": query_id,
            "onDeviceQuery": {
                "sourceTable": "network_requests",
                "filter": filt,
                "groupBy": [],
                "aggregations": [{"op": "count", "column": "rtt_ms"}],
            },
            "dimensionCols": [],
            "metricCols": {"count": ["rtt_ms"]},
            "bucketSpec": dict(RTT_BUCKETS_51),
            "clientSamplingRate": 1.0,
            "oneHot": False,
        },
        "privacy": {
            "mode": "none",
            "epsilon": 1.0,
            "delta": 0.0,
            "kAnonThreshold": 0,
            "contributionBound": 200.0,
            "maxBucketsPerClient": 51,
        },
        "schedule": {"releaseIntervalHours": 14.0, "maxReleases": 1, "minReporters": 10},
        "output": {"sink": query_id},
    }


def baseline_coverage_scenario(
    n: int = 100_000, seed: int = 1, offsets_hours: tuple[float, ...] = (0.0, 6.0, 12.0)
) -> Scenario:
    """Three staggered launches of the exact RTT histogram (coverage/TVD study)."""
    queries = [
        {
            "launchHours": off,
            "document": rtt_histogram_document(f"rtt_hist_{int(off):02d}h"),
        }
        for off in offsets_hours
    ]
    return Scenario(
        name="baseline-coverage",
        seed=seed,
        horizon_hours=96.0 + max(offsets_hours),
        population=PopulationConfig(n=n),
        queries=queries,
        band_split_ms=60.0,
        band_query="rtt_hist_00h",
    )


def mode_comparison_scenario(
    mode: str, n: int = 1_000_000, seed: int = 2, records_scale: float = 1.0
) -> Scenario:
    """One privacy mode of the cross-mode comparison, at daily or 1/34 scale."""
    if mode not in MODE_PRIVACY:
        raise KeyError(f"unknown mode {mode!r}; pick from {sorted(MODE_PRIVACY)}")
    doc = onehot_rtt_document(f"rtt_onehot_{mode}", dict(MODE_PRIVACY[mode]))
    return Scenario(
        name=f"mode-comparison-{mode}",
        seed=seed,
        horizon_hours=48.0,
        population=PopulationConfig(n=n, records_scale=records_scale),
        queries=[{"launchHours": 0.0, "document": doc}],
    )


def quantile_main_scenario(n: int = 100_000, seed: int = 3) -> Scenario:
    """Activity CDF plus the three p90 estimators over one fleet."""
    queries = [
        {"launchHours": 0.0, "document": activity_cdf_document()},
        {
            "launchHours": 0.0,
            "document": p90_quantile_document("p90_nodp", "flat", False, 12.0, 8),
        },
        {
            "launchHours": 0.0,
            "document": p90_quantile_document("p90_dp_hist", "flat", True, 36.0, 2),
        },
        {
            "launchHours": 0.0,
            "document": p90_quantile_document("p90_dp_tree", "tree", True, 36.0, 2),
        },
    ]
    return Scenario(
        name="quantile-main",
        seed=seed,
        horizon_hours=96.0,
        population=PopulationConfig(n=n),
        queries=queries,
    )


def quantile_hourly_scenario(n: int = 100_000, seed: int = 4) -> Scenario:
    """Activity CDF at the quiet (1/34) grain."""
    return Scenario(
        name="quantile-hourly",
        seed=seed,
        horizon_hours=96.0,
        population=PopulationConfig(n=n, records_scale=1.0 / 34.0),
        queries=[{"launchHours": 0.0, "document": activity_cdf_document()}],
    )


def quantile_seed_scenario(n: int = 100_000, seed: int = 100) -> Scenario:
    """Tree-vs-flat DP quantile pair for the multi-seed comparison."""
    queries = [
        {
            "launchHours": 0.0,
            "document": p90_quantile_document("p90_dp_hist", "flat", True, 24.0, 2),
        },
        {
            "launchHours": 0.0,
            "document": p90_quantile_document("p90_dp_tree", "tree", True, 24.0, 2),
        },
    ]
    return Scenario(
        name="quantile-seeds",
        seed=seed,
        horizon_hours=49.0,
        population=PopulationConfig(n=n),
        queries=queries,
    )


def crash_recovery_scenario(
    n: int = 2000,
    seed: int = 5,
    failures: list[FailureSpec] | None = None,
) -> Scenario:
    """Small fleet with scripted failures; pair with the no-failure twin.

    Regular-only population: bounded 14-16h check-in gaps guarantee every
    client interrupted by a crash gets retry windows inside the horizon,
    which is what makes recovery exactly equivalent to the clean run. (A
    long-tail device can legitimately bow out for longer than the whole
    experiment; that behavior is exercised by the coverage scenarios.)
    """
    return Scenario(
        name="crash-recovery",
        seed=seed,
        horizon_hours=96.0,
        population=PopulationConfig(n=n, regular_fraction=1.0),
        queries=[
            {
                "launchHours": 0.0,
                "document": rtt_histogram_document(
                    "rtt_hist", release_interval_hours=8.0, max_releases=12
                ),
            }
        ],
        aggregators=2,
        failures=failures or [],
    )


class SimulationCountDriver:
    """Answers multiround probes by running a fresh one-shot counting query.

    Each probe [low, p] launches its own federated COUNT query against a
    fleet regenerated from the same seed, waits for its single release, and
    reports the released fraction of the baseline total. Every round spends
    that round's own query budget, mirroring how a live multiround quantile
    would be driven.
    """

    def __init__(self, n: int, seed: int, horizon_hours: float = 16.0):
        self.n = n
        self.seed = seed
        self.horizon_hours = horizon_hours
        self.rounds_run = 0
        self._total = self._released_count(None)

    def _released_count(self, threshold: float | None) -> float:
        from .simulation import run_scenario

        tag = "total" if threshold is None else f"r{self.rounds_run}"
        doc = count_leq_document(f"count_leq_{tag}", threshold)
        doc["schedule"]["releaseIntervalHours"] = self.horizon_hours - 0.5
        scenario = Scenario(
            name=f"multiround-{tag}",
            seed=self.seed,
            horizon_hours=self.horizon_hours,
            population=PopulationConfig(n=self.n),
            queries=[{"launchHours": 0.0, "document": doc}],
            batch_fail_prob=0.0,
        )
        result = run_scenario(scenario)
        if not result.releases:
            return 0.0
        entries = result.releases[-1]["entries"]
        return float(sum(sc[0] for sc in entries.values()))

    def __call__(self, p: float) -> float:
        self.rounds_run += 1
        if self._total <= 0:
            return 0.0
        return self._released_count(p) / self._total
