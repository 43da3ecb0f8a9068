import pytest

from fedsim import attestation
from fedsim.query import parse_query_config


@pytest.fixture(scope="session")
def root_of_trust():
    return attestation.RootOfTrust(seed=1234)


@pytest.fixture()
def registry(root_of_trust):
    reg = attestation.TrustedBinaryRegistry(root_of_trust.public_bytes)
    reg.register(attestation.binary_hash_of("fedsim-tsa/1.0"), "fedsim-tsa/1.0")
    return reg


def simple_rtt_query_doc(query_id="rtt_hist", privacy=None, schedule=None, bucket=None):
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
            "bucketSpec": bucket or {"low": 0.0, "high": 500.0, "buckets": 51, "overflow": True},
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
        "schedule": schedule or {"releaseIntervalHours": 4.0, "maxReleases": 8, "minReporters": 0},
        "output": {"sink": query_id},
    }


@pytest.fixture()
def rtt_query():
    return parse_query_config(simple_rtt_query_doc())
