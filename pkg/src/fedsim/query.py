"""Federated query model: on-device transform, metrics, privacy config.

A federated query has two halves: a local transform executed on each device
(filter, group-by, aggregate over one flat table) and a server-side
aggregation spec (metric kinds, bucketization, privacy mode, release
schedule). Queries are parsed from JSON documents whose top-level sections
are ``query`` / ``privacy`` / ``schedule`` / ``output``; unknown keys are
rejected so privacy-relevant fields can never be silently dropped.
"""

from __future__ import annotations

import enum
import functools
import json
import math
from dataclasses import dataclass
from typing import Any, Mapping

from .errors import ParseError, ValidationError

HOUR = 3600.0

FILTER_OPS = ("==", "!=", "<", "<=", ">", ">=")
AGG_OPS = ("count", "sum", "sample")


class MetricKind(str, enum.Enum):
    COUNT = "count"
    SUM = "sum"
    MEAN = "mean"
    QUANTILE = "quantile"


class PrivacyMode(str, enum.Enum):
    CENTRAL_DP = "centralDP"
    LOCAL_DP = "localDP"
    SAMPLE_THRESHOLD = "sampleThreshold"
    NONE = "none"


class QuantileMethod(str, enum.Enum):
    FLAT = "flat"
    TREE = "tree"
    MULTIROUND = "multiround"


@dataclass(frozen=True)
class BucketSpec:
    """Uniform bucketization of a continuous metric into B buckets.

    With ``overflow_bucket`` the last bucket is open-ended: the first B-1
    buckets tile [low, high) uniformly and values >= the last boundary
    collapse into a final "X+" bucket.
    """

    low: float
    high: float
    buckets: int
    overflow_bucket: bool = True

    @property
    def width(self) -> float:
        if self.overflow_bucket:
            return (self.high - self.low) / (self.buckets - 1)
        return (self.high - self.low) / self.buckets

    def index_of(self, value: float) -> int:
        """Bucket index for a value; out-of-range values clamp to the ends.

        With an overflow bucket, ``high`` is where the open-ended last bucket
        starts; buckets 0..B-2 tile [low, high). Without one, buckets 0..B-1
        tile [low, high) and values >= high clamp into the last bucket.
        """
        if value < self.low:
            return 0
        if value >= self.high:
            return self.buckets - 1
        idx = int((value - self.low) / self.width)
        return min(idx, self.buckets - 1)

    def label(self, index: int) -> str:
        lo = self.low + index * self.width
        if self.overflow_bucket and index == self.buckets - 1:
            return f"{_fmt(lo)}+"
        return f"{_fmt(lo)}-{_fmt(lo + self.width)}"

    def labels(self) -> tuple[str, ...]:
        return _cached_labels(self)

    def edges(self) -> list[float]:
        """The B+1 boundaries (the overflow bucket keeps a nominal width)."""
        return [self.low + i * self.width for i in range(self.buckets + 1)]

    def validate(self, path: str = "bucketSpec") -> None:
        if self.buckets < 1:
            raise ValidationError(f"{path}.buckets", "must be a positive integer")
        if self.overflow_bucket and self.buckets < 2:
            raise ValidationError(f"{path}.buckets", "overflow bucket needs B >= 2")
        if not self.low < self.high:
            raise ValidationError(f"{path}.low", "low must be below high")


def _fmt(x: float) -> str:
    return f"{x:g}"


@functools.lru_cache(maxsize=256)
def _cached_labels(spec: "BucketSpec") -> tuple[str, ...]:
    return tuple(spec.label(i) for i in range(spec.buckets))


@dataclass(frozen=True)
class FilterClause:
    column: str
    op: str
    value: Any

    def matches(self, record_value: Any) -> bool:
        if self.op == "==":
            return record_value == self.value
        if self.op == "!=":
            return record_value != self.value
        if self.op == "<":
            return record_value < self.value
        if self.op == "<=":
            return record_value <= self.value
        if self.op == ">":
            return record_value > self.value
        return record_value >= self.value


@dataclass(frozen=True)
class Aggregation:
    """One aggregation of the local transform, producing a metric column.

    ``count`` counts matching records, ``sum`` totals a column, and
    ``sample`` takes the first stored record's value (used by one-hot
    queries that report a single representative value per device).
    """

    op: str
    column: str

    @property
    def output(self) -> str:
        return self.column


@dataclass(frozen=True)
class LocalTransform:
    source_table: str
    filter: tuple[FilterClause, ...]
    group_by: tuple[str, ...]
    aggregations: tuple[Aggregation, ...]


@dataclass(frozen=True)
class MetricSpec:
    kind: MetricKind
    column: str
    quantile_targets: tuple[float, ...] = ()
    quantile_method: QuantileMethod = QuantileMethod.FLAT


@dataclass(frozen=True)
class PrivacyConfig:
    mode: PrivacyMode
    epsilon: float
    delta: float
    k_anon_threshold: int
    contribution_bound: float
    max_buckets_per_client: int
    st_sampling_rate: float | None = None

    def validate(self, path: str = "privacy") -> None:
        if not self.epsilon > 0:
            raise ValidationError(f"{path}.epsilon", "must be positive")
        if not 0 <= self.delta < 1:
            raise ValidationError(f"{path}.delta", "must be in [0, 1)")
        if self.mode == PrivacyMode.LOCAL_DP and self.delta != 0:
            raise ValidationError(f"{path}.delta", "localDP requires delta = 0")
        if self.mode in (PrivacyMode.CENTRAL_DP, PrivacyMode.SAMPLE_THRESHOLD) and self.delta <= 0:
            raise ValidationError(f"{path}.delta", f"{self.mode.value} requires delta > 0")
        if self.k_anon_threshold < 0:
            raise ValidationError(f"{path}.kAnonThreshold", "must be nonnegative")
        if not self.contribution_bound > 0:
            raise ValidationError(f"{path}.contributionBound", "must be positive")
        if self.max_buckets_per_client < 1:
            raise ValidationError(f"{path}.maxBucketsPerClient", "must be positive")
        if self.mode == PrivacyMode.SAMPLE_THRESHOLD:
            if self.st_sampling_rate is None or not 0 < self.st_sampling_rate <= 1:
                raise ValidationError(f"{path}.stSamplingRate", "must be in (0, 1]")
        elif self.st_sampling_rate is not None:
            raise ValidationError(f"{path}.stSamplingRate", "only valid for sampleThreshold mode")


@dataclass(frozen=True)
class ReleaseSchedule:
    release_interval: float  # simulated seconds between releases
    max_releases: int
    min_reporters: int = 0

    def validate(self, path: str = "schedule") -> None:
        if not self.release_interval > 0:
            raise ValidationError(f"{path}.releaseIntervalHours", "must be positive")
        if self.max_releases < 1:
            raise ValidationError(f"{path}.maxReleases", "must be >= 1")
        if self.min_reporters < 0:
            raise ValidationError(f"{path}.minReporters", "must be nonnegative")


@dataclass(frozen=True)
class FederatedQuery:
    query_id: str
    transform: LocalTransform
    dimension_cols: tuple[str, ...]
    metric_specs: tuple[MetricSpec, ...]
    privacy: PrivacyConfig
    schedule: ReleaseSchedule
    output_sink: str
    bucket_spec: BucketSpec | None = None
    client_sampling_rate: float = 1.0
    one_hot: bool = False

    def validate(self) -> None:
        if not self.query_id:
            raise ValidationError("query.queryId", "must be nonempty")
        if len(set(self.dimension_cols)) != len(self.dimension_cols):
            raise ValidationError("query.dimensionCols", "must be distinct")
        if self.transform.group_by != self.dimension_cols:
            raise ValidationError("query.onDeviceQuery.groupBy", "must equal dimensionCols")
        produced = {agg.output for agg in self.transform.aggregations}
        for spec in self.metric_specs:
            if spec.column not in produced:
                raise ValidationError(
                    "query.metricCols",
                    f"metric column {spec.column!r} not produced by the transform",
                )
            has_targets = len(spec.quantile_targets) > 0
            if (spec.kind == MetricKind.QUANTILE) != has_targets:
                raise ValidationError(
                    "query.metricCols.quantile", "quantile targets exactly when kind is quantile"
                )
            for q in spec.quantile_targets:
                if not 0 < q < 1:
                    raise ValidationError("query.metricCols.quantile.targets", "q must be in (0, 1)")
        if not self.metric_specs:
            raise ValidationError("query.metricCols", "at least one metric required")
        if not 0.0 <= self.client_sampling_rate <= 1.0:
            raise ValidationError("query.clientSamplingRate", "must be in [0, 1]")
        needs_buckets = any(
            s.kind in (MetricKind.COUNT, MetricKind.QUANTILE) for s in self.metric_specs
        )
        if self.bucket_spec is None and any(
            s.kind == MetricKind.QUANTILE for s in self.metric_specs
        ):
            raise ValidationError("query.bucketSpec", "required for quantile metrics")
        if self.bucket_spec is not None:
            self.bucket_spec.validate("query.bucketSpec")
        if len(self.transform.aggregations) != 1:
            raise ValidationError(
                "query.onDeviceQuery.aggregations",
                "exactly one aggregation per query (the histogram value column)",
            )
        if self.transform.aggregations[0].op == "sample" and not (
            self.one_hot or self.tree_metric is not None
        ):
            raise ValidationError(
                "query.onDeviceQuery.aggregations", "sample aggregation is for one-hot queries"
            )
        if self.privacy.mode == PrivacyMode.LOCAL_DP:
            if not self.one_hot:
                raise ValidationError("query.oneHot", "localDP queries must be one-hot")
        if self.one_hot:
            if self.bucket_spec is None:
                raise ValidationError("query.bucketSpec", "one-hot queries need a bucket grid")
            if self.dimension_cols:
                raise ValidationError("query.dimensionCols", "one-hot queries take no dimensions")
        if self.tree_metric is not None:
            spec = self.bucket_spec
            if spec is None or spec.buckets & (spec.buckets - 1) or spec.overflow_bucket:
                raise ValidationError(
                    "query.bucketSpec",
                    "tree quantiles need a power-of-two closed grid (overflow=false)",
                )
            if self.dimension_cols:
                raise ValidationError("query.dimensionCols", "tree queries take no dimensions")
        self.privacy.validate()
        self.schedule.validate()
        _ = needs_buckets  # histogram metrics without buckets fall back to raw dimension keys

    @property
    def tree_metric(self) -> MetricSpec | None:
        for s in self.metric_specs:
            if s.kind == MetricKind.QUANTILE and s.quantile_method == QuantileMethod.TREE:
                return s
        return None


# ---------------------------------------------------------------------------
# Device-side guardrails


@dataclass(frozen=True)
class DeviceGuardrails:
    """Locally enforced limits a device applies before accepting a query."""

    epsilon_ceiling: float = math.inf
    min_k_anon: int = 0
    max_queries_per_day: int = 100
    barred_tables: frozenset[str] = frozenset()


@dataclass(frozen=True)
class DeviceDecision:
    accepted: bool
    reason: str | None = None

    REASON_EPSILON = "epsilon_too_high"
    REASON_K_ANON = "k_anon_too_low"
    REASON_TABLE = "table_barred"
    REASON_QUOTA = "daily_query_quota"


def device_validate(
    query: FederatedQuery, guardrails: DeviceGuardrails, queries_today: int = 0
) -> DeviceDecision:
    """Deterministic accept/reject of a query against device guardrails."""
    if query.transform.source_table in guardrails.barred_tables:
        return DeviceDecision(False, DeviceDecision.REASON_TABLE)
    if query.privacy.epsilon > guardrails.epsilon_ceiling:
        return DeviceDecision(False, DeviceDecision.REASON_EPSILON)
    if query.privacy.k_anon_threshold < guardrails.min_k_anon:
        return DeviceDecision(False, DeviceDecision.REASON_K_ANON)
    if queries_today >= guardrails.max_queries_per_day:
        return DeviceDecision(False, DeviceDecision.REASON_QUOTA)
    return DeviceDecision(True)


# ---------------------------------------------------------------------------
# Config document parsing (JSON; query / privacy / schedule / output sections)

_TOP_KEYS = {"query", "privacy", "schedule", "output"}
_QUERY_KEYS = {
    "queryId",
    "onDeviceQuery",
    "dimensionCols",
    "metricCols",
    "bucketSpec",
    "clientSamplingRate",
    "oneHot",
}
_TRANSFORM_KEYS = {"sourceTable", "filter", "groupBy", "aggregations"}
_PRIVACY_KEYS = {
    "mode",
    "epsilon",
    "delta",
    "centralDP",
    "localDP",
    "sampleThreshold",
    "none",
    "kAnonThreshold",
    "contributionBound",
    "maxBucketsPerClient",
    "stSamplingRate",
}
_SCHEDULE_KEYS = {"releaseIntervalHours", "maxReleases", "minReporters"}
_BUCKET_KEYS = {"low", "high", "buckets", "overflow"}
_MODE_SECTIONS = {
    "centralDP": PrivacyMode.CENTRAL_DP,
    "localDP": PrivacyMode.LOCAL_DP,
    "sampleThreshold": PrivacyMode.SAMPLE_THRESHOLD,
    "none": PrivacyMode.NONE,
}


def _reject_unknown(section: Mapping, allowed: set[str], path: str) -> None:
    unknown = set(section) - allowed
    if unknown:
        raise ValidationError(path, f"unknown keys: {sorted(unknown)}")


def _require(section: Mapping, key: str, path: str) -> Any:
    if key not in section:
        raise ValidationError(f"{path}.{key}", "missing required key")
    return section[key]


def _number(value: Any, path: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ValidationError(path, "must be a number")
    return float(value)


def _integer(value: Any, path: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ValidationError(path, "must be an integer")
    return value


def parse_query_config(document: str | Mapping[str, Any]) -> FederatedQuery:
    """Parse and validate a federated-query config document.

    Accepts either JSON text or an already-loaded mapping. The privacy mode
    may be given flat (``"mode": "centralDP", "epsilon": ...``) or as a
    Fig.-2-style nested section (``"centralDP": {"epsilon": ...}``).
    """
    if isinstance(document, str):
        try:
            doc = json.loads(document)
        except json.JSONDecodeError as exc:
            raise ParseError(f"malformed JSON: {exc}") from exc
    else:
        doc = document
    if not isinstance(doc, Mapping):
        raise ParseError("config document must be a JSON object")

    _reject_unknown(doc, _TOP_KEYS, "$")
    qsec = _require(doc, "query", "$")
    psec = _require(doc, "privacy", "$")
    ssec = _require(doc, "schedule", "$")
    osec = _require(doc, "output", "$")
    for name, sec in (("query", qsec), ("privacy", psec), ("schedule", ssec), ("output", osec)):
        if not isinstance(sec, Mapping):
            raise ValidationError(name, "must be an object")

    _reject_unknown(qsec, _QUERY_KEYS, "query")
    _reject_unknown(psec, _PRIVACY_KEYS, "privacy")
    _reject_unknown(ssec, _SCHEDULE_KEYS, "schedule")
    _reject_unknown(osec, {"sink"}, "output")

    transform = _parse_transform(_require(qsec, "onDeviceQuery", "query"))
    dims = tuple(_require(qsec, "dimensionCols", "query"))
    metric_specs = _parse_metrics(_require(qsec, "metricCols", "query"))
    bucket_spec = None
    if qsec.get("bucketSpec") is not None:
        bucket_spec = _parse_bucket_spec(qsec["bucketSpec"])
    sampling = qsec.get("clientSamplingRate", 1.0)
    privacy = _parse_privacy(psec)
    schedule = ReleaseSchedule(
        release_interval=_number(
            _require(ssec, "releaseIntervalHours", "schedule"), "schedule.releaseIntervalHours"
        )
        * HOUR,
        max_releases=_integer(_require(ssec, "maxReleases", "schedule"), "schedule.maxReleases"),
        min_reporters=_integer(ssec.get("minReporters", 0), "schedule.minReporters"),
    )

    query = FederatedQuery(
        query_id=str(_require(qsec, "queryId", "query")),
        transform=transform,
        dimension_cols=dims,
        metric_specs=metric_specs,
        privacy=privacy,
        schedule=schedule,
        output_sink=str(_require(osec, "sink", "output")),
        bucket_spec=bucket_spec,
        client_sampling_rate=_number(sampling, "query.clientSamplingRate"),
        one_hot=bool(qsec.get("oneHot", False)),
    )
    query.validate()
    return query


def _parse_transform(section: Any) -> LocalTransform:
    if not isinstance(section, Mapping):
        raise ValidationError("query.onDeviceQuery", "must be an object")
    _reject_unknown(section, _TRANSFORM_KEYS, "query.onDeviceQuery")
    clauses = []
    for i, raw in enumerate(section.get("filter", [])):
        path = f"query.onDeviceQuery.filter[{i}]"
        _reject_unknown(raw, {"column", "op", "value"}, path)
        op = _require(raw, "op", path)
        if op not in FILTER_OPS:
            raise ValidationError(f"{path}.op", f"must be one of {FILTER_OPS}")
        clauses.append(FilterClause(str(_require(raw, "column", path)), op, raw.get("value")))
    aggs = []
    for i, raw in enumerate(_require(section, "aggregations", "query.onDeviceQuery")):
        path = f"query.onDeviceQuery.aggregations[{i}]"
        _reject_unknown(raw, {"op", "column"}, path)
        op = _require(raw, "op", path)
        if op not in AGG_OPS:
            raise ValidationError(f"{path}.op", f"must be one of {AGG_OPS}")
        aggs.append(Aggregation(op, str(_require(raw, "column", path))))
    return LocalTransform(
        source_table=str(_require(section, "sourceTable", "query.onDeviceQuery")),
        filter=tuple(clauses),
        group_by=tuple(section.get("groupBy", [])),
        aggregations=tuple(aggs),
    )


def _parse_metrics(section: Any) -> tuple[MetricSpec, ...]:
    if not isinstance(section, Mapping):
        raise ValidationError("query.metricCols", "must be an object")
    specs: list[MetricSpec] = []
    for kind_name, entry in section.items():
        try:
            kind = MetricKind(kind_name)
        except ValueError:
            raise ValidationError("query.metricCols", f"unknown metric kind {kind_name!r}")
        if kind == MetricKind.QUANTILE:
            for i, raw in enumerate(entry):
                path = f"query.metricCols.quantile[{i}]"
                _reject_unknown(raw, {"column", "targets", "method"}, path)
                try:
                    method = QuantileMethod(raw.get("method", "flat"))
                except ValueError:
                    raise ValidationError(f"{path}.method", "must be flat, tree, or multiround")
                specs.append(
                    MetricSpec(
                        kind,
                        str(_require(raw, "column", path)),
                        quantile_targets=tuple(_require(raw, "targets", path)),
                        quantile_method=method,
                    )
                )
        else:
            for col in entry:
                specs.append(MetricSpec(kind, str(col)))
    return tuple(specs)


def _parse_bucket_spec(section: Any) -> BucketSpec:
    if not isinstance(section, Mapping):
        raise ValidationError("query.bucketSpec", "must be an object")
    _reject_unknown(section, _BUCKET_KEYS, "query.bucketSpec")
    return BucketSpec(
        low=_number(_require(section, "low", "query.bucketSpec"), "query.bucketSpec.low"),
        high=_number(_require(section, "high", "query.bucketSpec"), "query.bucketSpec.high"),
        buckets=_integer(
            _require(section, "buckets", "query.bucketSpec"), "query.bucketSpec.buckets"
        ),
        overflow_bucket=bool(section.get("overflow", True)),
    )


def _parse_privacy(section: Mapping) -> PrivacyConfig:
    mode_sections = [k for k in _MODE_SECTIONS if k in section]
    if "mode" in section:
        if mode_sections:
            raise ValidationError("privacy", "give either 'mode' or a nested mode section, not both")
        try:
            mode = PrivacyMode(section["mode"])
        except ValueError:
            raise ValidationError("privacy.mode", f"unknown mode {section['mode']!r}")
        epsilon = _number(_require(section, "epsilon", "privacy"), "privacy.epsilon")
        delta = _number(section.get("delta", 0.0), "privacy.delta")
        st_rate = section.get("stSamplingRate")
    elif len(mode_sections) == 1:
        name = mode_sections[0]
        mode = _MODE_SECTIONS[name]
        sub = section[name]
        if not isinstance(sub, Mapping):
            raise ValidationError(f"privacy.{name}", "must be an object")
        _reject_unknown(sub, {"epsilon", "delta", "samplingRate"}, f"privacy.{name}")
        epsilon = _number(_require(sub, "epsilon", f"privacy.{name}"), f"privacy.{name}.epsilon")
        delta = _number(sub.get("delta", 0.0), f"privacy.{name}.delta")
        st_rate = sub.get("samplingRate", section.get("stSamplingRate"))
    else:
        raise ValidationError("privacy", "exactly one privacy mode must be configured")

    if not epsilon > 0:
        # surfaced against the flat path so misconfigured documents point at one place
        raise ValidationError("privacy.epsilon", "must be positive")
    return PrivacyConfig(
        mode=mode,
        epsilon=epsilon,
        delta=delta,
        k_anon_threshold=_integer(section.get("kAnonThreshold", 0), "privacy.kAnonThreshold"),
        contribution_bound=_number(
            section.get("contributionBound", 1.0), "privacy.contributionBound"
        ),
        max_buckets_per_client=_integer(
            section.get("maxBucketsPerClient", 1), "privacy.maxBucketsPerClient"
        ),
        st_sampling_rate=None if st_rate is None else _number(st_rate, "privacy.stSamplingRate"),
    )


def serialize_query_config(query: FederatedQuery) -> dict[str, Any]:
    """Canonical JSON-ready form of a query; parse(serialize(q)) == q."""
    qsec: dict[str, Any] = {
        "queryId": query.query_id,
        "onDeviceQuery": {
            "sourceTable": query.transform.source_table,
            "filter": [
                {"column": c.column, "op": c.op, "value": c.value} for c in query.transform.filter
            ],
            "groupBy": list(query.transform.group_by),
            "aggregations": [
                {"op": a.op, "column": a.column} for a in query.transform.aggregations
            ],
        },
        "dimensionCols": list(query.dimension_cols),
        "metricCols": _serialize_metrics(query.metric_specs),
        "clientSamplingRate": query.client_sampling_rate,
        "oneHot": query.one_hot,
    }
    if query.bucket_spec is not None:
        qsec["bucketSpec"] = {
            "low": query.bucket_spec.low,
            "high": query.bucket_spec.high,
            "buckets": query.bucket_spec.buckets,
            "overflow": query.bucket_spec.overflow_bucket,
        }
    psec: dict[str, Any] = {
        "mode": query.privacy.mode.value,
        "epsilon": query.privacy.epsilon,
        "delta": query.privacy.delta,
        "kAnonThreshold": query.privacy.k_anon_threshold,
        "contributionBound": query.privacy.contribution_bound,
        "maxBucketsPerClient": query.privacy.max_buckets_per_client,
    }
    if query.privacy.st_sampling_rate is not None:
        psec["stSamplingRate"] = query.privacy.st_sampling_rate
    return {
        "query": qsec,
        "privacy": psec,
        "schedule": {
            "releaseIntervalHours": query.schedule.release_interval / HOUR,
            "maxReleases": query.schedule.max_releases,
            "minReporters": query.schedule.min_reporters,
        },
        "output": {"sink": query.output_sink},
    }


def _serialize_metrics(specs: tuple[MetricSpec, ...]) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for spec in specs:
        if spec.kind == MetricKind.QUANTILE:
            out.setdefault("quantile", []).append(
                {
                    "column": spec.column,
                    "targets": list(spec.quantile_targets),
                    "method": spec.quantile_method.value,
                }
            )
        else:
            out.setdefault(spec.kind.value, []).append(spec.column)
    return out
