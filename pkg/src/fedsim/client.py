"""Device-side runtime: local store, selection and execution phases.

Each simulated device is an independent state machine. All of its random
decisions (sampling coins, check-in delays, key material, report nonces) are
hash-derived from (root seed, client id, purpose), so a device replays
identically regardless of how the surrounding simulation interleaves events,
and a retried report carries the same nonce and, for local-DP queries, the
same perturbed value as the original attempt.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np
from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PrivateKey

from . import attestation, dp, keys, quantiles, rand
from .errors import QuotaExhausted, SchemaError
from .query import (
    Aggregation,
    DeviceGuardrails,
    FederatedQuery,
    PrivacyMode,
    device_validate,
)
from .report import MiniHistogram

DAY = 86400.0
HOUR = 3600.0

DEFAULT_RETENTION = 30 * DAY
DEFAULT_BATCH_SIZE = 10
MAX_POLLS_PER_DAY = 2


class TableView(Protocol):
    """What the transform needs from a data store."""

    def has_table(self, table: str) -> bool: ...

    def table_columns(self, table: str) -> set[str]: ...

    def column_values(self, table: str, column: str) -> np.ndarray: ...

    def record_count(self, table: str) -> int: ...


class LocalStore:
    """Record-oriented on-device store with a retention limit."""

    def __init__(self, retention_limit: float = DEFAULT_RETENTION):
        self.retention_limit = retention_limit
        self.tables: dict[str, list[dict]] = {}
        self._timestamps: dict[str, list[float]] = {}

    def add_record(self, table: str, record: dict, ts: float) -> None:
        self.tables.setdefault(table, []).append(record)
        self._timestamps.setdefault(table, []).append(ts)

    def has_table(self, table: str) -> bool:
        return table in self.tables

    def table_columns(self, table: str) -> set[str]:
        cols: set[str] = set()
        for rec in self.tables.get(table, []):
            cols.update(rec.keys())
        return cols

    def column_values(self, table: str, column: str) -> np.ndarray:
        return np.asarray([rec.get(column) for rec in self.tables.get(table, [])])

    def record_count(self, table: str) -> int:
        return len(self.tables.get(table, []))

    def enforce_retention(self, now: float) -> int:
        purged = 0
        for table in list(self.tables):
            recs = self.tables[table]
            stamps = self._timestamps[table]
            keep = [i for i, ts in enumerate(stamps) if now - ts <= self.retention_limit]
            purged += len(recs) - len(keep)
            self.tables[table] = [recs[i] for i in keep]
            self._timestamps[table] = [stamps[i] for i in keep]
        return purged


class ArrayTableView:
    """Columnar single-table view used by the fleet engine (zero-copy slices)."""

    def __init__(self, table: str, columns: dict[str, np.ndarray]):
        self._table = table
        self._columns = columns
        n = {len(v) for v in columns.values()}
        self._count = n.pop() if n else 0

    def has_table(self, table: str) -> bool:
        return table == self._table

    def table_columns(self, table: str) -> set[str]:
        return set(self._columns) if table == self._table else set()

    def column_values(self, table: str, column: str) -> np.ndarray:
        return self._columns[column]

    def record_count(self, table: str) -> int:
        return self._count if table == self._table else 0


def enforce_retention(store: LocalStore, now: float) -> int:
    """Purge records older than the store's retention limit; idempotent."""
    return store.enforce_retention(now)


@dataclass
class ClientState:
    """Mutable per-device protocol state."""

    client_id: int
    pending: dict[str, MiniHistogram] = field(default_factory=dict)
    acked: set[str] = field(default_factory=set)
    poll_day: int = -1
    polls_today: int = 0
    queries_today: int = 0
    next_checkin: float = 0.0
    attempt_seq: int = 0

    def apply_ack(self, query_id: str) -> None:
        self.pending.pop(query_id, None)
        self.acked.add(query_id)

    def expire_pending(self, query_id: str) -> None:
        self.pending.pop(query_id, None)


def report_nonce(seed: int, client_id: int, query_id: str) -> int:
    """Stable per-(client, query) report identifier used for deduplication."""
    return rand.hash64(seed, "nonce", client_id, query_id)


# ---------------------------------------------------------------------------
# Selection phase


def selection_phase(
    state: ClientState,
    active_queries: Sequence[FederatedQuery],
    guardrails: DeviceGuardrails,
    store: TableView,
    now: float,
    seed: int,
) -> list[FederatedQuery]:
    """Decide which queries this check-in will execute.

    A query is selected when it passes the device guardrails, wins the
    client-sampling coin (and the sample-and-threshold participation coin
    when that mode is on), and still has unreported local data. Reports
    already pending from an interrupted attempt are always retried.
    """
    day = int(now // DAY)
    if day != state.poll_day:
        state.poll_day = day
        state.polls_today = 0
        state.queries_today = 0
    if state.polls_today >= MAX_POLLS_PER_DAY:
        raise QuotaExhausted(f"client {state.client_id} spent its daily poll budget")
    state.polls_today += 1

    selected: list[FederatedQuery] = []
    for query in active_queries:
        qid = query.query_id
        if qid in state.acked:
            continue
        if qid in state.pending:
            selected.append(query)
            continue
        decision = device_validate(query, guardrails, state.queries_today)
        if not decision.accepted:
            continue
        if query.client_sampling_rate < 1.0:
            if rand.coin(seed, "sampling", state.client_id, qid) >= query.client_sampling_rate:
                continue
        if query.privacy.mode == PrivacyMode.SAMPLE_THRESHOLD:
            if not dp.st_participation(
                state.client_id, qid, query.privacy.st_sampling_rate or 1.0, seed
            ):
                continue
        if not store.has_table(query.transform.source_table):
            continue
        if store.record_count(query.transform.source_table) == 0:
            continue
        state.queries_today += 1
        selected.append(query)
    return selected


# ---------------------------------------------------------------------------
# Local transform execution


def _filter_mask(store: TableView, query: FederatedQuery) -> np.ndarray | None:
    table = query.transform.source_table
    mask: np.ndarray | None = None
    for clause in query.transform.filter:
        col = store.column_values(table, clause.column)
        if clause.op == "==":
            m = col == clause.value
        elif clause.op == "!=":
            m = col != clause.value
        elif clause.op == "<":
            m = col < clause.value
        elif clause.op == "<=":
            m = col <= clause.value
        elif clause.op == ">":
            m = col > clause.value
        else:
            m = col >= clause.value
        mask = m if mask is None else (mask & m)
    return mask


def _scalar_value(agg: Aggregation, values: np.ndarray) -> float:
    if agg.op == "count":
        return float(len(values))
    if agg.op == "sample":
        return float(values[0])
    return float(np.sum(values))


def execute_transform(
    store: TableView, query: FederatedQuery, seed: int = 0, now: float = 0.0
) -> MiniHistogram:
    """Run the on-device transform: filter, group by dimensions, aggregate.

    Continuous metric values are bucketized through the query's bucket grid;
    the bucket label becomes the innermost dimension of each entry key. The
    result is truncated to the query's per-client bucket cap, largest
    contributions first.
    """
    t = query.transform
    if not store.has_table(t.source_table):
        raise SchemaError(f"source table {t.source_table!r} not on device")
    agg = t.aggregations[0]
    single_value = query.one_hot or query.tree_metric is not None
    available = store.table_columns(t.source_table)
    needed = set(t.group_by) | {c.column for c in t.filter}
    if agg.op != "count" or (query.bucket_spec is not None and not single_value):
        needed.add(agg.column)
    missing = needed - available
    if missing and store.record_count(t.source_table) > 0:
        raise SchemaError(f"missing columns {sorted(missing)} in {t.source_table!r}")

    out = MiniHistogram(query.query_id, {}, 0)  # nonce assigned by build_report
    if store.record_count(t.source_table) == 0:
        return out

    mask = _filter_mask(store, query)
    metric_col = agg.column

    if single_value:
        if agg.op == "count":
            count = (
                int(np.count_nonzero(mask))
                if mask is not None
                else store.record_count(t.source_table)
            )
            if count == 0:
                return out
            value = float(count)
        else:
            vals = store.column_values(t.source_table, metric_col)
            if mask is not None:
                vals = vals[mask]
            if len(vals) == 0:
                return out
            value = _scalar_value(agg, vals)
        spec = query.bucket_spec
        assert spec is not None
        if query.tree_metric is not None:
            depth = int(math.log2(spec.buckets))
            for level, bucket in quantiles.tree_path(value, spec.low, spec.high, depth):
                out.entries[f"{level}:{bucket}"] = (1.0, 1)
        else:
            out.entries[spec.label(spec.index_of(value))] = (1.0, 1)
        return out

    if not t.group_by and query.bucket_spec is not None and agg.op in ("count", "sum"):
        # undimensioned histogram: bucket index per record, then count/sum
        vals = store.column_values(t.source_table, metric_col)
        vals = np.asarray(vals, dtype=float)
        if mask is not None:
            vals = vals[mask]
        if len(vals) == 0:
            return out
        spec = query.bucket_spec
        labels = spec.labels()
        if len(vals) <= 32:
            # typical devices hold a handful of records; a plain loop beats
            # numpy dispatch overhead by an order of magnitude here
            acc: dict[int, float] = {}
            cnt: dict[int, int] = {}
            counting = agg.op == "count"
            for v in vals.tolist():
                b = spec.index_of(v)
                acc[b] = acc.get(b, 0.0) + (1.0 if counting else v)
                cnt[b] = cnt.get(b, 0) + 1
            for b in sorted(acc):
                out.entries[labels[b]] = (acc[b], cnt[b])
            return _truncate(out, query)
        idx = np.clip(((vals - spec.low) / spec.width).astype(np.int64), 0, spec.buckets - 1)
        idx[vals >= spec.high] = spec.buckets - 1
        counts = np.bincount(idx, minlength=spec.buckets)
        if agg.op == "count":
            sums = counts
        else:
            sums = np.bincount(idx, weights=vals, minlength=spec.buckets)
        for b in np.nonzero(counts)[0]:
            out.entries[labels[int(b)]] = (float(sums[b]), int(counts[b]))
        return _truncate(out, query)

    # general record-at-a-time path (grouped dimensions)
    table = t.source_table
    n = store.record_count(table)
    dim_cols = [store.column_values(table, c) for c in t.group_by]
    needs_values = agg.op != "count" or query.bucket_spec is not None
    metric_vals = store.column_values(table, metric_col) if needs_values else None
    spec = query.bucket_spec
    acc: dict[str, float] = {}
    cnt: dict[str, int] = {}
    for i in range(n):
        if mask is not None and not mask[i]:
            continue
        parts = [str(col[i]) for col in dim_cols]
        if spec is not None:
            parts.append(spec.label(spec.index_of(float(metric_vals[i]))))
        key = keys.encode_key(parts)
        if agg.op == "count":
            acc[key] = acc.get(key, 0.0) + 1.0
        else:
            acc[key] = acc.get(key, 0.0) + float(metric_vals[i])
        cnt[key] = cnt.get(key, 0) + 1
    for key in sorted(acc):
        out.entries[key] = (acc[key], cnt[key])
    return _truncate(out, query)


def _truncate(hist: MiniHistogram, query: FederatedQuery) -> MiniHistogram:
    return hist.truncated(query.privacy.max_buckets_per_client)


def build_report(
    store: TableView, query: FederatedQuery, state: ClientState, seed: int, now: float
) -> MiniHistogram:
    """Transform plus client-side privacy steps; stable across retries."""
    hist = execute_transform(store, query, seed=seed, now=now)
    hist.report_nonce = report_nonce(seed, state.client_id, query.query_id)
    if query.privacy.mode == PrivacyMode.LOCAL_DP and hist.entries:
        spec = query.bucket_spec
        assert spec is not None
        params = dp.LdpParams(query.privacy.epsilon, spec.buckets)
        true_label = next(iter(hist.entries))
        true_index = spec.labels().index(true_label)
        rng = rand.generator(seed, "ldp", state.client_id, query.query_id)
        reported = dp.ldp_perturb(true_index, params, rng)
        hist.entries = {spec.label(reported): (1.0, 1)}
    return hist


# ---------------------------------------------------------------------------
# Execution phase


class Transport(Protocol):
    """Client-facing side of the untrusted forwarder."""

    def fetch_quote(self, query_id: str) -> attestation.AttestationQuote | None: ...

    def submit_report(
        self, report: attestation.EncryptedReport, client_ref: int, sent_at: float
    ) -> None: ...


@dataclass(frozen=True)
class SendOutcome:
    query_id: str
    status: str  # sent | no_data | aborted | interrupted | unavailable
    reason: str | None = None


def execution_phase(
    state: ClientState,
    store: TableView,
    selected: Sequence[FederatedQuery],
    transport: Transport,
    registry: attestation.TrustedBinaryRegistry,
    seed: int,
    now: float,
    batch_size: int = DEFAULT_BATCH_SIZE,
    batch_fail_prob: float = 0.0,
) -> list[SendOutcome]:
    """Report each selected query to its TSA, in batches, attestation first.

    A failed batch (the simulated interruption / 10-second timeout) leaves
    the current and all later batches pending; they retry at the next
    check-in with the same nonces. A quote that fails verification aborts
    that query before anything is transmitted.
    """
    outcomes: list[SendOutcome] = []
    state.attempt_seq += 1
    attempt = state.attempt_seq
    for batch_start in range(0, len(selected), batch_size):
        batch = selected[batch_start : batch_start + batch_size]
        batch_idx = batch_start // batch_size
        if batch_fail_prob > 0.0 and rand.coin(
            seed, "batchfail", state.client_id, attempt, batch_idx
        ) < batch_fail_prob:
            for query in selected[batch_start:]:
                if query.query_id not in state.pending:
                    state.pending[query.query_id] = build_report(
                        store, query, state, seed, now
                    )
                outcomes.append(SendOutcome(query.query_id, "interrupted"))
            break
        for query in batch:
            outcomes.append(
                _send_one(state, store, query, transport, registry, seed, now, attempt)
            )
    return outcomes


def _send_one(
    state: ClientState,
    store: TableView,
    query: FederatedQuery,
    transport: Transport,
    registry: attestation.TrustedBinaryRegistry,
    seed: int,
    now: float,
    attempt: int,
) -> SendOutcome:
    qid = query.query_id
    hist = state.pending.get(qid)
    if hist is None:
        hist = build_report(store, query, state, seed, now)
        if not hist.entries:
            state.apply_ack(qid)  # nothing to report for this query
            return SendOutcome(qid, "no_data")
        state.pending[qid] = hist

    quote = transport.fetch_quote(qid)
    if quote is None:
        return SendOutcome(qid, "unavailable")
    expected = attestation.params_hash_for_query(query)
    verdict = attestation.verify_quote(quote, registry, expected)
    if not verdict.accepted:
        return SendOutcome(qid, "aborted", verdict.reason)

    kex_private = X25519PrivateKey.from_private_bytes(
        rand.hash_bytes(seed, "kex", state.client_id, qid, attempt)
    )
    channel = attestation.establish_channel(kex_private, quote, now)
    # each session key encrypts exactly one message, so a fixed nonce is safe
    enc = attestation.encrypt_report(channel, hist.to_payload(), b"\x00" * 12, qid)
    transport.submit_report(enc, state.client_id, now)
    return SendOutcome(qid, "sent")


# ---------------------------------------------------------------------------
# Check-in scheduling


def draw_checkin_delay(
    seed: int,
    client_id: int,
    now: float,
    device_class: str = "regular",
    checkin_low: float = 14 * HOUR,
    checkin_high: float = 16 * HOUR,
    tail_mean: float = 48 * HOUR,
    tail_min: float = 14 * HOUR,
) -> float:
    """Randomized delay until the next check-in.

    Regular devices wake after a uniform 14-16h delay; long-tail devices
    after an exponential delay (mean 48h) clamped to at least 14h.
    """
    u = rand.coin(seed, "sched", client_id, int(now))
    if device_class == "regular":
        return checkin_low + (checkin_high - checkin_low) * u
    return max(tail_min, -tail_mean * math.log(1.0 - u))


def schedule_next_checkin(
    state: ClientState,
    now: float,
    seed: int,
    device_class: str = "regular",
    checkin_low: float = 14 * HOUR,
    checkin_high: float = 16 * HOUR,
    tail_mean: float = 48 * HOUR,
    tail_min: float = 14 * HOUR,
) -> float:
    state.next_checkin = now + draw_checkin_delay(
        seed, state.client_id, now, device_class, checkin_low, checkin_high, tail_mean, tail_min
    )
    return state.next_checkin
