"""Deterministic discrete-event simulation of the full federated pipeline.

One logical thread drives a time-ordered event queue (ties broken by event
kind, then insertion order) over the whole fleet: client check-ins, report
deliveries, TSA snapshots and releases, aggregator heartbeats, failure
injections, and metric sampling. Client check-ins are batched into
one-minute cohort ticks so the queue holds system events plus one tick per
active minute rather than one entry per device.

Every random draw is keyed by (scenario seed, purpose, entity ids), so the
entire run is a pure function of (scenario, seed): re-running produces
byte-identical output files.

Acknowledgement durability: a TSA acks a report at ingest, but the
acknowledgement is buffered on the aggregator and delivered to the client
only after the next encrypted snapshot covers it. A crash therefore never
loses acknowledged data - unacknowledged clients simply retry at their next
check-in - which is what makes crash recovery exactly equivalent to a
failure-free run. The one exception is snapshot-key loss, after which
acknowledged-but-unsnapshotted data is gone and only unacknowledged reports
flow back in.
"""

from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from . import attestation, client as client_rt, rand
from .client import ClientState, MiniHistogram
from .errors import BudgetExhausted, ConfigError, EmptyHistogram, QuotaExhausted
from .orchestrator import (
    HEARTBEAT_INTERVAL,
    AggregatorNode,
    Coordinator,
    Forwarder,
    SnapshotStore,
)
from .population import CLASS_LONG_TAIL, HOUR, PopulationConfig, generate_population
from .quantiles import HierarchicalHistogram, quantile_from_flat, quantile_from_tree
from .query import DeviceGuardrails, FederatedQuery, MetricKind, parse_query_config
from .results import ExperimentResult, compute_tvd, emit
from .tsa import SnapshotKeyGroup, TrustedAggregator


class EventKind(IntEnum):
    KILL_AGGREGATOR = 0
    KILL_KEY_REPLICAS = 1
    RESTART_COORDINATOR = 2
    HEARTBEAT = 3
    DETECT = 4
    REGISTER = 5
    COHORT = 6
    DELIVERY = 7
    SNAPSHOT = 8
    RELEASE = 9
    ACK = 10
    SAMPLE = 11


@dataclass(frozen=True)
class FailureSpec:
    kind: str  # kill_aggregator | kill_key_replicas | restart_coordinator
    at_hours: float
    aggregator: str | None = None
    count: int = 0

    def to_dict(self) -> dict:
        doc: dict[str, Any] = {"kind": self.kind, "atHours": self.at_hours}
        if self.aggregator is not None:
            doc["aggregator"] = self.aggregator
        if self.count:
            doc["count"] = self.count
        return doc

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "FailureSpec":
        known = {"kind", "atHours", "aggregator", "count"}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown failure keys: {sorted(unknown)}")
        return cls(
            kind=doc["kind"],
            at_hours=float(doc["atHours"]),
            aggregator=doc.get("aggregator"),
            count=int(doc.get("count", 0)),
        )


@dataclass
class Scenario:
    """Declarative description of one experiment run."""

    name: str
    seed: int
    horizon_hours: float
    population: PopulationConfig
    queries: list[dict]  # [{"launchHours": h, "document": {...}}]
    aggregators: int = 2
    batch_size: int = 10
    batch_fail_prob: float = 0.01
    band_split_ms: float | None = None
    band_query: str | None = None
    sample_interval_hours: float = 1.0
    snapshot_interval_s: float = 300.0
    key_replicas: int = 5
    failures: list[FailureSpec] = field(default_factory=list)
    guardrails: DeviceGuardrails = field(default_factory=DeviceGuardrails)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "seed": self.seed,
            "horizonHours": self.horizon_hours,
            "population": self.population.to_dict(),
            "queries": self.queries,
            "aggregators": self.aggregators,
            "batchSize": self.batch_size,
            "batchFailProb": self.batch_fail_prob,
            "bandSplitMs": self.band_split_ms,
            "bandQuery": self.band_query,
            "sampleIntervalHours": self.sample_interval_hours,
            "snapshotIntervalSeconds": self.snapshot_interval_s,
            "keyReplicas": self.key_replicas,
            "failures": [f.to_dict() for f in self.failures],
        }

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "Scenario":
        known = {
            "name", "seed", "horizonHours", "population", "queries", "aggregators",
            "batchSize", "batchFailProb", "bandSplitMs", "bandQuery",
            "sampleIntervalHours", "snapshotIntervalSeconds", "keyReplicas", "failures",
        }
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown scenario keys: {sorted(unknown)}")
        return cls(
            name=str(doc.get("name", "scenario")),
            seed=int(doc["seed"]),
            horizon_hours=float(doc["horizonHours"]),
            population=PopulationConfig.from_dict(doc["population"]),
            queries=list(doc["queries"]),
            aggregators=int(doc.get("aggregators", 2)),
            batch_size=int(doc.get("batchSize", 10)),
            batch_fail_prob=float(doc.get("batchFailProb", 0.01)),
            band_split_ms=doc.get("bandSplitMs"),
            band_query=doc.get("bandQuery"),
            sample_interval_hours=float(doc.get("sampleIntervalHours", 1.0)),
            snapshot_interval_s=float(doc.get("snapshotIntervalSeconds", 300.0)),
            key_replicas=int(doc.get("keyReplicas", 5)),
            failures=[FailureSpec.from_dict(f) for f in doc.get("failures", [])],
        )

    @classmethod
    def from_file(cls, path: str | Path) -> "Scenario":
        return cls.from_dict(json.loads(Path(path).read_text()))


_COHORT_BUCKET = 60.0  # seconds per check-in cohort tick


class SimulationRunner:
    """Executes one scenario; also serves as the clients' transport."""

    def __init__(
        self,
        scenario: Scenario,
        out_dir: str | Path | None = None,
        trusted_binaries: list[tuple[bytes, str]] | None = None,
    ):
        self.scenario = scenario
        self.seed = scenario.seed
        self.horizon = scenario.horizon_hours * HOUR
        self.out_dir = Path(out_dir) if out_dir is not None else None

        self.queries: list[FederatedQuery] = []
        self.launch_at: dict[str, float] = {}
        for entry in scenario.queries:
            query = parse_query_config(entry["document"])
            if query.query_id in self.launch_at:
                raise ConfigError(f"duplicate query id {query.query_id!r} in scenario")
            self.queries.append(query)
            self.launch_at[query.query_id] = float(entry.get("launchHours", 0.0)) * HOUR
        self.query_ids = [q.query_id for q in self.queries]
        self.query_index = {qid: i for i, qid in enumerate(self.query_ids)}

        self.population, self.ground_truth = generate_population(
            scenario.population.n, scenario.seed, scenario.population
        )
        self.root = attestation.RootOfTrust(scenario.seed)
        self.registry = attestation.TrustedBinaryRegistry(self.root.public_bytes)
        if trusted_binaries is None:
            self.registry.register(
                attestation.binary_hash_of(TrustedAggregator.BINARY_LABEL),
                TrustedAggregator.BINARY_LABEL,
            )
        else:
            # externally supplied audit list; clients trust exactly these
            for binary_hash, label in trusted_binaries:
                self.registry.register(binary_hash, label)
        self.coordinator = Coordinator(self.out_dir, self.root, scenario.seed)
        for i in range(scenario.aggregators):
            self.coordinator.add_aggregator(AggregatorNode(f"agg-{i:03d}"))
        self.forwarder = Forwarder(self.coordinator)
        self.snapshot_store = SnapshotStore()
        self.key_group = SnapshotKeyGroup("keygroup-0", scenario.seed, scenario.key_replicas)

        n = self.population.n
        self.acked_bits = np.zeros(n, dtype=np.int64)
        self.attempt_seq = np.zeros(n, dtype=np.int32)
        self.poll_day = np.full(n, -1, dtype=np.int32)
        self.polls_today = np.zeros(n, dtype=np.int16)
        self.queries_today = np.zeros(n, dtype=np.int16)
        self.next_checkin = self.population.first_checkin.copy()
        self.pending: dict[int, dict[str, MiniHistogram]] = {}

        # evaluation accumulators, filled lazily as queries launch; a client
        # counts toward coverage once per query even if a crash forces its
        # report to be re-delivered to a successor TSA
        self.gt_points: dict[str, np.ndarray] = {}
        self.gt_totals: dict[str, float] = {}
        self.ingested_bits = np.zeros(n, dtype=np.int64)
        self.ingested_points: dict[str, float] = {}
        self.band_arrays: dict[str, dict[str, np.ndarray]] = {}
        self.band_ingested: dict[str, dict[str, float]] = {}
        self.result = ExperimentResult(scenario=scenario.to_dict())

        self._heap: list[tuple[float, int, int, Any]] = []
        self._seq = 0
        self._submit_seq = 0
        self._cohort: dict[int, list[int]] = {}
        self._cohort_scheduled: set[int] = set()
        self._launched: list[str] = []

    # ------------------------------------------------------------------
    # Event queue plumbing

    def _push(self, time: float, kind: EventKind, payload: Any = None) -> None:
        if time > self.horizon:
            return
        self._seq += 1
        heapq.heappush(self._heap, (time, int(kind), self._seq, payload))

    def _schedule_client(self, cid: int, when: float) -> None:
        if not math.isfinite(when) or when > self.horizon:
            return
        self.next_checkin[cid] = when
        minute = int(when // _COHORT_BUCKET)
        self._cohort.setdefault(minute, []).append(cid)
        if minute not in self._cohort_scheduled:
            self._cohort_scheduled.add(minute)
            self._push(minute * _COHORT_BUCKET, EventKind.COHORT, minute)

    # ------------------------------------------------------------------
    # Run loop

    def run(self) -> ExperimentResult:
        sc = self.scenario
        for qid in self.query_ids:
            self._push(self.launch_at[qid], EventKind.REGISTER, qid)
        for agg_id in self.coordinator.aggregators:
            self._push(HEARTBEAT_INTERVAL, EventKind.HEARTBEAT, agg_id)
            self._push(sc.snapshot_interval_s, EventKind.SNAPSHOT, agg_id)
        self._push(HEARTBEAT_INTERVAL, EventKind.DETECT, None)
        self._push(0.0, EventKind.SAMPLE, None)
        for spec in sc.failures:
            kind = {
                "kill_aggregator": EventKind.KILL_AGGREGATOR,
                "kill_key_replicas": EventKind.KILL_KEY_REPLICAS,
                "restart_coordinator": EventKind.RESTART_COORDINATOR,
            }.get(spec.kind)
            if kind is None:
                raise ConfigError(f"unknown failure kind {spec.kind!r}")
            self._push(spec.at_hours * HOUR, kind, spec)
        first = self.population.first_checkin
        for cid in np.nonzero(np.isfinite(first) & (first <= self.horizon))[0]:
            self._schedule_client(int(cid), float(first[cid]))

        handlers = {
            EventKind.KILL_AGGREGATOR: self._on_kill_aggregator,
            EventKind.KILL_KEY_REPLICAS: self._on_kill_keys,
            EventKind.RESTART_COORDINATOR: self._on_restart_coordinator,
            EventKind.HEARTBEAT: self._on_heartbeat,
            EventKind.DETECT: self._on_detect,
            EventKind.REGISTER: self._on_register,
            EventKind.COHORT: self._on_cohort,
            EventKind.DELIVERY: self._on_delivery,
            EventKind.SNAPSHOT: self._on_snapshot,
            EventKind.RELEASE: self._on_release,
            EventKind.ACK: self._on_ack,
            EventKind.SAMPLE: self._on_sample,
        }
        while self._heap:
            time, kind, _seq, payload = heapq.heappop(self._heap)
            handlers[EventKind(kind)](time, payload)

        self._finalize()
        return self.result

    def _finalize(self) -> None:
        for qid in self._launched:
            tsa = self.coordinator.tsa_for(qid)
            if tsa is not None:
                self.result.final_histograms[qid] = tsa.state.plain_histogram()
                self.result.final_reporters[qid] = tsa.state.reporters
            total = self.gt_totals.get(qid, 0.0)
            self.result.final_coverage[qid] = (
                self.ingested_points.get(qid, 0.0) / total if total > 0 else 0.0
            )
        self.coordinator.write_status_files(self.horizon)
        if self.out_dir is not None:
            emit(self.result, self.out_dir)

    # ------------------------------------------------------------------
    # Client transport (used by client_rt.execution_phase)

    def fetch_quote(self, query_id: str) -> attestation.AttestationQuote | None:
        return self.forwarder.fetch_quote(query_id)

    def submit_report(
        self, report: attestation.EncryptedReport, client_ref: int, sent_at: float
    ) -> None:
        self._submit_seq += 1
        rtt_s = (
            math.exp(
                self.population.rtt_mu[client_ref]
                + self.population.config.rtt_sigma_within
                * rand.normal(self.seed, "netdelay", client_ref, self._submit_seq)
            )
            / 1000.0
        )
        self._push(sent_at + 3.0 * rtt_s, EventKind.DELIVERY, (report, client_ref))

    # ------------------------------------------------------------------
    # Handlers

    def _on_register(self, now: float, qid: str) -> None:
        query = self.queries[self.query_index[qid]]
        self.coordinator.register_query(query, now)
        self._launched.append(qid)
        gt = self.ground_truth.for_query(query)
        self.gt_points[qid] = gt.points_per_client
        self.gt_totals[qid] = gt.total_points
        self.ingested_points[qid] = 0.0
        if self.scenario.band_split_ms is not None and qid == (
            self.scenario.band_query or self.query_ids[0]
        ):
            bands = self.ground_truth.band_points(query, self.scenario.band_split_ms)
            self.band_arrays[qid] = bands
            self.band_ingested[qid] = {"low": 0.0, "high": 0.0}
        self._push(now + query.schedule.release_interval, EventKind.RELEASE, qid)

    def _active_queries(self) -> list[FederatedQuery]:
        return self.coordinator.active_broadcast()

    def _on_cohort(self, now: float, minute: int) -> None:
        self._cohort_scheduled.discard(minute)
        cids = self._cohort.pop(minute, [])
        if not cids:
            return
        cids.sort(key=lambda c: (self.next_checkin[c], c))
        active = self._active_queries()
        active_bits = 0
        for q in active:
            idx = self.query_index.get(q.query_id)
            if idx is not None:
                active_bits |= 1 << idx
        for cid in cids:
            t = float(self.next_checkin[cid])
            if int(t // _COHORT_BUCKET) != minute or t > self.horizon:
                continue
            self._process_checkin(cid, t, active, active_bits)

    def _process_checkin(
        self, cid: int, now: float, active: list[FederatedQuery], active_bits: int
    ) -> None:
        pend = self.pending.get(cid)
        bits = int(self.acked_bits[cid])
        # fast path: nothing new to report and nothing pending
        if pend is None and (
            (bits & active_bits) == active_bits or self.population.n_records[cid] == 0
        ):
            self._reschedule(cid, now)
            return

        acked = {self.query_ids[i] for i in range(len(self.query_ids)) if bits & (1 << i)}
        state = ClientState(
            client_id=cid,
            pending=pend if pend is not None else {},
            acked=acked,
            poll_day=int(self.poll_day[cid]),
            polls_today=int(self.polls_today[cid]),
            queries_today=int(self.queries_today[cid]),
            next_checkin=now,
            attempt_seq=int(self.attempt_seq[cid]),
        )
        store = self.population.store_view(cid)
        try:
            selected = client_rt.selection_phase(
                state, active, self.scenario.guardrails, store, now, self.seed
            )
        except QuotaExhausted:
            selected = []
        if selected:
            client_rt.execution_phase(
                state,
                store,
                selected,
                self,
                self.registry,
                self.seed,
                now,
                self.scenario.batch_size,
                self.scenario.batch_fail_prob,
            )
        new_bits = 0
        for qid in state.acked:
            new_bits |= 1 << self.query_index[qid]
        self.acked_bits[cid] = new_bits
        self.poll_day[cid] = state.poll_day
        self.polls_today[cid] = state.polls_today
        self.queries_today[cid] = state.queries_today
        self.attempt_seq[cid] = state.attempt_seq
        if state.pending:
            self.pending[cid] = state.pending
        else:
            self.pending.pop(cid, None)
        self._reschedule(cid, now)

    def _reschedule(self, cid: int, now: float) -> None:
        cfg = self.population.config
        delay = client_rt.draw_checkin_delay(
            self.seed,
            cid,
            now,
            CLASS_LONG_TAIL if self.population.is_tail[cid] else "regular",
            checkin_low=cfg.checkin_low_hours * HOUR,
            checkin_high=cfg.checkin_high_hours * HOUR,
            tail_mean=cfg.tail_mean_hours * HOUR,
            tail_min=cfg.tail_min_hours * HOUR,
        )
        self._schedule_client(cid, now + delay)

    def _on_delivery(self, now: float, payload: tuple) -> None:
        report, cid = payload
        status, reason, fresh = self.forwarder.route_report(report, now)
        qid = report.query_id
        if status == "ack":
            qbit = 1 << self.query_index[qid]
            if fresh and not (self.ingested_bits[cid] & qbit):
                self.ingested_bits[cid] |= qbit
                self.ingested_points[qid] += float(self.gt_points[qid][cid])
                if qid in self.band_arrays:
                    for band, arr in self.band_arrays[qid].items():
                        self.band_ingested[qid][band] += float(arr[cid])
            node = self.coordinator.node_for(qid)
            if node is not None and node.alive:
                node.ack_buffer.append((cid, qid, "ack"))
        elif reason == "query_closed":
            self._push(now + 0.05, EventKind.ACK, [(cid, qid, "closed")])
        elif reason == "auth_failure":
            self.result.anomalies.append(
                {"t_hours": now / HOUR, "kind": "auth_failure", "query_id": qid}
            )
        # unknown_query: aggregator is down or reassigning; client retries later

    def _on_snapshot(self, now: float, agg_id: str) -> None:
        node = self.coordinator.aggregators.get(agg_id)
        self._push(now + self.scenario.snapshot_interval_s, EventKind.SNAPSHOT, agg_id)
        if node is None or not node.alive:
            return
        for qid in sorted(node.hosted):
            tsa = node.hosted[qid]
            if tsa.state.dirty:
                try:
                    snap = tsa.snapshot(self.key_group, now)
                    self.snapshot_store.put(snap)
                except Exception:
                    self.result.anomalies.append(
                        {"t_hours": now / HOUR, "kind": "snapshot_key_lost", "query_id": qid}
                    )
        if node.ack_buffer:
            self._push(now + 0.05, EventKind.ACK, list(node.ack_buffer))
            node.ack_buffer.clear()

    def _on_ack(self, now: float, items: list[tuple[int, str, str]]) -> None:
        for cid, qid, _status in items:
            pend = self.pending.get(cid)
            if pend is not None:
                pend.pop(qid, None)
                if not pend:
                    self.pending.pop(cid, None)
            self.acked_bits[cid] |= 1 << self.query_index[qid]

    def _on_release(self, now: float, qid: str) -> None:
        record = self.coordinator.registry.get(qid)
        if record is None or record.status == "complete":
            return
        tsa = self.coordinator.tsa_for(qid)
        query = self.queries[self.query_index[qid]]
        if tsa is not None:
            try:
                release = tsa.maybe_release(now)
            except BudgetExhausted:
                self.coordinator.mark_complete(qid, now)
                return
            if release is not None:
                published = self.coordinator.publish(release, now)
                self.result.releases.append(published)
                self._record_release_metrics(now, query, release)
        self._push(now + query.schedule.release_interval, EventKind.RELEASE, qid)

    def _record_release_metrics(self, now: float, query: FederatedQuery, release) -> None:
        gt = self.ground_truth.for_query(query)
        v = {k: s for k, (s, _c) in release.entries.items()}
        try:
            tvd = compute_tvd(v, gt.w)
        except EmptyHistogram:
            tvd = 1.0
        self.result.tvd_rows.append(
            {
                "t_hours": now / HOUR,
                "query_id": query.query_id,
                "mode": release.mode,
                "tvd": tvd,
            }
        )
        spec = query.bucket_spec
        for metric in query.metric_specs:
            if metric.kind != MetricKind.QUANTILE or spec is None:
                continue
            for q in metric.quantile_targets:
                truth = gt.exact_quantile(q)
                try:
                    if metric.quantile_method.value == "tree":
                        depth = int(math.log2(spec.buckets))
                        tree = HierarchicalHistogram.from_entries(
                            release.entries, spec.low, spec.high, depth, use="sum"
                        )
                        estimate = quantile_from_tree(tree, q)
                    else:
                        counts = [
                            release.entries.get(label, (0.0, 0.0))[0]
                            for label in spec.labels()
                        ]
                        estimate = quantile_from_flat(counts, spec, q)
                except EmptyHistogram:
                    continue
                self.result.quantile_rows.append(
                    {
                        "t_hours": now / HOUR,
                        "query_id": query.query_id,
                        "method": metric.quantile_method.value,
                        "q": q,
                        "estimate": estimate,
                        "relative_error": abs(estimate - truth) / abs(truth),
                    }
                )

    def _on_heartbeat(self, now: float, agg_id: str) -> None:
        node = self.coordinator.aggregators.get(agg_id)
        if node is not None and node.alive:
            self.coordinator.heartbeat(agg_id, now)
        self._push(now + HEARTBEAT_INTERVAL, EventKind.HEARTBEAT, agg_id)

    def _on_detect(self, now: float, _payload: Any) -> None:
        actions = self.coordinator.detect_and_reassign(now, self.snapshot_store, self.key_group)
        for action in actions:
            if action.startswith("reassigned:") and action.endswith(":empty_after_key_loss"):
                # the aggregate restarted from nothing; only data that gets
                # re-delivered (unacknowledged clients) counts as ingested
                qid = action.split(":")[1]
                qbit = 1 << self.query_index[qid]
                self.ingested_bits &= ~qbit
                self.ingested_points[qid] = 0.0
                if qid in self.band_ingested:
                    self.band_ingested[qid] = {b: 0.0 for b in self.band_ingested[qid]}
                self.result.anomalies.append(
                    {"t_hours": now / HOUR, "kind": "restart_from_empty", "query_id": qid}
                )
        self._push(now + HEARTBEAT_INTERVAL, EventKind.DETECT, None)

    def _on_kill_aggregator(self, now: float, spec: FailureSpec) -> None:
        node = self.coordinator.aggregators.get(spec.aggregator or "")
        if node is not None:
            node.kill()
            acked = {
                qid: int(np.count_nonzero(self.acked_bits & (1 << self.query_index[qid])))
                for qid in self._launched
            }
            self.result.anomalies.append(
                {
                    "t_hours": now / HOUR,
                    "kind": "aggregator_killed",
                    "aggregator": spec.aggregator,
                    "acked_at_kill": acked,
                }
            )

    def _on_kill_keys(self, now: float, spec: FailureSpec) -> None:
        self.key_group.kill_replicas(spec.count)
        self.result.anomalies.append(
            {
                "t_hours": now / HOUR,
                "kind": "key_replicas_killed",
                "count": spec.count,
                "alive": self.key_group.alive_count,
            }
        )

    def _on_restart_coordinator(self, now: float, _spec: FailureSpec) -> None:
        if self.out_dir is None:
            raise ConfigError("coordinator restart requires a run output directory")
        queries = {qid: self.queries[self.query_index[qid]] for qid in self.query_ids}
        self.coordinator = Coordinator.restart_from_journal(
            self.out_dir, queries, self.coordinator.aggregators, self.root, self.seed
        )
        self.forwarder = Forwarder(self.coordinator)
        self.result.anomalies.append({"t_hours": now / HOUR, "kind": "coordinator_restarted"})

    def _on_sample(self, now: float, _payload: Any) -> None:
        for qid in self._launched:
            total = self.gt_totals.get(qid, 0.0)
            row = {
                "t_hours": now / HOUR,
                "query_id": qid,
                "coverage": self.ingested_points[qid] / total if total > 0 else 0.0,
            }
            if qid in self.band_ingested:
                for band, arr in self.band_arrays[qid].items():
                    band_total = float(arr.sum())
                    row[f"coverage_{band}"] = (
                        self.band_ingested[qid][band] / band_total if band_total > 0 else 0.0
                    )
            self.result.coverage_rows.append(row)
        self._push(now + self.scenario.sample_interval_hours * HOUR, EventKind.SAMPLE, None)


def run_scenario(
    scenario: Scenario,
    out_dir: str | Path | None = None,
    trusted_binaries: list[tuple[bytes, str]] | None = None,
) -> ExperimentResult:
    """Convenience wrapper: build a runner, execute, return the result."""
    return SimulationRunner(scenario, out_dir, trusted_binaries).run()
