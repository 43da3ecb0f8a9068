"""Untrusted orchestrating server: coordinator, aggregator fleet, forwarder.

The orchestrator routes ciphertext and manages query lifecycle but never
sees plaintext reports: the forwarder accepts only EncryptedReport values
and relays the TSA's accept/reject verdicts. The coordinator journals every
state change so a restarted instance recovers the same registry, detects
aggregator death via heartbeat staleness, and reassigns queries to a new
aggregator restored from the latest encrypted snapshot.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from . import attestation
from .errors import DuplicateQuery, KeyLost, StorageError
from .query import FederatedQuery
from .tsa import ReleasedHistogram, Snapshot, SnapshotKeyGroup, TrustedAggregator

HEARTBEAT_INTERVAL = 30.0  # simulated seconds
HEARTBEAT_TIMEOUT = 3 * HEARTBEAT_INTERVAL

STATUS_REGISTERED = "registered"
STATUS_RUNNING = "running"
STATUS_RECOVERING = "recovering"
STATUS_COMPLETE = "complete"


@dataclass
class AggregatorNode:
    """One server of the aggregator fleet; may host several query TSAs."""

    aggregator_id: str
    alive: bool = True
    last_heartbeat: float = 0.0
    hosted: dict[str, TrustedAggregator] = field(default_factory=dict)
    # acks held back until a snapshot covers their reports: (client_ref, query_id, status)
    ack_buffer: list[tuple[int, str, str]] = field(default_factory=list)

    def kill(self) -> None:
        """Simulated fatal failure: enclave state and unflushed acks are gone."""
        self.alive = False
        self.hosted.clear()
        self.ack_buffer.clear()

    def query_load(self) -> int:
        return len(self.hosted)


class SnapshotStore:
    """Durable (simulated) storage of the latest snapshot per query."""

    def __init__(self) -> None:
        self._latest: dict[str, Snapshot] = {}

    def put(self, snapshot: Snapshot) -> None:
        self._latest[snapshot.query_id] = snapshot

    def latest(self, query_id: str) -> Snapshot | None:
        return self._latest.get(query_id)


@dataclass
class QueryRecord:
    query: FederatedQuery
    status: str
    launched_at: float
    tsa_instances: int = 0


class Coordinator:
    """Single logical writer over query registry and aggregator assignments."""

    def __init__(
        self,
        out_dir: str | Path | None,
        root: attestation.RootOfTrust | None,
        seed: int,
        write_line: Callable[[Path, str], None] | None = None,
    ):
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.root = root
        self.seed = seed
        self.registry: dict[str, QueryRecord] = {}
        self.assignments: dict[str, str] = {}
        self.aggregators: dict[str, AggregatorNode] = {}
        self.published: dict[str, dict[int, dict]] = {}
        self._next_write_index: dict[str, int] = {}
        self._write_line = write_line or _default_write_line
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            self.journal_path: Path | None = self.out_dir / "orchestrator.journal"
            self.journal_path.write_text("")
        else:
            self.journal_path = None

    # ------------------------------------------------------------------
    # Registry and assignment

    def add_aggregator(self, node: AggregatorNode) -> None:
        self.aggregators[node.aggregator_id] = node

    def register_query(self, query: FederatedQuery, now: float) -> str:
        if query.query_id in self.registry:
            raise DuplicateQuery(query.query_id)
        self.registry[query.query_id] = QueryRecord(query, STATUS_REGISTERED, now)
        self._journal(now, "register", query_id=query.query_id)
        self._try_assign(query.query_id, now)
        return query.query_id

    def _pick_aggregator(self) -> AggregatorNode | None:
        live = [n for n in self.aggregators.values() if n.alive]
        if not live:
            return None
        return min(live, key=lambda n: (n.query_load(), n.aggregator_id))

    def _try_assign(self, query_id: str, now: float, snapshots: SnapshotStore | None = None,
                    key_group: SnapshotKeyGroup | None = None) -> str | None:
        record = self.registry[query_id]
        node = self._pick_aggregator()
        if node is None:
            return None
        snapshot = snapshots.latest(query_id) if snapshots is not None else None
        record.tsa_instances += 1
        if snapshot is not None and key_group is not None:
            try:
                aggregator = TrustedAggregator.restore(
                    snapshot, key_group, record.query, self.root, self.seed,
                    instance=record.tsa_instances,
                )
                recovered = "snapshot"
            except KeyLost:
                aggregator = TrustedAggregator(
                    record.query, self.root, self.seed,
                    launched_at=record.launched_at, instance=record.tsa_instances,
                )
                recovered = "empty_after_key_loss"
        else:
            aggregator = TrustedAggregator(
                record.query, self.root, self.seed,
                launched_at=record.launched_at, instance=record.tsa_instances,
            )
            recovered = "fresh"
        node.hosted[query_id] = aggregator
        self.assignments[query_id] = node.aggregator_id
        record.status = STATUS_RUNNING
        self._journal(
            now, "assign", query_id=query_id, aggregator=node.aggregator_id, source=recovered
        )
        return recovered

    def active_broadcast(self) -> list[FederatedQuery]:
        """Exactly the running queries, in registration order."""
        return [r.query for r in self.registry.values() if r.status == STATUS_RUNNING]

    def tsa_for(self, query_id: str) -> TrustedAggregator | None:
        agg_id = self.assignments.get(query_id)
        if agg_id is None:
            return None
        node = self.aggregators.get(agg_id)
        if node is None or not node.alive:
            return None
        return node.hosted.get(query_id)

    def node_for(self, query_id: str) -> AggregatorNode | None:
        agg_id = self.assignments.get(query_id)
        return self.aggregators.get(agg_id) if agg_id is not None else None

    def mark_complete(self, query_id: str, now: float) -> None:
        record = self.registry.get(query_id)
        if record is not None and record.status != STATUS_COMPLETE:
            record.status = STATUS_COMPLETE
            self._journal(now, "complete", query_id=query_id)

    # ------------------------------------------------------------------
    # Failure detection and recovery

    def heartbeat(self, aggregator_id: str, now: float) -> None:
        node = self.aggregators.get(aggregator_id)
        if node is not None and node.alive:
            node.last_heartbeat = now

    def detect_and_reassign(
        self, now: float, snapshots: SnapshotStore, key_group: SnapshotKeyGroup
    ) -> list[str]:
        """Mark stale aggregators dead and move their queries elsewhere."""
        actions: list[str] = []
        for node in list(self.aggregators.values()):
            if node.alive and now - node.last_heartbeat > HEARTBEAT_TIMEOUT:
                node.kill()
                self._journal(now, "aggregator_dead", aggregator=node.aggregator_id)
                actions.append(f"dead:{node.aggregator_id}")
        for query_id, agg_id in list(self.assignments.items()):
            record = self.registry[query_id]
            node = self.aggregators.get(agg_id)
            if record.status == STATUS_COMPLETE:
                continue
            if node is None or not node.alive or query_id not in node.hosted:
                record.status = STATUS_RECOVERING
                self._journal(now, "recovering", query_id=query_id)
                source = self._try_assign(query_id, now, snapshots, key_group)
                if source is not None:
                    actions.append(f"reassigned:{query_id}:{source}")
                else:
                    actions.append(f"stalled:{query_id}")
        for query_id, record in self.registry.items():
            if record.status == STATUS_REGISTERED:
                if self._try_assign(query_id, now, snapshots, key_group):
                    actions.append(f"assigned:{query_id}")
        return actions

    # ------------------------------------------------------------------
    # Result publication

    def publish(self, release: ReleasedHistogram, now: float) -> dict:
        """Persist a release record; idempotent by (query, release index).

        MEAN metrics are realized here as post-processing: the noised sum
        divided by the noised client count, per surviving bucket.
        """
        per_query = self.published.setdefault(release.query_id, {})
        if release.release_index in per_query:
            return per_query[release.release_index]
        record = release.to_json_dict()
        record["coordinator"] = {
            "status": self.registry[release.query_id].status,
            "published_at_hours": round(now / 3600.0, 6),
        }
        query = self.registry[release.query_id].query
        mean_cols = [m.column for m in query.metric_specs if m.kind.value == "mean"]
        if mean_cols:
            record["derived"] = {
                "mean": {
                    key: (round(s / c, 3) if c > 0 else None)
                    for key, (s, c) in sorted(release.entries.items())
                }
            }
        per_query[release.release_index] = record
        self._flush_releases(release.query_id)
        self._journal(now, "publish", query_id=release.query_id, index=release.release_index)
        return record

    def _flush_releases(self, query_id: str) -> None:
        """Append contiguous next-in-order releases to the query's results file."""
        if self.out_dir is None:
            return
        per_query = self.published[query_id]
        path = self.results_dir(query_id) / "releases.jsonl"
        nxt = self._next_write_index.get(query_id, 0)
        while nxt in per_query:
            line = json.dumps(per_query[nxt], sort_keys=True)
            self._write_line(path, line)
            nxt += 1
        self._next_write_index[query_id] = nxt

    def results_dir(self, query_id: str) -> Path:
        assert self.out_dir is not None
        d = self.out_dir / "results" / query_id
        d.mkdir(parents=True, exist_ok=True)
        return d

    def write_status_files(self, now: float) -> None:
        if self.out_dir is None:
            return
        for query_id, record in self.registry.items():
            doc = {
                "query_id": query_id,
                "status": record.status,
                "aggregator": self.assignments.get(query_id),
                "launched_at_hours": round(record.launched_at / 3600.0, 6),
                "releases_published": len(self.published.get(query_id, {})),
                "as_of_hours": round(now / 3600.0, 6),
            }
            path = self.results_dir(query_id) / "status.json"
            path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")

    # ------------------------------------------------------------------
    # Journal and restart

    def _journal(self, now: float, event: str, **fields) -> None:
        doc = {"t_hours": round(now / 3600.0, 6), "event": event, **fields}
        if self.journal_path is not None:
            self._write_line(self.journal_path, json.dumps(doc, sort_keys=True))

    @classmethod
    def restart_from_journal(
        cls,
        out_dir: str | Path,
        queries: dict[str, FederatedQuery],
        aggregators: dict[str, AggregatorNode],
        root: attestation.RootOfTrust | None,
        seed: int,
    ) -> "Coordinator":
        """Rebuild coordinator state from the persisted journal.

        The aggregator fleet (and the TSAs it hosts) survives a coordinator
        crash; only coordinator-local state is reconstructed. The journal is
        re-opened in append mode so history is preserved.
        """
        out_dir = Path(out_dir)
        journal_path = out_dir / "orchestrator.journal"
        lines = [json.loads(l) for l in journal_path.read_text().splitlines() if l]
        coord = cls.__new__(cls)
        coord.out_dir = out_dir
        coord.root = root
        coord.seed = seed
        coord.registry = {}
        coord.assignments = {}
        coord.aggregators = dict(aggregators)
        coord.published = {}
        coord._next_write_index = {}
        coord._write_line = _default_write_line
        coord.journal_path = journal_path
        for doc in lines:
            event = doc["event"]
            t = doc["t_hours"] * 3600.0
            if event == "register":
                qid = doc["query_id"]
                coord.registry[qid] = QueryRecord(queries[qid], STATUS_REGISTERED, t)
            elif event == "assign":
                qid = doc["query_id"]
                coord.assignments[qid] = doc["aggregator"]
                coord.registry[qid].status = STATUS_RUNNING
                coord.registry[qid].tsa_instances += 1
            elif event == "recovering":
                coord.registry[doc["query_id"]].status = STATUS_RECOVERING
            elif event == "aggregator_dead":
                node = coord.aggregators.get(doc["aggregator"])
                if node is not None:
                    node.alive = False
            elif event == "publish":
                coord.published.setdefault(doc["query_id"], {})[doc["index"]] = {}
                nxt = coord._next_write_index.get(doc["query_id"], 0)
                coord._next_write_index[doc["query_id"]] = max(nxt, doc["index"] + 1)
            elif event == "complete":
                coord.registry[doc["query_id"]].status = STATUS_COMPLETE
        # reconcile assignments against the fleet that actually survived
        for qid, agg_id in list(coord.assignments.items()):
            node = coord.aggregators.get(agg_id)
            if node is None or not node.alive or qid not in node.hosted:
                if coord.registry[qid].status == STATUS_RUNNING:
                    coord.registry[qid].status = STATUS_RECOVERING
        # rehydrate published release payloads from the results files
        for qid in list(coord.published):
            path = out_dir / "results" / qid / "releases.jsonl"
            if path.exists():
                for line in path.read_text().splitlines():
                    if line:
                        rec = json.loads(line)
                        coord.published[qid][rec["release_index"]] = rec
        return coord


def _default_write_line(path: Path, line: str) -> None:
    with open(path, "a") as fh:
        fh.write(line + "\n")


def make_retrying_writer(
    fail_when: Callable[[Path, int], bool] | None, max_attempts: int = 3
) -> Callable[[Path, str], None]:
    """File appender with injectable failures; retries then raises StorageError."""

    def write_line(path: Path, line: str) -> None:
        for attempt in range(max_attempts):
            if fail_when is not None and fail_when(path, attempt):
                continue
            _default_write_line(path, line)
            return
        raise StorageError(f"write to {path} failed after {max_attempts} attempts")

    return write_line


class Forwarder:
    """Stateless client-facing relay. Sees ciphertext and session values only."""

    def __init__(self, coordinator: Coordinator):
        self._coordinator = coordinator

    def poll(self) -> list[FederatedQuery]:
        return self._coordinator.active_broadcast()

    def fetch_quote(self, query_id: str) -> attestation.AttestationQuote | None:
        tsa = self._coordinator.tsa_for(query_id)
        return tsa.quote if tsa is not None else None

    def route_report(
        self, report: attestation.EncryptedReport, now: float
    ) -> tuple[str, str | None, bool]:
        """Pass an encrypted report through to the assigned TSA.

        Returns (status, reason, fresh). The forwarder never inspects the
        payload; a non-ciphertext submission is a protocol violation.
        """
        if not isinstance(report, attestation.EncryptedReport):
            raise TypeError("forwarder only carries EncryptedReport values")
        tsa = self._coordinator.tsa_for(report.query_id)
        if tsa is None:
            return ("reject", "unknown_query", False)
        outcome = tsa.ingest(report, now)
        return (outcome.status, outcome.reason, outcome.fresh)
