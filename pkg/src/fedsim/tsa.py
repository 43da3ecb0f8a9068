"""Trusted secure aggregator: decrypt-ingest-discard, noise, release, snapshot.

One aggregator instance serves one query. Reports are decrypted, clamped to
the query's contribution bounds, folded into the running histogram, and the
plaintext is dropped; only the aggregate, a set of opaque dedup nonces, and
the privacy budget persist. Sums are accumulated in fixed-point (1/1024
units) so the pre-noise histogram is exactly order-independent and
crash-recovery equality can be asserted bit-for-bit.

Releases apply the query's privacy mode (Gaussian noise, randomized-response
debiasing, sample-and-threshold, or nothing), then drop buckets whose noisy
client count is under the k-anonymity threshold. Encrypted snapshots allow a
replacement enclave to resume aggregation; acknowledgements are surfaced to
the transport only after a snapshot covers the underlying reports, so an
acknowledged report can never be lost to a crash.
"""

from __future__ import annotations

import math
import pickle
from array import array
from dataclasses import dataclass, field

from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from . import attestation, dp, rand
from .errors import AuthFailure, BudgetExhausted, KeyLost, ParseError
from .query import FederatedQuery, PrivacyMode
from .report import MiniHistogram

SUM_SCALE = 1024  # fixed-point denominator for order-independent exact sums


def _quantize(value: float) -> int:
    return int(round(value * SUM_SCALE))


@dataclass
class AggregationState:
    """Everything a TSA persists between reports (and into snapshots).

    ``seen_nonces`` is the dedup set; ``nonce_log`` mirrors it append-only so
    snapshots serialize it as one flat buffer instead of walking a large set.
    """

    query_id: str
    histogram: dict[str, list[int]] = field(default_factory=dict)  # key -> [sum_q, count]
    seen_nonces: set[int] = field(default_factory=set)
    nonce_log: array = field(default_factory=lambda: array("Q"))
    budget: dp.PrivacyBudget | None = None
    releases: list["ReleasedHistogram"] = field(default_factory=list)
    release_count: int = 0  # authoritative index; survives restore, unlike the list
    next_release_at: float = 0.0
    closed: bool = False
    last_snapshot_at: float = -math.inf
    dirty: bool = False

    @property
    def reporters(self) -> int:
        return len(self.seen_nonces)

    def plain_histogram(self) -> dict[str, tuple[float, int]]:
        return {k: (sq / SUM_SCALE, c) for k, (sq, c) in self.histogram.items()}


@dataclass(frozen=True)
class ReleasedHistogram:
    """One noised, thresholded partial result with its spent budget."""

    query_id: str
    release_index: int
    entries: dict[str, tuple[float, float]]
    epsilon_spent: float
    delta_spent: float
    k_used: int
    reporters_at_release: int
    released_at: float
    mode: str
    noise_meta: dict

    def to_json_dict(self) -> dict:
        return {
            "query_id": self.query_id,
            "release_index": self.release_index,
            "released_at_hours": round(self.released_at / 3600.0, 6),
            "mode": self.mode,
            "epsilon_spent": self.epsilon_spent,
            "delta_spent": self.delta_spent,
            "k_used": self.k_used,
            "reporters_at_release": self.reporters_at_release,
            "noise": self.noise_meta,
            "entries": {
                k: [round(s, 3), round(c, 3)] for k, (s, c) in sorted(self.entries.items())
            },
        }


@dataclass(frozen=True)
class IngestOutcome:
    status: str  # "ack" | "reject"
    reason: str | None = None
    fresh: bool = False  # first time this nonce was aggregated

    @property
    def acked(self) -> bool:
        return self.status == "ack"


class SnapshotKeyGroup:
    """TEE group replicating one snapshot key; alive-majority gates access."""

    def __init__(self, key_id: str, seed: int, replicas: int = 5):
        self.key_id = key_id
        self._key = rand.hash_bytes(seed, "snapshot-key", key_id)
        self.replica_alive = [True] * replicas

    @property
    def alive_count(self) -> int:
        return sum(self.replica_alive)

    @property
    def majority_alive(self) -> bool:
        return self.alive_count * 2 > len(self.replica_alive)

    def kill_replicas(self, count: int) -> None:
        for i in range(len(self.replica_alive)):
            if count <= 0:
                break
            if self.replica_alive[i]:
                self.replica_alive[i] = False
                count -= 1

    def get_key(self) -> bytes:
        if not self.majority_alive:
            raise KeyLost(
                f"{self.key_id}: {self.alive_count}/{len(self.replica_alive)} replicas alive"
            )
        return self._key


@dataclass(frozen=True)
class Snapshot:
    query_id: str
    ciphertext: bytes
    snapshot_key_id: str
    created_at: float


class TrustedAggregator:
    """A TSA instance: one query, one enclave, one attestation identity."""

    BINARY_LABEL = "fedsim-tsa/1.0"

    def __init__(
        self,
        query: FederatedQuery,
        root: attestation.RootOfTrust | None,
        seed: int,
        launched_at: float = 0.0,
        instance: int = 0,
        state: AggregationState | None = None,
        binary_label: str | None = None,
        params_hash: bytes | None = None,
    ):
        self.query = query
        self.seed = seed
        self.instance = instance
        self.binary_hash = attestation.binary_hash_of(binary_label or self.BINARY_LABEL)
        self.params_hash = (
            params_hash
            if params_hash is not None
            else attestation.params_hash_for_query(query)
        )
        self.quote, self._kex_private = attestation.generate_quote(
            root,
            self.binary_hash,
            self.params_hash,
            rand.generator(seed, "quote", query.query_id, instance),
        )
        if state is not None:
            self.state = state
        else:
            self.state = AggregationState(
                query_id=query.query_id,
                budget=dp.PrivacyBudget(
                    epsilon_total=query.privacy.epsilon,
                    delta_total=query.privacy.delta,
                    releases_allowed=query.schedule.max_releases,
                ),
                next_release_at=launched_at + query.schedule.release_interval,
            )
        self._snapshot_seq = 0

    # ------------------------------------------------------------------
    # Ingest

    def ingest(self, report: attestation.EncryptedReport, now: float = 0.0) -> IngestOutcome:
        """Decrypt, clamp, aggregate, discard; idempotent per report nonce."""
        if self.state.closed:
            return IngestOutcome("reject", "query_closed")
        channel = attestation.accept_channel(self._kex_private, report.sender_kex_public, now)
        try:
            payload = attestation.decrypt_report(channel, report)
        except AuthFailure:
            return IngestOutcome("reject", "auth_failure")
        try:
            hist = MiniHistogram.from_payload(payload)
        except ParseError:
            return IngestOutcome("reject", "malformed")
        if hist.query_id != self.query.query_id:
            return IngestOutcome("reject", "wrong_query")
        if hist.report_nonce in self.state.seen_nonces:
            return IngestOutcome("ack", fresh=False)

        bound = self.query.privacy.contribution_bound
        cap = self.query.privacy.max_buckets_per_client
        entries = sorted(hist.entries.items(), key=lambda kv: (-kv[1][0], kv[0]))[:cap]
        for key, (value_sum, _count) in entries:
            clamped = min(max(value_sum, -bound), bound)
            slot = self.state.histogram.get(key)
            if slot is None:
                self.state.histogram[key] = [_quantize(clamped), 1]
            else:
                slot[0] += _quantize(clamped)
                slot[1] += 1
        self.state.seen_nonces.add(hist.report_nonce)
        self.state.nonce_log.append(hist.report_nonce)
        self.state.dirty = True
        # `payload` and `hist` go out of scope here; nothing per-client persists
        return IngestOutcome("ack", fresh=True)

    # ------------------------------------------------------------------
    # Release

    def maybe_release(self, now: float) -> ReleasedHistogram | None:
        """Release a partial result once enough clients and time have passed.

        Returns None while a gate (reporters, schedule) is unmet. Raises
        BudgetExhausted when the schedule fires but every allowed release
        was already spent; callers treat that as query completion.
        """
        state = self.state
        assert state.budget is not None
        if state.reporters < self.query.schedule.min_reporters:
            return None
        if now < state.next_release_at:
            return None
        if state.budget.exhausted or state.closed:
            state.closed = True
            raise BudgetExhausted(f"{self.query.query_id}: all releases spent")

        eps_i, delta_i = dp.split_budget(state.budget)
        index = state.release_count
        rng = rand.generator(self.seed, "release", self.query.query_id, index)
        mode = self.query.privacy.mode
        k = self.query.privacy.k_anon_threshold
        plain = state.plain_histogram()
        noise_meta: dict = {}

        if mode == PrivacyMode.CENTRAL_DP:
            sum_params = dp.GaussianParams.calibrate(
                eps_i / 2.0,
                delta_i / 2.0,
                dp.sum_sensitivity(
                    self.query.privacy.contribution_bound,
                    self.query.privacy.max_buckets_per_client,
                ),
            )
            count_params = dp.GaussianParams.calibrate(
                eps_i / 2.0,
                delta_i / 2.0,
                dp.count_sensitivity(self.query.privacy.max_buckets_per_client),
            )
            noised = dp.add_central_noise(plain, sum_params, count_params, rng, self._domain())
            noise_meta = {"sum_sigma": sum_params.sigma, "count_sigma": count_params.sigma}
        elif mode == PrivacyMode.LOCAL_DP:
            noised = self._debias_local(plain)
            params = dp.LdpParams(self.query.privacy.epsilon, self.query.bucket_spec.buckets)
            noise_meta = {"p_keep": params.p_keep, "p_other": params.p_other}
        elif mode == PrivacyMode.SAMPLE_THRESHOLD:
            noised = dp.NoisedHistogram({key: (s, float(c)) for key, (s, c) in plain.items()})
            noise_meta = {
                "sampling_rate": self.query.privacy.st_sampling_rate,
                "threshold": k,
            }
        else:  # NONE: identity pipeline
            noised = dp.NoisedHistogram({key: (s, float(c)) for key, (s, c) in plain.items()})

        kept = dp.k_anon_filter(noised, k)
        release = ReleasedHistogram(
            query_id=self.query.query_id,
            release_index=index,
            entries=dict(sorted(kept.entries.items())),
            epsilon_spent=eps_i,
            delta_spent=delta_i,
            k_used=k,
            reporters_at_release=state.reporters,
            released_at=now,
            mode=mode.value,
            noise_meta=noise_meta,
        )
        state.releases.append(release)
        state.release_count += 1
        state.next_release_at += self.query.schedule.release_interval
        state.dirty = True
        if state.budget.exhausted:
            state.closed = True
        return release

    def _domain(self) -> list[str] | None:
        """Fixed bucket universe for noising, when the query declares one."""
        spec = self.query.bucket_spec
        if spec is None or self.query.dimension_cols:
            return None
        if self.query.tree_metric is not None:
            depth = int(math.log2(spec.buckets))
            return [f"{d}:{b}" for d in range(1, depth + 1) for b in range(1 << d)]
        return spec.labels()

    def _debias_local(self, plain: dict[str, tuple[float, int]]) -> dp.NoisedHistogram:
        spec = self.query.bucket_spec
        assert spec is not None
        params = dp.LdpParams(self.query.privacy.epsilon, spec.buckets)
        labels = spec.labels()
        raw = [int(plain.get(label, (0.0, 0))[1]) for label in labels]
        estimates = dp.ldp_debias(raw, self.state.reporters, params)
        entries = {label: (est, est) for label, est in zip(labels, estimates)}
        return dp.NoisedHistogram(entries)

    # ------------------------------------------------------------------
    # Snapshots

    def snapshot(self, group: SnapshotKeyGroup, now: float) -> Snapshot:
        """Encrypt the aggregation state for recovery by a successor enclave."""
        key = group.get_key()
        blob = pickle.dumps(self._state_dict(), protocol=4)
        self._snapshot_seq += 1
        nonce = rand.hash_bytes(
            self.seed, "snapnonce", self.query.query_id, self.instance, self._snapshot_seq
        )[:12]
        ciphertext = nonce + AESGCM(key).encrypt(nonce, blob, None)
        self.state.last_snapshot_at = now
        self.state.dirty = False
        return Snapshot(self.query.query_id, ciphertext, group.key_id, now)

    @classmethod
    def restore(
        cls,
        snapshot: Snapshot,
        group: SnapshotKeyGroup,
        query: FederatedQuery,
        root: attestation.RootOfTrust | None,
        seed: int,
        instance: int,
    ) -> "TrustedAggregator":
        """Decrypt a snapshot into a fresh enclave; exact state equality."""
        key = group.get_key()
        nonce, ct = snapshot.ciphertext[:12], snapshot.ciphertext[12:]
        blob = AESGCM(key).decrypt(nonce, ct, None)
        state = cls._state_from_dict(pickle.loads(blob))
        return cls(query, root, seed, instance=instance, state=state)

    def _state_dict(self) -> dict:
        # published release payloads live with the coordinator; the snapshot
        # carries only what resuming aggregation needs
        s = self.state
        assert s.budget is not None
        return {
            "query_id": s.query_id,
            "histogram": {k: list(v) for k, v in s.histogram.items()},
            "nonce_log": s.nonce_log,
            "budget": s.budget.state_dict(),
            "release_count": s.release_count,
            "next_release_at": s.next_release_at,
            "closed": s.closed,
        }

    @staticmethod
    def _state_from_dict(doc: dict) -> AggregationState:
        log = array("Q", doc["nonce_log"])
        return AggregationState(
            query_id=doc["query_id"],
            histogram={k: list(v) for k, v in doc["histogram"].items()},
            seen_nonces=set(log),
            nonce_log=log,
            budget=dp.PrivacyBudget(**doc["budget"]),
            release_count=doc["release_count"],
            next_release_at=doc["next_release_at"],
            closed=doc["closed"],
        )
