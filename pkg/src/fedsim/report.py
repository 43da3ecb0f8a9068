"""Per-client report payloads ("mini histograms") and their wire form."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .errors import ParseError


@dataclass
class MiniHistogram:
    """One client's contribution to one query.

    ``entries`` maps a dimension key to (value sum, contribution count).
    The report nonce is a per-(client, query) identifier that is stable
    across retries, so the aggregator can deduplicate re-deliveries.
    """

    query_id: str
    entries: dict[str, tuple[float, int]] = field(default_factory=dict)
    report_nonce: int = 0

    def truncated(self, max_buckets: int) -> "MiniHistogram":
        """Keep at most ``max_buckets`` entries, largest counts first, ties by key."""
        if len(self.entries) <= max_buckets:
            return self
        kept = sorted(self.entries.items(), key=lambda kv: (-kv[1][1], kv[0]))[:max_buckets]
        return MiniHistogram(self.query_id, dict(sorted(kept)), self.report_nonce)

    def to_payload(self) -> bytes:
        """Canonical byte serialization (what gets encrypted on the wire)."""
        doc = {
            "q": self.query_id,
            "n": self.report_nonce,
            "e": [[k, s, c] for k, (s, c) in sorted(self.entries.items())],
        }
        return json.dumps(doc, separators=(",", ":"), sort_keys=True).encode("utf-8")

    @staticmethod
    def from_payload(payload: bytes) -> "MiniHistogram":
        try:
            doc = json.loads(payload.decode("utf-8"))
            entries = {k: (float(s), int(c)) for k, s, c in doc["e"]}
            return MiniHistogram(doc["q"], entries, int(doc["n"]))
        except (ValueError, KeyError, TypeError) as exc:
            raise ParseError(f"malformed report payload: {exc}") from exc
