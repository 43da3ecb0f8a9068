"""Simulated remote attestation and the encrypted report channel.

The hardware root of trust is a single Ed25519 keypair held by the harness;
legitimate aggregators are granted a signing handle, adversarial ones are
not. Quotes bind (binary hash, parameter hash, key-exchange public value)
under that signature. Key agreement is X25519 and report encryption is
ChaCha20-Poly1305, so tamper tests exercise real authenticated crypto rather
than mocks; only the hardware vendor's certificate chain is collapsed into
the one root key.

Verification checks, in order: (a) the vendor signature, (b) that the binary
hash is registered as audited, (c) that the published parameter hash matches
what the client expects. The client aborts on the first failure.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.asymmetric.x25519 import (
    X25519PrivateKey,
    X25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from .errors import AuthFailure
from . import rand

_QUOTE_DOMAIN = b"fedsim-attestation-quote-v1"
_CHANNEL_INFO = b"fedsim-report-channel-v1"

ACCEPT = "accept"
ABORT_BAD_SIGNATURE = "bad_signature"
ABORT_UNKNOWN_BINARY = "unknown_binary"
ABORT_PARAMS_MISMATCH = "params_mismatch"


class RootOfTrust:
    """The simulated hardware vendor key. Only the harness constructs one."""

    def __init__(self, seed: int = 0):
        self._private = Ed25519PrivateKey.from_private_bytes(
            rand.hash_bytes(seed, "root-of-trust")
        )
        self.public_bytes = self._private.public_key().public_bytes_raw()

    def sign(self, message: bytes) -> bytes:
        return self._private.sign(message)


@dataclass
class TrustedBinaryRegistry:
    """Published audit registry: binary hash -> human-readable label.

    Append-only during a run; ``fingerprint`` is a content digest of the
    entries, recomputed on registration, so cached verification results are
    keyed by what the registry actually contains.
    """

    root_public_key: bytes
    entries: dict[bytes, str] = field(default_factory=dict)
    published_params: dict[bytes, list[bytes]] = field(default_factory=dict)
    fingerprint: bytes = b""

    def register(self, binary_hash: bytes, label: str, params_hash: bytes | None = None) -> None:
        self.entries[binary_hash] = label
        if params_hash is not None:
            self.published_params.setdefault(binary_hash, []).append(params_hash)
        self.fingerprint = rand.hash_bytes(b"".join(sorted(self.entries)))

    def save(self, path: str | Path) -> None:
        doc = [{"hash": h.hex(), "label": label} for h, label in sorted(self.entries.items())]
        Path(path).write_text(json.dumps(doc, indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path, root_public_key: bytes) -> "TrustedBinaryRegistry":
        doc = json.loads(Path(path).read_text())
        reg = cls(root_public_key)
        for row in doc:
            reg.register(bytes.fromhex(row["hash"]), row["label"])
        return reg


def binary_hash_of(code_label: str) -> bytes:
    """Content address of a trusted-binary version label."""
    return rand.hash_bytes("binary", code_label)


def params_hash_of(params_doc: dict) -> bytes:
    """Content address of a TSA's public initialization parameters."""
    canon = json.dumps(params_doc, separators=(",", ":"), sort_keys=True)
    return rand.hash_bytes("params", canon)


def params_hash_for_query(query) -> bytes:
    """Hash of the privacy config and release schedule a TSA was launched with.

    Clients compute the same hash from their own copy of the query config,
    so a TSA initialized with different (e.g. weaker) parameters than the
    advertised query fails verification with params_mismatch.
    """
    doc = {
        "queryId": query.query_id,
        "mode": query.privacy.mode.value,
        "epsilon": query.privacy.epsilon,
        "delta": query.privacy.delta,
        "kAnonThreshold": query.privacy.k_anon_threshold,
        "contributionBound": query.privacy.contribution_bound,
        "maxBucketsPerClient": query.privacy.max_buckets_per_client,
        "stSamplingRate": query.privacy.st_sampling_rate,
        "releaseInterval": query.schedule.release_interval,
        "maxReleases": query.schedule.max_releases,
        "minReporters": query.schedule.min_reporters,
    }
    return params_hash_of(doc)


@dataclass(frozen=True)
class AttestationQuote:
    binary_hash: bytes
    params_hash: bytes
    kex_public: bytes
    vendor_signature: bytes

    def signed_payload(self) -> bytes:
        return _QUOTE_DOMAIN + self.binary_hash + self.params_hash + self.kex_public


def generate_quote(
    signer: RootOfTrust | None,
    binary_hash: bytes,
    params_hash: bytes,
    rng: np.random.Generator,
) -> tuple[AttestationQuote, X25519PrivateKey]:
    """Produce a quote with fresh key-exchange material.

    A server without the root-of-trust signing capability (``signer=None``)
    still produces a quote, but its signature cannot verify.
    """
    kex_private = X25519PrivateKey.from_private_bytes(bytes(rng.bytes(32)))
    kex_public = kex_private.public_key().public_bytes_raw()
    quote = AttestationQuote(binary_hash, params_hash, kex_public, b"")
    if signer is not None:
        signature = signer.sign(quote.signed_payload())
    else:
        signature = b"\x00" * 64
    return AttestationQuote(binary_hash, params_hash, kex_public, signature), kex_private


@dataclass(frozen=True)
class VerifyResult:
    accepted: bool
    reason: str

    def __bool__(self) -> bool:
        return self.accepted


_verify_cache: dict[tuple, VerifyResult] = {}
_VERIFY_CACHE_MAX = 4096


def verify_quote(
    quote: AttestationQuote,
    registry: TrustedBinaryRegistry,
    expected_params_hash: bytes,
) -> VerifyResult:
    """Client-side quote check; abort reason is the first failing condition.

    Pure in its inputs; results are memoized on the full quote contents plus
    registry epoch, since fleets of clients verify identical quote bytes.
    """
    cache_key = (
        quote.binary_hash,
        quote.params_hash,
        quote.kex_public,
        quote.vendor_signature,
        registry.root_public_key,
        registry.fingerprint,
        expected_params_hash,
    )
    cached = _verify_cache.get(cache_key)
    if cached is not None:
        return cached

    result = _verify_uncached(quote, registry, expected_params_hash)
    if len(_verify_cache) >= _VERIFY_CACHE_MAX:
        _verify_cache.clear()
    _verify_cache[cache_key] = result
    return result


def _verify_uncached(
    quote: AttestationQuote, registry: TrustedBinaryRegistry, expected_params_hash: bytes
) -> VerifyResult:
    try:
        public = Ed25519PublicKey.from_public_bytes(registry.root_public_key)
        public.verify(quote.vendor_signature, quote.signed_payload())
    except (InvalidSignature, ValueError):
        return VerifyResult(False, ABORT_BAD_SIGNATURE)
    if quote.binary_hash not in registry.entries:
        return VerifyResult(False, ABORT_UNKNOWN_BINARY)
    if quote.params_hash != expected_params_hash:
        return VerifyResult(False, ABORT_PARAMS_MISMATCH)
    return VerifyResult(True, ACCEPT)


@dataclass(frozen=True)
class SecureChannel:
    """A one-session symmetric channel between a client and a TSA."""

    session_key: bytes
    local_kex_public: bytes
    peer_kex_public: bytes
    established_at: float = 0.0


def _derive_session_key(shared_secret: bytes, client_public: bytes, tsa_public: bytes) -> bytes:
    return HKDF(
        algorithm=hashes.SHA256(),
        length=32,
        salt=None,
        info=_CHANNEL_INFO + client_public + tsa_public,
    ).derive(shared_secret)


def establish_channel(
    client_kex_private: X25519PrivateKey, quote: AttestationQuote, now: float = 0.0
) -> SecureChannel:
    """Client side of the handshake, after the quote was verified."""
    tsa_public = X25519PublicKey.from_public_bytes(quote.kex_public)
    shared = client_kex_private.exchange(tsa_public)
    client_public = client_kex_private.public_key().public_bytes_raw()
    key = _derive_session_key(shared, client_public, quote.kex_public)
    return SecureChannel(key, client_public, quote.kex_public, now)


def accept_channel(
    tsa_kex_private: X25519PrivateKey, client_kex_public: bytes, now: float = 0.0
) -> SecureChannel:
    """TSA side of the handshake; derives the same session key."""
    shared = tsa_kex_private.exchange(X25519PublicKey.from_public_bytes(client_kex_public))
    tsa_public = tsa_kex_private.public_key().public_bytes_raw()
    key = _derive_session_key(shared, client_kex_public, tsa_public)
    return SecureChannel(key, tsa_public, client_kex_public, now)


@dataclass(frozen=True)
class EncryptedReport:
    """Ciphertext plus the sender's ephemeral public value. No client identity."""

    query_id: str
    sender_kex_public: bytes
    ciphertext: bytes  # 12-byte nonce || AEAD ciphertext


def encrypt_report(
    channel: SecureChannel, payload: bytes, nonce: bytes, query_id: str
) -> EncryptedReport:
    """AEAD-seal a payload; the 12-byte nonce must be unique per session key."""
    if len(nonce) != 12:
        raise ValueError("nonce must be 12 bytes")
    ct = ChaCha20Poly1305(channel.session_key).encrypt(nonce, payload, query_id.encode())
    return EncryptedReport(query_id, channel.local_kex_public, nonce + ct)


def decrypt_report(channel: SecureChannel, report: EncryptedReport) -> bytes:
    if len(report.ciphertext) < 13:
        raise AuthFailure("ciphertext too short")
    nonce, ct = report.ciphertext[:12], report.ciphertext[12:]
    try:
        return ChaCha20Poly1305(channel.session_key).decrypt(
            nonce, ct, report.query_id.encode()
        )
    except InvalidTag as exc:
        raise AuthFailure("report failed authentication") from exc
