"""Deterministic randomness utilities.

Every stochastic decision in the simulator is keyed by (root seed, purpose,
entity ids). Two kinds of primitives are provided:

* hash coins: cheap, order-independent uniform draws derived from SHA-256.
  Used on the per-client hot path (check-in scheduling, sampling decisions,
  nonces) where constructing a numpy Generator per draw would dominate.
* keyed numpy Generators: used wherever vectorized or Gaussian draws are
  needed (population generation, release noise, perturbation channels).

Both are pure functions of their keys, so replaying the same scenario with
the same seed reproduces every draw regardless of event interleaving.
"""

from __future__ import annotations

import hashlib
import math
import struct

import numpy as np

_U64 = float(1 << 64)


def _key_bytes(parts: tuple) -> bytes:
    # repr of an (int | str | bytes) tuple is stable and injective per type,
    # and an order of magnitude cheaper than hand-rolled length prefixing
    return repr(parts).encode("utf-8")


def hash64(*parts) -> int:
    """Stable 64-bit integer derived from the key parts."""
    digest = hashlib.sha256(_key_bytes(parts)).digest()
    return struct.unpack(">Q", digest[:8])[0]


def hash_bytes(*parts, length: int = 32) -> bytes:
    """Stable byte string (up to 32 bytes) derived from the key parts."""
    return hashlib.sha256(_key_bytes(parts)).digest()[:length]


def coin(*parts) -> float:
    """Uniform draw in [0, 1) keyed by the parts."""
    return hash64(*parts) / _U64


def coin_pair(*parts) -> tuple[float, float]:
    """Two independent uniforms in (0, 1] keyed by the parts."""
    digest = hashlib.sha256(_key_bytes(parts)).digest()
    a, b = struct.unpack(">QQ", digest[:16])
    return (a + 1) / _U64, (b + 1) / _U64


def normal(*parts) -> float:
    """Standard normal draw keyed by the parts (Box-Muller)."""
    u1, u2 = coin_pair(*parts)
    return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)


def generator(*parts) -> np.random.Generator:
    """Keyed numpy Generator; independent streams for distinct keys."""
    entropy = int.from_bytes(hashlib.sha256(_key_bytes(parts)).digest()[:16], "big")
    return np.random.Generator(np.random.PCG64(entropy))
