"""Counter-based deterministic random values.

Every value is a pure function of an integer key tuple (seed, tags,
indices, ...) hashed with BLAKE2b, so results are independent of call
order and identical across platforms and runs. No global state.
"""

from __future__ import annotations

import hashlib
import math

import numpy as np

_MASK64 = (1 << 64) - 1
_BLOCK_VALUES = 8  # one 64-byte BLAKE2b digest yields eight u64 draws


def _digest(parts: tuple[int, ...], digest_size: int) -> bytes:
    h = hashlib.blake2b(digest_size=digest_size)
    h.update(len(parts).to_bytes(2, "little"))
    for p in parts:
        h.update((p & _MASK64).to_bytes(8, "little"))
    return h.digest()


def u64(*parts: int) -> int:
    """Deterministic 64-bit integer from the key tuple."""
    return int.from_bytes(_digest(parts, 8), "little")


def u01(*parts: int) -> float:
    """Deterministic float strictly inside (0, 1)."""
    return (u64(*parts) + 0.5) / 2.0**64


def u01_array(n: int, *parts: int) -> np.ndarray:
    """n deterministic floats in (0, 1), keyed by (parts, block index)."""
    blocks = (n + _BLOCK_VALUES - 1) // _BLOCK_VALUES
    raw = b"".join(_digest(parts + (b,), 64) for b in range(blocks))
    ints = np.frombuffer(raw, dtype="<u8")[:n]
    return (ints.astype(np.float64) + 0.5) / 2.0**64


def symmetric_array(n: int, *parts: int) -> np.ndarray:
    """n deterministic floats in (-1, 1)."""
    return 2.0 * u01_array(n, *parts) - 1.0


def normal(*parts: int) -> float:
    """Deterministic standard-normal draw (Box-Muller on two sub-keys)."""
    u1 = u01(*parts, 0)
    u2 = u01(*parts, 1)
    return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)
