"""Counter-based random streams.

Every random draw in the package comes from a Philox-4x64 generator keyed by
``(seed, stream_id)``. The stream id of a namespace path such as
``("grpo", "rollout", 3)`` is the first 8 bytes (little endian) of the
SHA-256 digest of its parts joined with ``"/"``. The 128-bit Philox key is
``seed | (stream_id << 64)``, so a port that implements Philox-4x64-10 and
SHA-256 reproduces every stream bit for bit.
"""

from __future__ import annotations

import hashlib

import numpy as np

_U64 = (1 << 64) - 1


def stream_id(*namespace) -> int:
    text = "/".join(str(p) for p in namespace)
    return int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "little")


def derive_seed(seed: int, *namespace) -> int:
    """A 64-bit child seed, for handing a fresh root seed to a sub-run."""
    g = stream(seed, "derive", *namespace)
    return int(g.integers(0, _U64, dtype=np.uint64, endpoint=True))


def stream(seed: int, *namespace) -> np.random.Generator:
    if not 0 <= int(seed) <= _U64:
        raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
    key = int(seed) | (stream_id(*namespace) << 64)
    return np.random.Generator(np.random.Philox(key=key))
