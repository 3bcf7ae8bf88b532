"""Counter-based random streams.

Client ``i`` of a run seeded with ``seed`` draws from a Philox stream keyed
``(seed, i)``; its counter advances only with that client's own draws, so
the values it sees at iteration t do not depend on how clients are
scheduled.  Control streams (return index, stage sampling, partitioning)
use the high half of the key space.
"""
from __future__ import annotations

import zlib

import numpy as np

_MASK64 = (1 << 64) - 1
_CONTROL_BASE = 1 << 63


def client_stream(seed: int, client_id: int) -> np.random.Generator:
    if not 0 <= client_id < _CONTROL_BASE:
        raise ValueError(f"client id out of range: {client_id}")
    return np.random.Generator(np.random.Philox(key=[seed & _MASK64, client_id]))


def client_streams(seed: int, n: int) -> list[np.random.Generator]:
    return [client_stream(seed, i) for i in range(n)]


def control_stream(seed: int, tag: str) -> np.random.Generator:
    word = _CONTROL_BASE | zlib.crc32(tag.encode())
    return np.random.Generator(np.random.Philox(key=[seed & _MASK64, word]))
