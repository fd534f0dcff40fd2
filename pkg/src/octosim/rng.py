"""Seeded random streams.

Every random decision in the simulator is drawn from a Philox4x64-10
generator (numpy's ``Philox`` bit generator).  Philox is counter based, so a
stream is fully identified by its 128-bit key: word 0 carries the experiment
seed and word 1 a 64-bit stream selector.

Two kinds of streams exist:

* ``make_rng(seed, stream)`` -- a sequential stream owned by one caller.
* ``packet_rng(seed, node_id, packet)`` -- a stream keyed by the identity of a
  (node, packet) pair.  Decisions drawn from it do not depend on the order in
  which the engine happens to visit packets, so every scheduler suite sees the
  exact same workload realisation.
"""

from __future__ import annotations

import hashlib

import numpy as np

MASK64 = (1 << 64) - 1


def stream_key(*parts) -> int:
    """Stable 64-bit key for an arbitrary tuple of str/int parts."""
    text = "\x1f".join(str(p) for p in parts).encode()
    return int.from_bytes(hashlib.blake2b(text, digest_size=8).digest(), "little")


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    key = np.array([seed & MASK64, stream & MASK64], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def packet_rng(seed: int, node_id: str, packet) -> np.random.Generator:
    return make_rng(seed, stream_key(node_id, packet.stream_id, packet.seq, packet.lineage))
