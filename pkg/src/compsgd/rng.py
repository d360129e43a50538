"""Counter-based random streams.

Every random draw in a simulation comes from a Philox generator keyed by
(root seed, phase, entity, iteration, salt).  Streams are addressable rather
than sequential, so execution order cannot change results, and two algorithm
variants run with the same root seed share their gradient and uplink draws
even when their downlink behaviour differs.
"""
from __future__ import annotations

import numpy as np

# Phase codes for the second key word.
PHASE_GRAD = 0
PHASE_UP = 1
PHASE_DWN = 2
PHASE_PARTICIPATION = 3
PHASE_PROBLEM = 4
PHASE_SIGMA = 5
PHASE_CHECK = 6

_MASK64 = (1 << 64) - 1

_PHASE_BITS = 8
_SALT_BITS = 16
_ENTITY_BITS = 16
_ITER_BITS = 24


def _key_word(phase: int, entity: int, iteration: int, salt: int) -> int:
    if not 0 <= phase < (1 << _PHASE_BITS):
        raise ValueError(f"phase out of range: {phase}")
    if not 0 <= salt < (1 << _SALT_BITS):
        raise ValueError(f"salt out of range: {salt}")
    if not 0 <= entity < (1 << _ENTITY_BITS):
        raise ValueError(f"entity out of range: {entity}")
    if not 0 <= iteration < (1 << _ITER_BITS):
        raise ValueError(f"iteration out of range: {iteration}")
    return (phase << 56) | (salt << 40) | (entity << 24) | iteration


def stream(root: int, phase: int, entity: int = 0, iteration: int = 0,
           salt: int = 0) -> np.random.Generator:
    """Return a fresh generator for one (phase, entity, iteration, salt) slot.

    `entity` is a worker or group index, `iteration` the engine step count,
    `salt` a replay index used by Monte-Carlo validation to re-randomize a
    phase without touching any other stream.
    """
    word = _key_word(phase, entity, iteration, salt)
    key = np.array([root & _MASK64, word], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


class StreamPool:
    """Re-keys one shared Philox generator instead of constructing a new one
    per draw site (construction pulls OS entropy and dominates small-vector
    workloads).  The generator returned by stream() is invalidated by the
    next stream() call on the same pool; draws from it must complete first.
    Single-threaded use only.  Produces draws bit-identical to rng.stream().
    """

    def __init__(self):
        self._bg = np.random.Philox(key=0)
        self._gen = np.random.Generator(self._bg)
        self._state = self._bg.state

    def stream(self, root: int, phase: int, entity: int = 0,
               iteration: int = 0, salt: int = 0) -> np.random.Generator:
        word = _key_word(phase, entity, iteration, salt)
        st = self._state
        inner = st["state"]
        inner["key"][0] = root & _MASK64
        inner["key"][1] = word
        inner["counter"][:] = 0
        st["buffer_pos"] = 4
        st["has_uint32"] = 0
        st["uinteger"] = 0
        self._bg.state = st
        return self._gen
