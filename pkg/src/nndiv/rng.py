"""Counter-based pseudo-random numbers.

Every draw is a pure function of (key, index, slot), so sampling is
stateless: element i of a sample set never depends on how many elements
were drawn before it, and independent consumers can share a seed without
sharing a generator object. The mixer is the splitmix64 finalizer, applied
twice with distinct stream constants.
"""

from __future__ import annotations

import hashlib

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MULT1 = np.uint64(0xBF58476D1CE4E5B9)
_MULT2 = np.uint64(0x94D049BB133111EB)
_SLOT = np.uint64(0xC2B2AE3D27D4EB4F)

_U53 = float(1 << 53)


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z + _GOLDEN) & np.uint64(0xFFFFFFFFFFFFFFFF)
    z = (z ^ (z >> np.uint64(30))) * _MULT1
    z = (z ^ (z >> np.uint64(27))) * _MULT2
    return z ^ (z >> np.uint64(31))


def derive_key(seed: int, *labels: object) -> int:
    """Collapse a seed plus purpose labels into a 64-bit stream key."""
    h = hashlib.sha256()
    h.update((int(seed) % (1 << 64)).to_bytes(8, "little"))  # two's complement for negatives
    for label in labels:
        h.update(repr(label).encode("utf-8"))
        h.update(b"\x00")
    return int.from_bytes(h.digest()[:8], "little")


def raw(key: int, index: np.ndarray | int, slot: int = 0) -> np.ndarray:
    """uint64 words for the given counter positions."""
    idx = np.asarray(index, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = _mix(np.uint64(key) ^ _mix(idx))
        z = _mix(z ^ (np.uint64(slot) * _SLOT))
    return z


def uniform(key: int, index: np.ndarray | int, slot: int = 0) -> np.ndarray:
    """float64 in [0, 1)."""
    return (raw(key, index, slot) >> np.uint64(11)).astype(np.float64) / _U53


def normal(key: int, index: np.ndarray | int, slot: int = 0) -> np.ndarray:
    """Standard normal via Box-Muller; each (index, slot) uses two raw slots."""
    u1 = (raw(key, index, 2 * slot) >> np.uint64(11)).astype(np.float64)
    u1 = (u1 + 1.0) / _U53  # (0, 1]: log is finite
    u2 = uniform(key, index, 2 * slot + 1)
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)


def integers(key: int, index: np.ndarray | int, upper: int, slot: int = 0) -> np.ndarray:
    """Integers in [0, upper) with negligible modulo bias for upper << 2^64."""
    return (raw(key, index, slot) % np.uint64(upper)).astype(np.int64)


def permutation(key: int, n: int) -> np.ndarray:
    """Deterministic permutation of range(n) by sorting per-element keys."""
    keys = raw(key, np.arange(n))
    return np.argsort(keys, kind="stable")
