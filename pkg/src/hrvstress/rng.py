"""Seed plumbing: a documented, bit-exact shuffle PRNG and per-stage seed derivation.

Data splits must be reproducible across languages and library versions, so the
split shuffle does not rely on numpy's generator.  Everything here is specified
bit-exactly:

SplitMix64 (public domain, Steele et al.):

    state := (state + 0x9E3779B97F4A7C15) mod 2^64
    z := state
    z := (z XOR (z >> 30)) * 0xBF58476D1DEA3E59  mod 2^64
    z := (z XOR (z >> 27)) * 0x94D049BB133111EB  mod 2^64
    output  z XOR (z >> 31)

Fisher-Yates shuffle (in-place, descending):

    for i = n-1 .. 1:  j := next_u64() mod (i + 1); swap(a[i], a[j])

The modulo introduces a bias below 2^-40 for any realistic n; accepted and
documented rather than rejected-sampled away.

Stage seeds derive from one root seed so that stage-level re-runs agree with
full runs:

    stage_seed := little-endian uint64 of the first 8 bytes of
                  SHA-256(b"<root_seed>:<stage_name>")
"""

from __future__ import annotations

import hashlib

_MASK64 = (1 << 64) - 1


class SplitMix64:
    """Minimal 64-bit PRNG; deterministic, trivially portable."""

    def __init__(self, seed: int):
        self._state = seed & _MASK64

    def next_u64(self) -> int:
        self._state = (self._state + 0x9E3779B97F4A7C15) & _MASK64
        z = self._state
        z = ((z ^ (z >> 30)) * 0xBF58476D1DEA3E59) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates using next_u64() mod (i+1)."""
        for i in range(len(items) - 1, 0, -1):
            j = self.next_u64() % (i + 1)
            items[i], items[j] = items[j], items[i]


def derive_seed(root_seed: int, stage: str) -> int:
    """Derive a stage seed from the root seed: SHA-256 of "<seed>:<stage>", first 8 bytes."""
    digest = hashlib.sha256(f"{root_seed}:{stage}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")
