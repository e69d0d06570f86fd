"""Deterministic derivation of independent random streams.

Every stream is keyed by ``(master_seed, *labels)``. String labels are hashed
to 32-bit words, so ``stream(7, "tbi-point", "t", 12)`` is reproducible across
processes and independent of how work is split between workers.
"""

from __future__ import annotations

import hashlib

import numpy as np

# Shots are simulated in fixed-size blocks; each block owns one stream.
BLOCK_SIZE = 4096


def _word(label) -> int:
    if isinstance(label, (int, np.integer)):
        if label < 0:
            raise ValueError("integer stream labels must be non-negative")
        return int(label)
    digest = hashlib.blake2b(str(label).encode("utf-8"), digest_size=4).digest()
    return int.from_bytes(digest, "little")


def seed_sequence(master_seed: int, *labels) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=int(master_seed),
                                  spawn_key=tuple(_word(x) for x in labels))


def stream(master_seed: int, *labels) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed_sequence(master_seed, *labels)))


class StreamFactory:
    """Named family of streams rooted at one master seed.

    ``factory.child("t")`` narrows the key; ``factory.block(i)`` returns the
    generator for shot block ``i``.
    """

    def __init__(self, master_seed: int, *labels):
        self.master_seed = int(master_seed)
        self.labels = tuple(labels)

    def child(self, *labels) -> "StreamFactory":
        return StreamFactory(self.master_seed, *self.labels, *labels)

    def block(self, index: int) -> np.random.Generator:
        return stream(self.master_seed, *self.labels, "block", index)

    def generator(self) -> np.random.Generator:
        return stream(self.master_seed, *self.labels)

    def __repr__(self):
        return f"StreamFactory({self.master_seed}, {', '.join(map(repr, self.labels))})"


def as_generator(rng) -> np.random.Generator:
    """Accept a Generator, a StreamFactory, an int seed, or None."""
    if isinstance(rng, np.random.Generator):
        return rng
    if isinstance(rng, StreamFactory):
        return rng.generator()
    return np.random.default_rng(rng)
