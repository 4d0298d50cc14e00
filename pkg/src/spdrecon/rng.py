"""Reproducible random streams.

Every random draw in the package comes from a Philox-4x64 counter-based
generator (``numpy.random.Philox``) keyed by ``numpy.random.SeedSequence``
with ``entropy=seed`` and ``spawn_key=(domain, stream)``.  Two draws share
state only when ``(seed, domain, stream)`` are identical, so per-frame
streams can be generated in any order, or in parallel, and still reproduce
the sequential result bit for bit.

Domains in use:

* ``0``            captured-data simulation (stream = frame index)
* ``1 + t``        synthetic measurements at sampler step ``t``
* ``SAMPLER_NOISE`` Gaussian iterates of the restoration sampler
* ``CALIBRATION + t`` constant-flux patches for response calibration
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import InputDomainError

CAPTURE_DOMAIN = 0
SAMPLER_NOISE_DOMAIN = 1 << 20
CALIBRATION_DOMAIN = 1 << 21

_U64_MAX = (1 << 64) - 1


@dataclass(frozen=True)
class RngSeed:
    seed: int
    stream: int = 0
    domain: int = CAPTURE_DOMAIN

    def __post_init__(self):
        if not 0 <= int(self.seed) <= _U64_MAX:
            raise InputDomainError(f"seed must be an unsigned 64-bit integer, got {self.seed}")
        if self.stream < 0 or self.domain < 0:
            raise InputDomainError("stream and domain must be non-negative")

    def with_stream(self, stream: int) -> RngSeed:
        return replace(self, stream=int(stream))

    def with_domain(self, domain: int) -> RngSeed:
        return replace(self, domain=int(domain))

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(int(self.seed), spawn_key=(int(self.domain), int(self.stream)))
        return np.random.Generator(np.random.Philox(ss))


def as_seed(seed: RngSeed | int) -> RngSeed:
    return seed if isinstance(seed, RngSeed) else RngSeed(int(seed))


def derive_seed(seed: int, *keys: int) -> int:
    """Hash ``seed`` and integer ``keys`` into a fresh 64-bit seed."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def entropy_seed() -> int:
    return int(np.random.SeedSequence().generate_state(1, dtype=np.uint64)[0])
