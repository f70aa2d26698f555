"""Counter-based random streams keyed by (seed, tag, step)."""

from __future__ import annotations

import numpy as np

from implicitfilter.constants import STREAM_PROPOSAL
from implicitfilter.errors import InvalidInput


class ParticleStreams:
    """Deterministic random streams for a filter run.

    Each (tag, step) pair gets its own Philox generator derived from the master
    seed. Row ``i`` of a normal block is particle ``i``'s reference variable, so
    the draw of a particle depends only on (seed, step, i) and not on how the
    particles are later distributed over workers.
    """

    def __init__(self, seed: int) -> None:
        if seed < 0:
            raise InvalidInput("seed must be non-negative")
        self._seed = int(seed)

    @property
    def seed(self) -> int:
        return self._seed

    def generator(self, step: int, tag: int = STREAM_PROPOSAL) -> np.random.Generator:
        """Return a fresh generator for ``(tag, step)``."""
        sequence = np.random.SeedSequence([self._seed, int(tag), int(step)])
        return np.random.Generator(np.random.Philox(sequence))

    def normals(self, step: int, n_particles: int, dim: int, tag: int = STREAM_PROPOSAL):
        """Standard-normal block of shape (n_particles, dim) for one step."""
        return self.generator(step, tag).standard_normal((n_particles, dim))


def replicate_seed(master_seed: int, index: int) -> int:
    """Seed of repeat ``index`` derived deterministically from the master seed."""
    sequence = np.random.SeedSequence([int(master_seed), int(index)])
    return int(sequence.generate_state(1, dtype=np.uint32)[0])
