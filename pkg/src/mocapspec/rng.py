"""Deterministic random streams with hierarchical derivation.

Every source of randomness in the package (parameter init, dropout masks,
shuffling, simulation noise) draws from an RngState, so a run is fully
reproducible from a single integer seed.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError


class RngState:
    """A deterministic generator keyed by (seed, derivation path).

    The underlying algorithm is PCG64 seeded through numpy's SeedSequence,
    so the same (seed, path) always replays the same stream. `child` derives
    statistically independent substreams without consuming this one, which
    lets e.g. every (epoch, step, item) dropout mask have its own key.
    """

    algorithm = "pcg64"

    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        seed = int(seed)
        if seed < 0:
            raise ConfigError(f"seed must be non-negative, got {seed}")
        self.seed = seed
        self.path = tuple(int(p) for p in path)
        self.gen = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence(self.seed, spawn_key=self.path))
        )

    def child(self, *path: int) -> "RngState":
        """Derive the substream keyed by this state's path extended by `path`."""
        return RngState(self.seed, self.path + tuple(int(p) for p in path))

    def __repr__(self) -> str:
        return f"RngState(seed={self.seed}, path={self.path})"
