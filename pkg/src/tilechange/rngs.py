"""Named random substreams derived from a single root seed.

Each pipeline stage draws from its own substream so that, for example,
regenerating synthetic scenes does not perturb weight initialization or
bootstrap resampling. Substreams are derived with SeedSequence spawn keys,
which guarantees independence and bitwise reproducibility for a fixed
(root seed, name, indices) triple.
"""

from __future__ import annotations

import numpy as np

from .errors import DomainError

# Stable stream ids: renumbering would silently change every seeded result.
_STREAMS = {
    "synth": 0,
    "init": 1,
    "shuffle": 2,
    "augment": 3,
    "sample": 4,
    "bootstrap": 5,
    "test": 6,
    "irmad": 7,
}


def substream(seed: int, name: str, *indices: int) -> np.random.Generator:
    """Return the generator for stream `name` (optionally sub-indexed).

    Extra `indices` create per-epoch / per-item streams, e.g.
    ``substream(seed, "shuffle", epoch)``.
    """
    if name not in _STREAMS:
        raise DomainError(f"unknown rng stream {name!r}; known: {sorted(_STREAMS)}")
    key = (_STREAMS[name],) + tuple(int(i) for i in indices)
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=key))
