"""Reproducible random streams.

Every random draw in the package goes through :func:`stream`. A stream is a
Philox (counter-based, 64-bit) generator keyed by a base seed plus a tuple of
non-negative integer labels, e.g. ``stream(seed, replication, STREAM_DATA)``.
Because the key fully determines the stream, Monte Carlo replications produce
the same numbers regardless of the order or process in which they run.
"""

from __future__ import annotations

import numpy as np

# Stream labels. Keep values stable: changing them changes every result.
STREAM_DATA = 1
STREAM_BETA = 2
STREAM_FOLDS = 3
STREAM_BANDS = 4
STREAM_EVAL = 5
STREAM_MLP = 6

_MASK64 = (1 << 64) - 1


def stream(seed: int, *labels: int) -> np.random.Generator:
    """Return an independent generator for ``(seed, *labels)``."""
    if seed < 0 or any(lab < 0 for lab in labels):
        raise ValueError("seed and stream labels must be non-negative")
    ss = np.random.SeedSequence([int(seed) & _MASK64, *map(int, labels)])
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(seed: int, *labels: int) -> int:
    """A 63-bit integer seed for the sub-stream ``(seed, *labels)``."""
    ss = np.random.SeedSequence([int(seed) & _MASK64, *map(int, labels)])
    return int(ss.generate_state(1, np.uint64)[0] >> np.uint64(1))
