"""Per-purpose random streams derived from one top-level seed.

``derive_rng(seed, "augment")`` is ``numpy.random.default_rng([seed, 4])``;
extra integers (epoch, step, image index) extend the entropy list.  Every
subsystem therefore reproduces in isolation from ``(seed, purpose, ...)``.
"""

from __future__ import annotations

import numpy as np

STREAMS = {
    "data": 0,
    "init_classifier": 1,
    "init_stn": 2,
    "batcher": 3,
    "augment": 4,
    "weak_augment": 5,
    "corrupt": 6,
    "preview": 7,
    "split": 8,
}


def derive_rng(seed: int, purpose: str, *extra: int) -> np.random.Generator:
    try:
        stream = STREAMS[purpose]
    except KeyError:
        raise ValueError(f"unknown random stream {purpose!r}") from None
    return np.random.default_rng([int(seed), stream, *map(int, extra)])
