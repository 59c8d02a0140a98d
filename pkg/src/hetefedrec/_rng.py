"""Deterministic RNG stream derivation.

Every random decision in a run draws from a generator built as::

    SeedSequence([global_seed, STREAM_ID, *keys])

so streams for different purposes (data split, parameter init, client
training, client selection, distillation) never overlap, and a client's
stream for a given round does not depend on which other clients ran or in
which order.
"""

import numpy as np

STREAMS = {
    "data": 0,
    "init": 1,
    "client": 2,
    "select": 3,
    "distill": 4,
    "user_init": 5,
    "synth": 6,
}


def stream(seed: int, name: str, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), STREAMS[name], *map(int, keys)]))
