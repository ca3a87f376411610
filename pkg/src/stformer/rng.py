"""Seeded counter-based random streams.

Every source of randomness in a run is a named Philox stream derived from
one base seed, so re-running with the same seed is bit-exact and changing
one consumer (say, the attention masks) cannot shift the draws of another.

Stream purposes and their draw order:

* ``init``     - parameter initialisation, consumed once at model build in
                 parameter-name order (only linear weights and the learned
                 token/position tables draw; biases and norm affines do not).
* ``mask``     - attention keep/drop masks, one uniform block per attention
                 call, per encoder, per forward pass, training mode only.
* ``dropout``  - channel-mixer dropout masks, same cadence as ``mask``.
* ``shuffle``  - batch shuffling, one permutation per epoch.
* ``corpus``   - corpus synthesis; each slide gets an independent child
                 stream keyed by its index so generation may parallelise.
* ``genes``    - corpus-level gene weight matrix draws.
* ``select``   - gene panel subsampling.
* ``pca``      - power-iteration start vector.
"""

from __future__ import annotations

import numpy as np

_PURPOSES = {
    "init": 0,
    "mask": 1,
    "dropout": 2,
    "shuffle": 3,
    "corpus": 4,
    "genes": 5,
    "select": 6,
    "pca": 7,
}


def stream(seed: int, purpose: str) -> np.random.Generator:
    """Return the named Philox stream for ``seed``."""
    try:
        pid = _PURPOSES[purpose]
    except KeyError:
        raise ValueError(f"unknown rng purpose {purpose!r}") from None
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, pid])))


def child_stream(seed: int, purpose: str, index: int) -> np.random.Generator:
    """Independent sub-stream, e.g. one per slide during corpus synthesis."""
    pid = _PURPOSES[purpose]
    return np.random.Generator(
        np.random.Philox(np.random.SeedSequence([seed, pid, index]))
    )


class RngHub:
    """Lazily-created bundle of the named streams for one run."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._streams: dict[str, np.random.Generator] = {}

    def get(self, purpose: str) -> np.random.Generator:
        if purpose not in self._streams:
            self._streams[purpose] = stream(self.seed, purpose)
        return self._streams[purpose]
