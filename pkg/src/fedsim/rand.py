"""Deterministic named RNG substreams derived from a single root seed.

Every stochastic site in the package (splits, sampling, init, augmentation,
dropout, teacher training, per-client per-round batches) pulls its own
generator via ``substream(seed, *labels)``. Two sites with different label
paths never share a stream, and the same (seed, labels) pair always yields
the same stream, which is what makes whole runs bit-reproducible.
"""

from __future__ import annotations

import hashlib

import numpy as np


def substream(seed: int, *labels) -> np.random.Generator:
    """Return a PCG64 generator keyed by the root seed and a label path."""
    h = hashlib.sha256()
    h.update(str(int(seed)).encode("utf-8"))
    for label in labels:
        h.update(b"/")
        h.update(str(label).encode("utf-8"))
    words = np.frombuffer(h.digest(), dtype=np.uint32)
    seq = np.random.SeedSequence(entropy=[int(w) for w in words])
    return np.random.Generator(np.random.PCG64(seq))
