"""Labeled random streams derived from one master seed.

Every consumer of randomness asks for ``stream(master, label, *ids)``. The
derivation is ``SeedSequence(master, spawn_key=(LABELS[label], *ids))`` fed to
PCG64. Streams for different labels or ids are independent, so the order in
which clients are evaluated (serial or on a worker pool) can never change a
result. Changing ``LABELS`` or the derivation is a breaking change.
"""
from __future__ import annotations

import numpy as np

LABELS = {
    "data": 1,
    "partition": 2,
    "profiles": 3,
    "init": 4,
    "client": 5,
    "selection": 6,
    "assign": 7,
    "augment": 8,
    "robustness": 9,
}


def stream(master: int, label: str, *ids: int) -> np.random.Generator:
    if label not in LABELS:
        raise KeyError(f"unknown stream label {label!r}")
    key = (LABELS[label],) + tuple(int(i) for i in ids)
    seq = np.random.SeedSequence(int(master), spawn_key=key)
    return np.random.Generator(np.random.PCG64(seq))


class CountingRng:
    """Thin wrapper over a Generator that counts scalar variates handed out.

    ``permutation(n)`` is counted as ``n`` draws, ``uniform(size=s)`` as
    ``prod(s)``. The count makes per-client randomness auditable.
    """

    def __init__(self, gen: np.random.Generator):
        self._gen = gen
        self.draws = 0

    def uniform(self, low=0.0, high=1.0, size=None):
        out = self._gen.uniform(low, high, size)
        self.draws += 1 if size is None else int(np.prod(size))
        return out

    def permutation(self, n: int) -> np.ndarray:
        self.draws += int(n)
        return self._gen.permutation(n)


def counting_stream(master: int, label: str, *ids: int) -> CountingRng:
    return CountingRng(stream(master, label, *ids))
