"""Counter-based, splittable random streams.

Two flavours share one keying scheme ``(master seed, key_1, key_2, ...)``:

* :func:`generator` returns a NumPy ``Generator`` backed by Philox, for the
  vectorised parts of the code (synthesis, turbulence draws, test harnesses).
* :func:`stream_key` / :func:`uniform` are a SplitMix64-style hash usable from
  numba kernels: the ``i``-th uniform of a stream is a pure function of
  ``(key, i)``, so results never depend on how work is split across threads.
"""

from __future__ import annotations

import numpy as np
from numba import njit

_MASK = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB
_CHILD = 0x243F6A8885A308D3


def mix64_py(z: int) -> int:
    """SplitMix64 finaliser on Python ints (reference for the jitted version)."""
    z &= _MASK
    z = ((z ^ (z >> 30)) * _M1) & _MASK
    z = ((z ^ (z >> 27)) * _M2) & _MASK
    return z ^ (z >> 31)


def stream_key(seed: int, *keys: int) -> int:
    """Fold a master seed and any number of integer keys into a 64-bit stream key."""
    k = mix64_py(int(seed) ^ 0x5DEECE66D)
    for key in keys:
        k = mix64_py((k + GOLDEN * (int(key) + 1)) & _MASK)
    return k


def subkey_py(key: int, index: int) -> int:
    return mix64_py((mix64_py(key ^ _CHILD) + GOLDEN * (index + 1)) & _MASK)


def uniform_py(key: int, counter: int) -> float:
    z = mix64_py((key + GOLDEN * (counter + 1)) & _MASK)
    return (z >> 11) * 2.0**-53


@njit(inline="always", cache=True)
def mix64(z):
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_M1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_M2)
    return z ^ (z >> np.uint64(31))


@njit(inline="always", cache=True)
def subkey(key, index):
    """Key of child stream ``index`` (e.g. one photon path) of stream ``key``."""
    return mix64(mix64(key ^ np.uint64(_CHILD)) + np.uint64(GOLDEN) * (np.uint64(index) + np.uint64(1)))


@njit(inline="always", cache=True)
def uniform(key, counter):
    """Uniform double in [0, 1) at position ``counter`` of stream ``key``."""
    z = mix64(key + np.uint64(GOLDEN) * (np.uint64(counter) + np.uint64(1)))
    return np.float64(z >> np.uint64(11)) * (1.0 / 9007199254740992.0)


def generator(seed: int, *keys: int) -> np.random.Generator:
    """Philox generator for the stream ``(seed, *keys)``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.Philox(ss))
