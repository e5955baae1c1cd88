"""Counter-based, splittable normal streams for Monte Carlo shots.

Every shot owns a 64-bit stream key derived from
``(master_seed, point_index, replica_index)``. The n-th standard normal of a
stream is a pure function of ``(key, n)``: two SplitMix64 outputs at
counters ``2n`` and ``2n + 1`` feed one Box-Muller transform (cosine branch).
No generator state exists, so any shot can be replayed in isolation and
shots may be scheduled in any order or on any number of threads.
"""

from __future__ import annotations

import math

import numpy as np

from ._backend import njit

MASK64 = (1 << 64) - 1

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MUL1 = np.uint64(0xBF58476D1CE4E5B9)
_MUL2 = np.uint64(0x94D049BB133111EB)
_POINT_SALT = np.uint64(0xD1B54A32D192ED03)
_REPLICA_SALT = np.uint64(0x8CB92BA72F3D8DD7)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_ONE = np.uint64(1)
_TWO = np.uint64(2)
_INV53 = 1.0 / 9007199254740992.0
_TWO_PI = 2.0 * math.pi


def _as_u64(a) -> np.ndarray:
    """Wrap python ints (possibly negative or > 2**63) into uint64 arrays."""
    arr = np.asarray(a)
    if arr.dtype == np.uint64:
        return arr
    if arr.dtype == object or arr.dtype.kind in "iu":
        flat = [int(v) & MASK64 for v in np.ravel(arr).tolist()]
        return np.array(flat, dtype=np.uint64).reshape(arr.shape)
    raise TypeError(f"integer seed/index expected, got dtype {arr.dtype}")


def mix64(z: np.ndarray) -> np.ndarray:
    """SplitMix64 finalizer on uint64 arrays (wrapping arithmetic)."""
    z = np.asarray(z, dtype=np.uint64)
    z = (z ^ (z >> _S30)) * _MUL1
    z = (z ^ (z >> _S27)) * _MUL2
    return z ^ (z >> _S31)


def stream_keys(master_seed: int, point_index, replica_index) -> np.ndarray:
    """Stream keys for broadcastable arrays of point and replica indices."""
    seed = _as_u64(np.atleast_1d(master_seed))
    p = _as_u64(np.atleast_1d(point_index))
    r = _as_u64(np.atleast_1d(replica_index))
    k = mix64(seed + _GAMMA)
    k = mix64(k ^ mix64(p * _POINT_SALT + _GAMMA))
    k = mix64(k ^ mix64(r * _REPLICA_SALT + _GAMMA))
    return k


def stream_key(master_seed: int, point_index: int, replica_index: int) -> int:
    return int(stream_keys(master_seed, point_index, replica_index)[0])


def derive_seed(master_seed: int, *labels: int) -> int:
    """Child seed for a labelled sub-experiment (e.g. an outer iteration)."""
    k = mix64(_as_u64(np.atleast_1d(master_seed)) + _GAMMA)
    for lab in labels:
        k = mix64(k ^ mix64(_as_u64(np.atleast_1d(lab)) * _POINT_SALT + _GAMMA))
    return int(k[0])


def uniform_bits(keys: np.ndarray, counters: np.ndarray) -> np.ndarray:
    keys = np.asarray(keys, dtype=np.uint64)
    counters = np.asarray(counters, dtype=np.uint64)
    return mix64(keys + (counters + _ONE) * _GAMMA)


def normals(keys: np.ndarray, index: np.ndarray) -> np.ndarray:
    """Standard normals at (broadcast) ``keys`` and normal indices ``index``."""
    index = np.asarray(index, dtype=np.uint64)
    b0 = uniform_bits(keys, index * _TWO)
    b1 = uniform_bits(keys, index * _TWO + _ONE)
    u1 = ((b0 >> _S11) + _ONE).astype(np.float64) * _INV53
    u2 = (b1 >> _S11).astype(np.float64) * _INV53
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(_TWO_PI * u2)


def shot_normals(key: int, n_steps: int, dim: int) -> np.ndarray:
    """The ``(n_steps, dim)`` increments a single shot consumes."""
    idx = np.arange(n_steps * dim, dtype=np.uint64)
    return normals(_as_u64(np.atleast_1d(key)), idx).reshape(n_steps, dim)


@njit(cache=True, inline="always")
def _mix64_nb(z):
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


@njit(cache=True, inline="always")
def normal_nb(key, index):
    """Scalar kernel twin of :func:`normals`; ``key``/``index`` are uint64."""
    gamma = np.uint64(0x9E3779B97F4A7C15)
    c0 = index * np.uint64(2)
    b0 = _mix64_nb(key + (c0 + np.uint64(1)) * gamma)
    b1 = _mix64_nb(key + (c0 + np.uint64(2)) * gamma)
    u1 = np.float64((b0 >> np.uint64(11)) + np.uint64(1)) * (1.0 / 9007199254740992.0)
    u2 = np.float64(b1 >> np.uint64(11)) * (1.0 / 9007199254740992.0)
    return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)
