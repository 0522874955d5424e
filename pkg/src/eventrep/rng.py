"""Counter-based SplitMix64 streams.

Replicate ``r`` of a resampling procedure seeded with ``seed`` draws from the
SplitMix64 sequence started at ``key(seed, r)``, the r-th output of the
sequence started at ``seed``.  Values depend only on (seed, r, position), so
results do not depend on how replicates are scheduled, and any language with
64-bit wrapping integers can reproduce them.
"""

from __future__ import annotations

import numpy as np

GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S30, _S27, _S31 = np.uint64(30), np.uint64(27), np.uint64(31)
_MASK = (1 << 64) - 1


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


def splitmix64(state: int, n: int) -> np.ndarray:
    """First ``n`` outputs of SplitMix64 seeded with ``state``."""
    steps = np.arange(1, n + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        return _mix(np.uint64(state & _MASK) + steps * GAMMA)


def replicate_keys(seed: int, n_rep: int) -> np.ndarray:
    return splitmix64(seed, n_rep)


def stream_matrix(seed: int, n_rep: int, n: int, start: int = 0) -> np.ndarray:
    """``(n_rep, n)`` raw uint64 draws; row r is the stream of replicate ``start + r``."""
    keys = replicate_keys(seed, start + n_rep)[start:]
    steps = np.arange(1, n + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        return _mix(keys[:, None] + steps[None, :] * GAMMA)


def to_unit(u: np.ndarray) -> np.ndarray:
    """Top 53 bits as a float in [0, 1)."""
    return (u >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)


def resample_indices(seed: int, n_rep: int, n: int, start: int = 0) -> np.ndarray:
    """Bootstrap indices ``floor(unit * n)`` for each replicate."""
    idx = np.floor(to_unit(stream_matrix(seed, n_rep, n, start)) * n).astype(np.int64)
    return np.minimum(idx, n - 1)


def swap_masks(seed: int, n_rep: int, n: int, start: int = 0) -> np.ndarray:
    """Per-position coin flips from the top bit of each draw."""
    return (stream_matrix(seed, n_rep, n, start) >> np.uint64(63)).astype(bool)
