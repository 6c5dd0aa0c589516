"""Counter-based uniforms for reproducible, order-free data generation.

Every random number is a pure function of ``(seed, stream, record, draw)``:

    key     = mix(mix(seed ^ STREAM[stream]) + record)
    uniform = top53(mix(key + (draw + 1) * GOLDEN)) / 2**53

where ``mix`` is the SplitMix64 finalizer.  Record ``i`` therefore sees the
same numbers whether the dataset is generated serially, in chunks, or in
parallel, and regardless of the total record count.
"""

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)

STREAMS = {
    "pairs": 0x01,
    "flips": 0x02,
    "rankings": 0x03,
    "perturb": 0x04,
    "split": 0x05,
}


def _mix(z):
    z = z.copy()
    z ^= z >> np.uint64(30)
    z *= _M1
    z ^= z >> np.uint64(27)
    z *= _M2
    z ^= z >> np.uint64(31)
    return z


def record_keys(seed: int, stream: str, records) -> np.ndarray:
    """Per-record 64-bit substream keys."""
    base = np.uint64(int(seed) & 0xFFFFFFFFFFFFFFFF) ^ np.uint64(STREAMS[stream] << 56)
    base = _mix(np.array([base], dtype=np.uint64))[0]
    idx = np.asarray(records, dtype=np.uint64)
    with np.errstate(over="ignore"):
        return _mix(idx + base)


def uniforms(keys: np.ndarray, draw: int) -> np.ndarray:
    """The ``draw``-th uniform in [0, 1) of each substream."""
    with np.errstate(over="ignore"):
        z = _mix(keys + np.uint64(draw + 1) * _GOLDEN)
    return (z >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)


def derive_seed(*parts: int) -> int:
    """Deterministically combine integers into one 63-bit seed."""
    z = np.uint64(0x243F6A8885A308D3)
    with np.errstate(over="ignore"):
        for p in parts:
            z = _mix(np.array([z ^ np.uint64(int(p) & 0xFFFFFFFFFFFFFFFF)],
                              dtype=np.uint64))[0] + _GOLDEN
    return int(z) >> 1


def categorical(u: np.ndarray, probs: np.ndarray) -> np.ndarray:
    """Inverse-CDF draws; ``probs`` has one row per entry of ``u``."""
    cdf = np.cumsum(probs, axis=-1)
    idx = (u[:, None] * cdf[:, -1:] >= cdf).sum(axis=1)
    return np.minimum(idx, probs.shape[-1] - 1)
