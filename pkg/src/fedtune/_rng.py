"""Deterministic seed derivation.

Every random stream in the package is a ``numpy.random.Generator`` built from a
``SeedSequence`` whose spawn key is an explicit tuple of integers, e.g.
``(trial_seed, config_id, round_index)``. Replays are therefore portable: the
same key tuple always yields the same stream, independent of call order.
"""

import hashlib
import json

import numpy as np


def derive_seed(*keys):
    """Collapse a key tuple into a single 63-bit integer seed."""
    ss = np.random.SeedSequence(entropy=_as_int(keys[0]), spawn_key=tuple(_as_int(k) for k in keys[1:]))
    return int(ss.generate_state(1, dtype=np.uint64)[0]) >> 1


def make_rng(*keys):
    """Return a Generator for the given key tuple."""
    ss = np.random.SeedSequence(entropy=_as_int(keys[0]), spawn_key=tuple(_as_int(k) for k in keys[1:]))
    return np.random.default_rng(ss)


def check_rng(random_state):
    """Coerce ``None``/int/Generator into a Generator (sklearn's check_random_state, numpy-Generator flavour)."""
    if isinstance(random_state, np.random.Generator):
        return random_state
    if random_state is None:
        return np.random.default_rng()
    if isinstance(random_state, (int, np.integer)):
        return np.random.default_rng(int(random_state))
    raise ValueError(f"{random_state!r} cannot be used to seed a numpy Generator")


def stable_hash(obj):
    """Order-independent 63-bit hash of a JSON-serialisable object."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return int.from_bytes(hashlib.sha256(blob).digest()[:8], "big") >> 1


def _as_int(key):
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ValueError("seed keys must be non-negative")
        return int(key)
    if isinstance(key, str):
        return stable_hash(key)
    raise TypeError(f"unsupported seed key {key!r}")
