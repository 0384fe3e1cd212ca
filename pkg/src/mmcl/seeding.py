"""Deterministic seed expansion.

A single 64-bit root seed is expanded into independent sub-seeds with the
splitmix64 mixer. Sub-seed ``i`` of root ``r`` is the ``i+1``-th output of a
splitmix64 stream started at ``r``; streams are addressed by name so that
paired runs can share e.g. the scene stream while differing elsewhere.
"""

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15

# Fixed stream indices. Changing these changes every generated artifact.
STREAMS = {
    "queries": 0,
    "model": 1,
    "train_scenes": 2,
    "eval_scenes": 3,
    "prototypes": 4,
    "gradcheck": 5,
}


def splitmix64(state):
    """Advance a splitmix64 state; return ``(next_state, output)``."""
    state = (state + GOLDEN_GAMMA) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return state, z ^ (z >> 31)


def sub_seed(root, index):
    """Return the ``index``-th splitmix64 output derived from ``root``."""
    if not 0 <= root <= MASK64:
        raise ValueError(f"seed must be an unsigned 64-bit integer, got {root}")
    state = root
    out = 0
    for _ in range(index + 1):
        state, out = splitmix64(state)
    return out


def stream_rng(root, stream):
    """A numpy Generator for a named stream of ``root``."""
    return np.random.default_rng(sub_seed(root, STREAMS[stream]))
