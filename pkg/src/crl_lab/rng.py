"""Deterministic seed derivation for (nested) sub-tasks.

All stochastic entry points take a single 64-bit master seed.  Work that is
split into sub-tasks (environments, MC chunks, candidate fits, sweep cells)
derives one child stream per task from ``(master_seed, *path)`` through
numpy's splittable ``SeedSequence``, so results do not depend on scheduling
order and remain reproducible under parallel execution.
"""

from __future__ import annotations

import numpy as np

_PATH_MOD = 2**63


def _encode(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) % _PATH_MOD
    if isinstance(part, str):
        # stable 63-bit FNV-1a hash; python's hash() is salted per process
        h = 0xCBF29CE484222325
        for byte in part.encode("utf8"):
            h = ((h ^ byte) * 0x100000001B3) % (1 << 64)
        return h % _PATH_MOD
    raise TypeError(f"seed path entries must be int or str, got {type(part)!r}")


def child_seed(master_seed: int, *path) -> int:
    """Mix a master seed and a task path into a fresh 64-bit seed."""
    seq = np.random.SeedSequence([_encode(master_seed)] + [_encode(p) for p in path])
    return int(seq.generate_state(1, dtype=np.uint64)[0])


def spawn(master_seed: int, *path) -> np.random.Generator:
    """Generator for the sub-task identified by ``path`` under ``master_seed``."""
    seq = np.random.SeedSequence([_encode(master_seed)] + [_encode(p) for p in path])
    return np.random.Generator(np.random.PCG64(seq))
