"""Deterministic named random streams.

All randomness flows from one 64-bit seed; each component draws from its
own named sub-stream (generator, init, gumbel, ...) so components can be
re-seeded independently without disturbing each other.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _name_key(name: str) -> int:
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def named_stream(seed: int, name: str) -> np.random.Generator:
    """A generator for sub-stream `name` of `seed`; stable across runs."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), _name_key(name)]))


def generator_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def restore_generator(state: dict) -> np.random.Generator:
    rng = np.random.default_rng(0)
    rng.bit_generator.state = state
    return rng
