"""Seed splitting.

Every random draw in a simulation gets its own child seed::

    child = blake2b(repr((master, *parts)))[:8]  as an unsigned 64-bit int

where ``parts`` is typically ``(round, client_id, purpose_tag)``. Child
streams never depend on the order in which other streams are consumed, so
per-client work can run in any order (or in parallel) with identical
results.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(master: int, *parts) -> int:
    key = repr((int(master), *parts)).encode()
    return int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "little")


def child_rng(master: int, *parts) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, *parts))
