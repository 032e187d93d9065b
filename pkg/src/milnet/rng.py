"""Deterministic derived random streams.

Everything stochastic in the pipeline draws from a stream derived from one
root seed and a path of tokens, e.g. ``derive_rng(seed, "aug", epoch, i)``.
Streams for different paths are statistically independent and, because the
derivation depends only on (seed, path), any work order over samples or
epochs leaves the results unchanged.

Derivation: the path tokens are joined with "/" and hashed with BLAKE2b
(digest 16 bytes) keyed by the little-endian root seed; the digest seeds
numpy's PCG64 generator.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["derive_rng", "derive_seed"]


def derive_seed(root_seed: int, *path: int | str) -> int:
    """Mix a root seed and a token path into a 128-bit stream seed.

    The root seed is taken modulo 2**64, so derived seeds can themselves be
    used as roots for further derivation.
    """
    key = (int(root_seed) & 0xFFFFFFFFFFFFFFFF).to_bytes(8, "little")
    msg = "/".join(str(t) for t in path).encode("utf-8")
    digest = hashlib.blake2b(msg, key=key, digest_size=16).digest()
    return int.from_bytes(digest, "little")


def derive_rng(root_seed: int, *path: int | str) -> np.random.Generator:
    """Generator for the stream named by (root_seed, path)."""
    return np.random.default_rng(derive_seed(root_seed, *path))
