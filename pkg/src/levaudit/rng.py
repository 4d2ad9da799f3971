"""Deterministic random streams on a counter-based generator.

All randomness in the package flows from one root seed through named streams.
A stream is a Philox generator keyed by SHA-256(seed, name); within a stream,
blocks of standard normals are addressed by absolute counter offset (Box-Muller
on the raw uniforms), so any block can be produced independently of how work
is chunked or scheduled.
"""
from __future__ import annotations

import hashlib

import numpy as np


def stream_key(seed: int, name: str) -> int:
    """128-bit Philox key for the named stream of a root seed."""
    digest = hashlib.sha256(f"{seed}:{name}".encode("utf-8")).digest()
    return int.from_bytes(digest[:16], "little")


def stream_generator(seed: int, name: str) -> np.random.Generator:
    """A plain sequential Generator on the named stream (offset 0)."""
    return np.random.Generator(np.random.Philox(key=stream_key(seed, name)))


def block_size(n_normals: int) -> int:
    """Uniform positions consumed by a block of ``n_normals`` normals.

    Philox advances its counter in ticks of 4 uniforms, so blocks are padded
    to a multiple of 4 (which also preserves Box-Muller pairing); fixed-size
    blocks are what make per-trial addressing schedule-independent.
    """
    return 4 * ((n_normals + 3) // 4)


def normals(key: int, n: int, *, offset: int = 0) -> np.ndarray:
    """``n`` standard normals at absolute uniform ``offset`` of stream ``key``.

    ``offset`` must be a multiple of 4 (one Philox counter tick) so that both
    the counter and the Box-Muller pair boundaries are identical no matter
    where a block starts.
    """
    if offset % 4:
        raise ValueError(f"offset must be a multiple of 4, got {offset}")
    bitgen = np.random.Philox(key=key)
    if offset:
        bitgen.advance(offset // 4)
    gen = np.random.Generator(bitgen)
    pairs = (n + 1) // 2
    u = gen.random(2 * pairs)
    u1 = 1.0 - u[0::2]  # maps [0,1) to (0,1]: keeps the log finite
    u2 = u[1::2]
    r = np.sqrt(-2.0 * np.log(u1))
    z = np.empty(2 * pairs)
    z[0::2] = r * np.cos(2.0 * np.pi * u2)
    z[1::2] = r * np.sin(2.0 * np.pi * u2)
    return z[:n]
