"""Deterministic, splittable random streams.

Every stochastic choice in the package (init, batching, dropout, step
subsampling, synthetic data) draws from a stream derived from the run seed
plus a string label. Streams with different labels are statistically
independent, and adding a new consumer never shifts the draws seen by
existing ones. Philox is counter-based, so state is cheap to serialize.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _label_entropy(label: str) -> int:
    digest = hashlib.blake2s(label.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def stream(seed: int, label: str) -> np.random.Generator:
    """Return the generator for (seed, label), always in its initial state."""
    seq = np.random.SeedSequence([int(seed), _label_entropy(label)])
    return np.random.Generator(np.random.Philox(seq))


def state_of(gen: np.random.Generator) -> dict:
    """Generator state as a JSON-safe dict."""
    raw = gen.bit_generator.state
    return {
        "bit_generator": raw["bit_generator"],
        "state": {
            "counter": [int(x) for x in raw["state"]["counter"]],
            "key": [int(x) for x in raw["state"]["key"]],
        },
        "buffer": [int(x) for x in raw["buffer"]],
        "buffer_pos": int(raw["buffer_pos"]),
        "has_uint32": int(raw["has_uint32"]),
        "uinteger": int(raw["uinteger"]),
    }


def restore(state: dict) -> np.random.Generator:
    """Rebuild a generator from state_of() output."""
    gen = np.random.Generator(np.random.Philox())
    gen.bit_generator.state = {
        "bit_generator": state["bit_generator"],
        "state": {
            "counter": np.array(state["state"]["counter"], dtype=np.uint64),
            "key": np.array(state["state"]["key"], dtype=np.uint64),
        },
        "buffer": np.array(state["buffer"], dtype=np.uint64),
        "buffer_pos": state["buffer_pos"],
        "has_uint32": state["has_uint32"],
        "uinteger": state["uinteger"],
    }
    return gen
