"""Named random sub-streams derived from one root seed."""

import hashlib

import numpy as np

DATASET = "dataset"
EVAL = "eval"
TRAIN = "train"
CALIBRATE = "calibrate"
SAMPLER = "sampler"


def stream_key(name: str) -> int:
    digest = hashlib.blake2b(name.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def substream(root_seed: int, *names: str) -> np.random.Generator:
    """Generator for the stream ``root_seed/names[0]/names[1]/...``.

    The same path always yields the same stream, independent of which other
    streams were drawn from before.
    """
    entropy = [int(root_seed) & 0xFFFFFFFFFFFFFFFF] + [stream_key(n) for n in names]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def child_seed(root_seed: int, *names: str) -> int:
    """A 64-bit seed for the named stream, for configs that store plain ints."""
    return int(substream(root_seed, *names).integers(0, 2**63 - 1))
