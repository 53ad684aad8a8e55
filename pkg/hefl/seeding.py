import hashlib

import numpy as np


def _tag_word(tag: str) -> int:
    return int.from_bytes(hashlib.sha256(tag.encode("utf-8")).digest()[:4], "big")


def derive_seed(seed: int, tag: str, index: int = 0) -> int:
    """
    Derives an independent 63-bit seed for the stream named ``tag``.

    The derivation only depends on ``(seed, tag, index)``, so new tags never
    perturb existing streams and the same triple always yields the same seed.

    Args:
        seed (int): Master (or parent) seed, non-negative.
        tag (str): Stream name, e.g. ``"dirichlet"`` or ``"train"``.
        index (int): Position within the stream family, e.g. a client id or a round.

    Returns:
        int: A non-negative seed usable by ``numpy.random.default_rng``.
    """
    if seed < 0 or index < 0:
        raise ValueError(f"seeds and indices must be non-negative, got {seed}, {index}")
    sequence = np.random.SeedSequence(entropy=int(seed), spawn_key=(_tag_word(tag), int(index)))
    return int(sequence.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def rng_for(seed: int, tag: str, index: int = 0) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, tag, index))
