"""Named random streams derived from one master seed.

Each consumer (data order, prior draws, penalty interpolation, ...) gets its
own generator keyed by a fixed label, so adding draws in one place never
shifts another stream.
"""

import zlib

import numpy as np


def _key(label: str) -> int:
    return zlib.crc32(label.encode("utf-8"))


def stream(seed: int, label: str) -> np.random.Generator:
    return np.random.default_rng([int(seed), _key(label)])


def derive_seed(seed: int, label: str) -> int:
    return int(np.random.SeedSequence([int(seed), _key(label)]).generate_state(1)[0])
